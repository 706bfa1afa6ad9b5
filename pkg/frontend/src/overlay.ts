/** Trajectory overlay helpers: decimation and fading. */

import type { StepRecord } from "./types.js";

export const MAX_RENDERED_STEPS = 200;

/**
 * Thin a trajectory to at most maxSteps entries, always keeping the first
 * and the latest step so the drawn path stays anchored.
 */
export function decimateTrajectory<T>(steps: T[], maxSteps = MAX_RENDERED_STEPS): T[] {
  if (steps.length <= maxSteps) {
    return steps.slice();
  }
  const out: T[] = [];
  const stride = (steps.length - 1) / (maxSteps - 1);
  for (let i = 0; i < maxSteps; i++) {
    out.push(steps[Math.round(i * stride)]!);
  }
  return out;
}

/** Older steps fade out; the newest is fully opaque. */
export function fadeAlpha(index: number, count: number): number {
  if (count <= 1) {
    return 1.0;
  }
  return 0.15 + 0.85 * (index / (count - 1));
}

/** Per-handle polylines from a step window, for canvas drawing. */
export function handleTrails(steps: StepRecord[]): [number, number][][] {
  if (steps.length === 0) {
    return [];
  }
  const nHandles = steps[0]!.handles.length;
  const trails: [number, number][][] = [];
  for (let h = 0; h < nHandles; h++) {
    trails.push(steps.map((s) => s.handles[h] ?? [0, 0]));
  }
  return trails;
}
