import { describe, expect, it } from "vitest";

import { decimateTrajectory, fadeAlpha, handleTrails, MAX_RENDERED_STEPS } from "../src/overlay.js";
import type { StepRecord } from "../src/types.js";

function steps(n: number): StepRecord[] {
  return Array.from({ length: n }, (_, i) => ({
    step: i,
    loss: 0,
    handles: [
      [i, 2 * i],
      [100 - i, 50],
    ],
    mean_dist_to_target: 0,
    angles: [0, 0],
    cache_hit: false,
  }));
}

describe("trajectory decimation", () => {
  it("leaves short runs untouched", () => {
    const t = steps(30);
    expect(decimateTrajectory(t)).toHaveLength(30);
  });

  it("caps long runs at the render budget", () => {
    const out = decimateTrajectory(steps(1000));
    expect(out.length).toBe(MAX_RENDERED_STEPS);
  });

  it("keeps the first and latest steps", () => {
    const t = steps(1234);
    const out = decimateTrajectory(t);
    expect(out[0]!.step).toBe(0);
    expect(out[out.length - 1]!.step).toBe(1233);
  });

  it("preserves ordering", () => {
    const out = decimateTrajectory(steps(999));
    const indices = out.map((s) => s.step);
    expect([...indices].sort((a, b) => a - b)).toEqual(indices);
  });
});

describe("fading", () => {
  it("newest step is opaque, older ones fainter", () => {
    expect(fadeAlpha(9, 10)).toBe(1.0);
    expect(fadeAlpha(0, 10)).toBeLessThan(fadeAlpha(5, 10));
    expect(fadeAlpha(0, 10)).toBeGreaterThan(0);
  });

  it("single-point trails are opaque", () => {
    expect(fadeAlpha(0, 1)).toBe(1.0);
  });
});

describe("handle trails", () => {
  it("splits per handle in order", () => {
    const trails = handleTrails(steps(4));
    expect(trails).toHaveLength(2);
    expect(trails[0]).toEqual([
      [0, 0],
      [1, 2],
      [2, 4],
      [3, 6],
    ]);
  });

  it("empty input gives no trails", () => {
    expect(handleTrails([])).toEqual([]);
  });
});
