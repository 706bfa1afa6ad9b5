/** Wire types shared with the editing service. */

/** Pixel position in image space: [x, y], origin top-left, y downward. */
export type ImagePoint = [number, number];

export interface PointPair {
  source: ImagePoint;
  target: ImagePoint;
}

export interface PointsPayload {
  points: PointPair[];
}

/** One optimization step, as streamed on /jobs/{id}/progress. */
export interface StepRecord {
  step: number;
  loss: number;
  handles: ImagePoint[];
  mean_dist_to_target: number;
  angles: number[];
  cache_hit: boolean;
}

export interface JobFinal {
  id: string;
  session_id: string;
  state: "queued" | "running" | "done" | "failed" | "cancelled";
  error: string | null;
  stop_reason: string | null;
}

export type ProgressRecord = StepRecord | { final: JobFinal };

export function isFinalRecord(r: ProgressRecord): r is { final: JobFinal } {
  return typeof r === "object" && r !== null && "final" in r;
}
