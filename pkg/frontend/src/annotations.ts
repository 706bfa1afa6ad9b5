/**
 * Handle/target pair placement.
 *
 * Coordinates live in image space the whole time; the canvas layer converts
 * at its render/event boundary, so zooming or panning can never corrupt what
 * gets submitted. Clicks alternate source then target; a half-placed pair can
 * be cancelled. Serialization emits the exact service schema.
 */

import type { ImagePoint, PointPair, PointsPayload } from "./types.js";

export class AnnotationBoard {
  readonly width: number;
  readonly height: number;
  pairs: PointPair[] = [];
  /** Source waiting for its target click, if any. */
  pending: ImagePoint | null = null;

  constructor(width: number, height: number) {
    if (width < 1 || height < 1) {
      throw new Error(`bad image dims ${width}x${height}`);
    }
    this.width = width;
    this.height = height;
  }

  inBounds(x: number, y: number): boolean {
    return x >= 0 && y >= 0 && x <= this.width - 1 && y <= this.height - 1;
  }

  clamp(x: number, y: number): ImagePoint {
    return [
      Math.min(Math.max(x, 0), this.width - 1),
      Math.min(Math.max(y, 0), this.height - 1),
    ];
  }

  /**
   * Register a click in image coordinates. Out-of-image clicks are ignored
   * (callers show visual feedback). Returns what the click produced.
   */
  click(x: number, y: number): "ignored" | "source" | "pair" {
    if (!this.inBounds(x, y)) {
      return "ignored";
    }
    if (this.pending === null) {
      this.pending = [x, y];
      return "source";
    }
    this.pairs.push({ source: this.pending, target: [x, y] });
    this.pending = null;
    return "pair";
  }

  /** Escape: drop a half-placed source. */
  cancelPending(): void {
    this.pending = null;
  }

  /** Drag an already-placed point; the position clamps to the image. */
  movePoint(index: number, role: "source" | "target", x: number, y: number): void {
    const pair = this.pairs[index];
    if (!pair) {
      throw new Error(`no pair at index ${index}`);
    }
    pair[role] = this.clamp(x, y);
  }

  removePair(index: number): void {
    this.pairs.splice(index, 1);
  }

  clear(): void {
    this.pairs = [];
    this.pending = null;
  }

  /** Exact service payload; numbers pass through untouched. */
  serialize(): PointsPayload {
    return {
      points: this.pairs.map((p) => ({
        source: [p.source[0], p.source[1]],
        target: [p.target[0], p.target[1]],
      })),
    };
  }

  static deserialize(payload: PointsPayload, width: number, height: number): AnnotationBoard {
    const board = new AnnotationBoard(width, height);
    board.pairs = payload.points.map((p) => ({
      source: [p.source[0], p.source[1]],
      target: [p.target[0], p.target[1]],
    }));
    return board;
  }
}
