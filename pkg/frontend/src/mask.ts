/**
 * Brush-drawn editing masks.
 *
 * The raster always has the exact image dimensions; strokes arrive in image
 * space (the canvas converts from screen space first), so the zoom level can
 * never change what gets uploaded. Painting stamps disks along the stroke
 * path; the eraser stamps zeros.
 */

export interface Viewport {
  zoom: number;
  panX: number;
  panY: number;
}

/** Screen/canvas position to image space under a zoom+pan viewport. */
export function canvasToImage(
  cx: number,
  cy: number,
  view: Viewport
): [number, number] {
  return [(cx - view.panX) / view.zoom, (cy - view.panY) / view.zoom];
}

export function imageToCanvas(
  ix: number,
  iy: number,
  view: Viewport
): [number, number] {
  return [ix * view.zoom + view.panX, iy * view.zoom + view.panY];
}

export class MaskRaster {
  readonly width: number;
  readonly height: number;
  readonly data: Uint8Array;

  constructor(width: number, height: number) {
    if (width < 1 || height < 1) {
      throw new Error(`bad mask dims ${width}x${height}`);
    }
    this.width = width;
    this.height = height;
    this.data = new Uint8Array(width * height);
  }

  at(x: number, y: number): number {
    return this.data[y * this.width + x] ?? 0;
  }

  /** Set all pixels whose center lies within radius of (cx, cy). */
  stampDisk(cx: number, cy: number, radius: number, value: 0 | 1 = 1): void {
    const r2 = radius * radius;
    const x0 = Math.max(0, Math.floor(cx - radius));
    const x1 = Math.min(this.width - 1, Math.ceil(cx + radius));
    const y0 = Math.max(0, Math.floor(cy - radius));
    const y1 = Math.min(this.height - 1, Math.ceil(cy + radius));
    for (let y = y0; y <= y1; y++) {
      const dy = y - cy;
      for (let x = x0; x <= x1; x++) {
        const dx = x - cx;
        if (dx * dx + dy * dy <= r2) {
          this.data[y * this.width + x] = value;
        }
      }
    }
  }

  /** Stamp a polyline of image-space points with interpolation. */
  stroke(points: [number, number][], radius: number, erase = false): void {
    const value = erase ? 0 : 1;
    if (points.length === 0) {
      return;
    }
    const first = points[0]!;
    this.stampDisk(first[0], first[1], radius, value);
    for (let i = 1; i < points.length; i++) {
      const [ax, ay] = points[i - 1]!;
      const [bx, by] = points[i]!;
      const dist = Math.hypot(bx - ax, by - ay);
      const steps = Math.max(1, Math.ceil(dist / Math.max(radius / 2, 0.5)));
      for (let s = 1; s <= steps; s++) {
        const t = s / steps;
        this.stampDisk(ax + t * (bx - ax), ay + t * (by - ay), radius, value);
      }
    }
  }

  fill(value: 0 | 1): void {
    this.data.fill(value);
  }

  area(): number {
    let n = 0;
    for (const v of this.data) {
      n += v;
    }
    return n;
  }

  isEmpty(): boolean {
    return this.area() === 0;
  }

  clone(): MaskRaster {
    const copy = new MaskRaster(this.width, this.height);
    copy.data.set(this.data);
    return copy;
  }

  /** Grayscale RGBA pixels for canvas preview and PNG encoding. */
  toRgba(): Uint8ClampedArray<ArrayBuffer> {
    const out = new Uint8ClampedArray(this.width * this.height * 4);
    for (let i = 0; i < this.data.length; i++) {
      const v = this.data[i] ? 255 : 0;
      out[i * 4] = v;
      out[i * 4 + 1] = v;
      out[i * 4 + 2] = v;
      out[i * 4 + 3] = 255;
    }
    return out;
  }
}
