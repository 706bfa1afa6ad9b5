import { describe, expect, it } from "vitest";

import { canvasToImage, imageToCanvas, MaskRaster, type Viewport } from "../src/mask.js";

describe("mask raster", () => {
  it("starts all zero", () => {
    const mask = new MaskRaster(40, 30);
    expect(mask.area()).toBe(0);
    expect(mask.isEmpty()).toBe(true);
  });

  it("full fill is all ones", () => {
    const mask = new MaskRaster(16, 12);
    mask.fill(1);
    expect(mask.area()).toBe(16 * 12);
  });

  it("one circular stamp covers close to pi r^2", () => {
    const mask = new MaskRaster(64, 64);
    const r = 10;
    mask.stampDisk(32, 32, r);
    const expected = Math.PI * r * r;
    expect(Math.abs(mask.area() - expected) / expected).toBeLessThan(0.05);
  });

  it("eraser removes painted pixels", () => {
    const mask = new MaskRaster(64, 64);
    mask.stampDisk(32, 32, 12);
    const before = mask.area();
    mask.stroke(
      [
        [28, 32],
        [36, 32],
      ],
      4,
      true
    );
    expect(mask.area()).toBeLessThan(before);
    expect(mask.at(32, 32)).toBe(0);
  });

  it("strokes interpolate between sparse points", () => {
    const mask = new MaskRaster(64, 16);
    mask.stroke(
      [
        [4, 8],
        [60, 8],
      ],
      2
    );
    for (let x = 4; x <= 60; x++) {
      expect(mask.at(x, 8)).toBe(1);
    }
  });

  it("stamps clip at the borders without resizing", () => {
    const mask = new MaskRaster(20, 20);
    mask.stampDisk(0, 0, 6);
    mask.stampDisk(19, 19, 6);
    expect(mask.width).toBe(20);
    expect(mask.height).toBe(20);
    expect(mask.at(0, 0)).toBe(1);
    expect(mask.at(19, 19)).toBe(1);
  });
});

describe("zoom independence", () => {
  const zoomLevels = [0.25, 0.5, 1, 2, 4];

  it("raster dims equal image dims at five zoom levels", () => {
    for (const zoom of zoomLevels) {
      const view: Viewport = { zoom, panX: 13, panY: -7 };
      const mask = new MaskRaster(96, 64);
      // brush gesture delivered in canvas coordinates
      const canvasPath: [number, number][] = [
        [40, 40],
        [60, 55],
        [90, 60],
      ];
      const imagePath = canvasPath.map(([cx, cy]) => canvasToImage(cx, cy, view));
      mask.stroke(imagePath, 5);
      expect(mask.width).toBe(96);
      expect(mask.height).toBe(64);
      expect(mask.data.length).toBe(96 * 64);
    }
  });

  it("the same image-space gesture paints the same pixels at any zoom", () => {
    const gestureImageSpace: [number, number][] = [
      [20, 20],
      [40, 30],
    ];
    const rasters = zoomLevels.map((zoom) => {
      const view: Viewport = { zoom, panX: 5, panY: 9 };
      const canvasPath = gestureImageSpace.map(([ix, iy]) => imageToCanvas(ix, iy, view));
      const mask = new MaskRaster(64, 64);
      mask.stroke(
        canvasPath.map(([cx, cy]) => canvasToImage(cx, cy, view)),
        4
      );
      return mask;
    });
    const reference = rasters[0]!;
    for (const other of rasters.slice(1)) {
      expect(Array.from(other.data)).toEqual(Array.from(reference.data));
    }
  });

  it("canvas/image conversion round-trips", () => {
    const view: Viewport = { zoom: 2.5, panX: -12.25, panY: 3.75 };
    const [cx, cy] = imageToCanvas(17.3, 41.9, view);
    const [ix, iy] = canvasToImage(cx, cy, view);
    expect(ix).toBeCloseTo(17.3, 12);
    expect(iy).toBeCloseTo(41.9, 12);
  });
});
