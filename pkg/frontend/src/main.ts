/** Canvas application: annotate, brush a mask, launch an edit, watch it land. */

import { ServiceClient } from "./api.js";
import { AnnotationBoard } from "./annotations.js";
import { canvasToImage, MaskRaster, type Viewport } from "./mask.js";
import { decimateTrajectory, fadeAlpha, handleTrails } from "./overlay.js";
import { UiStateMachine } from "./state.js";
import { JobWatcher } from "./stream.js";
import type { StepRecord } from "./types.js";

type Tool = "points" | "brush" | "eraser";

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing #${id}`);
  return el as T;
};

const client = new ServiceClient("");
const machine = new UiStateMachine();

const canvas = $<HTMLCanvasElement>("canvas");
const ctx = canvas.getContext("2d")!;
const statusEl = $<HTMLSpanElement>("status");
const bannerEl = $<HTMLDivElement>("banner");
const sliderEl = $<HTMLInputElement>("compare");
const brushSizeEl = $<HTMLInputElement>("brush-size");

let tool: Tool = "points";
let image: HTMLImageElement | null = null;
let sessionId: string | null = null;
let board: AnnotationBoard | null = null;
let mask: MaskRaster | null = null;
let resultImage: HTMLImageElement | null = null;
let steps: StepRecord[] = [];
let view: Viewport = { zoom: 1, panX: 0, panY: 0 };
let brushing = false;
let strokePoints: [number, number][] = [];

function setStatus(text: string): void {
  statusEl.textContent = `${machine.state}: ${text}`;
}

function showBanner(text: string | null): void {
  bannerEl.textContent = text ?? "";
  bannerEl.style.display = text ? "block" : "none";
}

function fitView(): void {
  if (!image) return;
  const scale = Math.min(canvas.width / image.width, canvas.height / image.height);
  view = {
    zoom: scale,
    panX: (canvas.width - image.width * scale) / 2,
    panY: (canvas.height - image.height * scale) / 2,
  };
}

function draw(): void {
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (!image || !board || !mask) return;
  ctx.save();
  ctx.translate(view.panX, view.panY);
  ctx.scale(view.zoom, view.zoom);

  const before = image;
  const blend = Number(sliderEl.value) / 100;
  ctx.drawImage(before, 0, 0);
  if (resultImage && machine.state === "reviewing") {
    ctx.globalAlpha = blend;
    ctx.drawImage(resultImage, 0, 0);
    ctx.globalAlpha = 1;
  }

  // mask tint
  if (!mask.isEmpty()) {
    const tint = document.createElement("canvas");
    tint.width = mask.width;
    tint.height = mask.height;
    const tctx = tint.getContext("2d")!;
    const data = new ImageData(mask.toRgba(), mask.width, mask.height);
    tctx.putImageData(data, 0, 0);
    ctx.globalAlpha = 0.25;
    ctx.drawImage(tint, 0, 0);
    ctx.globalAlpha = 1;
  }

  // trajectory overlay, decimated and fading
  const shown = decimateTrajectory(steps);
  for (const trail of handleTrails(shown)) {
    for (let i = 1; i < trail.length; i++) {
      ctx.strokeStyle = `rgba(255, 200, 0, ${fadeAlpha(i, trail.length)})`;
      ctx.lineWidth = 1.5 / view.zoom;
      ctx.beginPath();
      ctx.moveTo(trail[i - 1]![0], trail[i - 1]![1]);
      ctx.lineTo(trail[i]![0], trail[i]![1]);
      ctx.stroke();
    }
  }

  // point pairs: sources red, targets blue
  const r = 4 / view.zoom;
  for (const pair of board.pairs) {
    ctx.strokeStyle = "white";
    ctx.lineWidth = 1 / view.zoom;
    ctx.fillStyle = "#e33";
    ctx.beginPath();
    ctx.arc(pair.source[0], pair.source[1], r, 0, 2 * Math.PI);
    ctx.fill();
    ctx.stroke();
    ctx.fillStyle = "#36f";
    ctx.beginPath();
    ctx.arc(pair.target[0], pair.target[1], r, 0, 2 * Math.PI);
    ctx.fill();
    ctx.stroke();
    ctx.strokeStyle = "rgba(255,255,255,0.7)";
    ctx.beginPath();
    ctx.moveTo(pair.source[0], pair.source[1]);
    ctx.lineTo(pair.target[0], pair.target[1]);
    ctx.stroke();
  }
  if (board.pending) {
    ctx.fillStyle = "rgba(238,51,51,0.6)";
    ctx.beginPath();
    ctx.arc(board.pending[0], board.pending[1], r, 0, 2 * Math.PI);
    ctx.fill();
  }
  ctx.restore();
}

function eventImagePoint(ev: MouseEvent): [number, number] {
  const rect = canvas.getBoundingClientRect();
  return canvasToImage(ev.clientX - rect.left, ev.clientY - rect.top, view);
}

async function loadImageFile(file: File): Promise<void> {
  const url = URL.createObjectURL(file);
  const img = new Image();
  await new Promise<void>((resolve, reject) => {
    img.onload = () => resolve();
    img.onerror = () => reject(new Error("cannot decode image"));
    img.src = url;
  });
  const session = await client.createSession(file);
  image = img;
  sessionId = session.id;
  board = new AnnotationBoard(session.image.width, session.image.height);
  mask = new MaskRaster(session.image.width, session.image.height);
  resultImage = null;
  steps = [];
  machine.dispatch("image-loaded");
  fitView();
  showBanner(null);
  setStatus("click source then target; B for brush, Esc cancels a pair");
  draw();
}

async function maskToPng(raster: MaskRaster): Promise<Blob> {
  const off = document.createElement("canvas");
  off.width = raster.width;
  off.height = raster.height;
  const octx = off.getContext("2d")!;
  octx.putImageData(new ImageData(raster.toRgba(), raster.width, raster.height), 0, 0);
  return new Promise((resolve, reject) =>
    off.toBlob((b) => (b ? resolve(b) : reject(new Error("mask encode failed"))), "image/png")
  );
}

async function startEdit(): Promise<void> {
  if (!sessionId || !board || !mask) return;
  if (board.pairs.length === 0) {
    showBanner("place at least one source/target pair");
    return;
  }
  if (mask.isEmpty()) {
    showBanner("brush an editable region first");
    return;
  }
  await client.putPoints(sessionId, board.serialize());
  await client.putMask(sessionId, await maskToPng(mask));
  const { job_id } = await client.startEdit(sessionId);
  machine.dispatch("edit-started");
  steps = [];
  setStatus(`job ${job_id} running`);

  const watcher = new JobWatcher({
    onStep: (record) => {
      steps.push(record);
      setStatus(`step ${record.step}, mean distance ${record.mean_dist_to_target.toFixed(2)} px`);
      draw();
    },
  });
  try {
    const final = await watcher.watch(() => client.openProgress(job_id));
    if (final.state === "done") {
      const img = new Image();
      await new Promise<void>((resolve, reject) => {
        img.onload = () => resolve();
        img.onerror = () => reject(new Error("result decode failed"));
        img.src = client.resultUrl(job_id);
      });
      resultImage = img;
      machine.dispatch("job-done");
      setStatus("done; drag the slider to compare");
    } else {
      machine.dispatch("job-failed");
      showBanner(`job ${final.state}: ${final.error ?? "no detail"}`);
      setStatus("failed");
    }
  } catch (err) {
    machine.dispatch("job-failed");
    showBanner(String(err));
  }
  draw();
}

canvas.addEventListener("mousedown", (ev) => {
  if (machine.state !== "annotating" || !board || !mask) return;
  const [ix, iy] = eventImagePoint(ev);
  if (tool === "points") {
    const outcome = board.click(ix, iy);
    if (outcome === "ignored") {
      showBanner("click inside the image");
      window.setTimeout(() => showBanner(null), 800);
    }
    draw();
  } else {
    brushing = true;
    strokePoints = [[ix, iy]];
    mask.stroke(strokePoints, Number(brushSizeEl.value), tool === "eraser");
    draw();
  }
});

canvas.addEventListener("mousemove", (ev) => {
  if (!brushing || !mask) return;
  const [ix, iy] = eventImagePoint(ev);
  strokePoints.push([ix, iy]);
  mask.stroke(strokePoints.slice(-2), Number(brushSizeEl.value), tool === "eraser");
  draw();
});

window.addEventListener("mouseup", () => {
  brushing = false;
  strokePoints = [];
});

window.addEventListener("keydown", (ev) => {
  if (ev.key === "Escape" && board) {
    board.cancelPending();
    draw();
  } else if (ev.key === "b" || ev.key === "B") {
    tool = tool === "brush" ? "points" : "brush";
    setStatus(`tool: ${tool}`);
  } else if (ev.key === "e" || ev.key === "E") {
    tool = tool === "eraser" ? "points" : "eraser";
    setStatus(`tool: ${tool}`);
  }
});

$<HTMLInputElement>("file").addEventListener("change", (ev) => {
  const file = (ev.target as HTMLInputElement).files?.[0];
  if (file) {
    loadImageFile(file).catch((err) => showBanner(String(err)));
  }
});

$<HTMLButtonElement>("zoom-in").addEventListener("click", () => {
  view = { ...view, zoom: view.zoom * 1.25 };
  draw();
});
$<HTMLButtonElement>("zoom-out").addEventListener("click", () => {
  view = { ...view, zoom: view.zoom / 1.25 };
  draw();
});
$<HTMLButtonElement>("start").addEventListener("click", () => {
  startEdit().catch((err) => showBanner(String(err)));
});
$<HTMLButtonElement>("clear").addEventListener("click", () => {
  board?.clear();
  mask?.fill(0);
  draw();
});
sliderEl.addEventListener("input", draw);

setStatus("load an image to begin");
