"""Benchmark harnesses.

Two instruments live here. The affine harness curates single-transform warp
cases (scaling / rotation / perspective / translation), estimates homographies
from dense-feature correspondences, and scores them with the corner metric at
the 3-pixel threshold. The drag runner executes full editing sessions over a
directory of drag-case files and aggregates convergence statistics.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from rotdrag import cases as caseio
from rotdrag.diffusion import LatentCode, ZeroDenoiser
from rotdrag.engine import DragSession, StopReason
from rotdrag.features import FeatureBackend, FeatureMap, ReferenceFeatureBackend, sample_feature
from rotdrag.geometry import (
    CORRECTNESS_THRESHOLD_PX,
    AffineCategory,
    Homography,
    Point2,
    corner_error,
    warp_image,
)


class UnsatisfiableCrop(RuntimeError):
    """No crop keeps the sampled transform inside the frame."""


class DegenerateConfiguration(RuntimeError):
    """Homography estimation found fewer than four consistent matches."""


class EmptyBenchmark(ValueError):
    """The benchmark was invoked with nothing to evaluate."""


@dataclass(frozen=True)
class ParamRanges:
    """Sampling ranges for the single-transform curation."""

    rotation: tuple[float, float] = (-math.pi / 4, math.pi / 4)
    scale: tuple[float, float] = (0.75, 1.3)
    translation: tuple[float, float] = (-10.0, 10.0)
    perspective: tuple[float, float] = (2e-5, 4e-4)  # magnitude; sign is sampled


@dataclass
class AffineCase:
    reference: np.ndarray
    warped: np.ndarray
    h_gt: Homography
    category: AffineCategory
    crop: tuple[int, int, int, int]  # x0, y0, x1, y1 (inclusive bounds)


def _crop_rect(w: int, h: int, fraction: float) -> tuple[int, int, int, int]:
    cw, ch = int(w * fraction), int(h * fraction)
    x0, y0 = (w - cw) // 2, (h - ch) // 2
    return x0, y0, x0 + cw - 1, y0 + ch - 1


def _crop_contained(h_gt: Homography, rect, w, h) -> bool:
    x0, y0, x1, y1 = rect
    corners = np.array(
        [[x0, y0], [x1, y0], [x0, y1], [x1, y1]], dtype=float
    )
    mapped = h_gt.map_points(corners)
    return bool(
        np.all(mapped[:, 0] >= 0)
        and np.all(mapped[:, 0] <= w - 1)
        and np.all(mapped[:, 1] >= 0)
        and np.all(mapped[:, 1] <= h - 1)
    )


def _sample_transform(
    category: AffineCategory, ranges: ParamRanges, center: Point2, rng
) -> Homography:
    if category is AffineCategory.ROTATION:
        return Homography.rotation(float(rng.uniform(*ranges.rotation)), center)
    if category is AffineCategory.SCALING:
        return Homography.scaling(float(rng.uniform(*ranges.scale)), center)
    if category is AffineCategory.TRANSLATION:
        return Homography.translation(
            float(rng.uniform(*ranges.translation)),
            float(rng.uniform(*ranges.translation)),
        )
    if category is AffineCategory.PERSPECTIVE:
        lo, hi = ranges.perspective
        px = float(rng.uniform(lo, hi)) * (1 if rng.random() < 0.5 else -1)
        py = float(rng.uniform(lo, hi)) * (1 if rng.random() < 0.5 else -1)
        return Homography.perspective(px, py, center)
    raise ValueError(f"unknown category {category}")


def curate_affine_cases(
    images: list[np.ndarray],
    category: AffineCategory,
    count: int,
    seed: int,
    param_ranges: ParamRanges | None = None,
    max_param_retries: int = 20,
) -> list[AffineCase]:
    """Warp each image with exactly one transform of the requested family.

    The ground-truth map acts about the center of a central crop chosen (by
    shrinking when needed) so all four crop corners stay inside the frame
    after warping; keypoints are later sampled inside that crop, where
    content is guaranteed visible in both images.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if not images:
        raise EmptyBenchmark("no images supplied for curation")
    ranges = param_ranges or ParamRanges()
    rng = np.random.default_rng(seed)
    out = []
    for k in range(count):
        img = np.asarray(images[k % len(images)], dtype=float)
        h, w = img.shape[:2]
        case = None
        for _ in range(max_param_retries):
            fraction = 0.5
            rect = _crop_rect(w, h, fraction)
            center = Point2(
                (rect[0] + rect[2]) / 2.0, (rect[1] + rect[3]) / 2.0
            )
            h_gt = _sample_transform(category, ranges, center, rng)
            ok = False
            for _ in range(6):
                if _crop_contained(h_gt, rect, w, h):
                    ok = True
                    break
                fraction *= 0.85
                rect = _crop_rect(w, h, fraction)
            if ok:
                case = AffineCase(
                    reference=img,
                    warped=warp_image(img, h_gt),
                    h_gt=h_gt,
                    category=category,
                    crop=rect,
                )
                break
        if case is None:
            raise UnsatisfiableCrop(
                f"could not contain a {category.value} transform in {w}x{h} frame"
            )
        out.append(case)
    return out


def image_to_latent(img: np.ndarray) -> LatentCode:
    img = np.asarray(img, dtype=float)
    if img.ndim == 2:
        img = img[:, :, None]
    return LatentCode(torch.tensor(np.moveaxis(img, -1, 0), dtype=torch.float64), 0)


def _nn_match(fm_a: FeatureMap, fm_b: FeatureMap, keypoints: list[Point2]) -> np.ndarray:
    """Exhaustive nearest-neighbor matches of keypoint features into fm_b.

    Returns (N, 4): x_a, y_a, x_b, y_b in image coordinates.
    """
    hb, wb = fm_b.spatial
    flat_b = fm_b.data.detach().numpy().reshape(fm_b.data.shape[0], -1).T  # (Nb, C)
    rows = []
    for p in keypoints:
        va = sample_feature(fm_a, p).detach().numpy()
        idx = int(np.abs(flat_b - va).sum(axis=1).argmin())
        by, bx = divmod(idx, wb)
        rows.append([p.x, p.y, bx / fm_b.scale, by / fm_b.scale])
    return np.array(rows, dtype=float)


def _dlt(src: np.ndarray, dst: np.ndarray) -> Homography | None:
    """Normalized direct linear transform on (N, 2) correspondences."""

    def normalizer(pts):
        c = pts.mean(axis=0)
        d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
        if d < 1e-9:
            return None
        s = math.sqrt(2.0) / d
        return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])

    t_src, t_dst = normalizer(src), normalizer(dst)
    if t_src is None or t_dst is None:
        return None
    sn = (np.c_[src, np.ones(len(src))] @ t_src.T)[:, :2]
    dn = (np.c_[dst, np.ones(len(dst))] @ t_dst.T)[:, :2]
    a = []
    for (x, y), (u, v) in zip(sn, dn):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y, -u])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y, -v])
    a = np.asarray(a)
    if np.linalg.matrix_rank(a) < 8:
        return None
    _, _, vt = np.linalg.svd(a)
    hn = vt[-1].reshape(3, 3)
    if abs(hn[2, 2]) < 1e-12:
        return None
    try:
        return Homography(np.linalg.inv(t_dst) @ hn @ t_src)
    except ValueError:
        return None


def estimate_homography(
    fm_a: FeatureMap,
    fm_b: FeatureMap,
    keypoints: list[Point2],
    seed: int = 0,
    iterations: int = 2000,
    inlier_px: float = 3.0,
) -> Homography:
    """Feature matching plus seeded random-sample consensus.

    Each keypoint's fm_a vector is matched exhaustively into fm_b; 4-point
    DLT hypotheses are scored by inlier count at the pixel threshold and the
    winner is refit on its inliers by least squares.

    Raises:
        DegenerateConfiguration: fewer than 4 keypoints or no 4-inlier model.
    """
    if len(keypoints) < 4:
        raise DegenerateConfiguration("need at least 4 keypoints")
    matches = _nn_match(fm_a, fm_b, keypoints)
    src, dst = matches[:, :2], matches[:, 2:]
    rng = np.random.default_rng(seed)

    best_h, best_inliers, best_count = None, None, 0
    for _ in range(iterations):
        idx = rng.choice(len(src), size=4, replace=False)
        h = _dlt(src[idx], dst[idx])
        if h is None:
            continue
        try:
            projected = h.map_points(src)
        except Exception:
            continue
        err = np.sqrt(((projected - dst) ** 2).sum(axis=1))
        inliers = err <= inlier_px
        count = int(inliers.sum())
        if count > best_count:
            best_h, best_inliers, best_count = h, inliers, count

    if best_h is None or best_count < 4:
        raise DegenerateConfiguration(
            f"consensus too small: {best_count} inliers of {len(src)} matches"
        )
    refit = _dlt(src[best_inliers], dst[best_inliers])
    return refit if refit is not None else best_h


@dataclass
class BenchReport:
    """Per-category homography accuracy in the four-column table layout."""

    method: str
    counts: dict[str, int] = field(default_factory=dict)
    correct: dict[str, int] = field(default_factory=dict)
    threshold_px: float = CORRECTNESS_THRESHOLD_PX

    COLUMNS = ("scaling", "rotation", "perspective", "translation")

    def add(self, category: AffineCategory, is_correct: bool) -> None:
        key = category.value
        self.counts[key] = self.counts.get(key, 0) + 1
        self.correct[key] = self.correct.get(key, 0) + int(is_correct)

    def accuracy(self, category: str) -> float | None:
        n = self.counts.get(category, 0)
        if n == 0:
            return None
        return self.correct[category] / n

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "threshold_px": self.threshold_px,
            "categories": {
                c: {
                    "count": self.counts.get(c, 0),
                    "correct": self.correct.get(c, 0),
                    "accuracy": self.accuracy(c),
                }
                for c in self.COLUMNS
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def format_report_table(reports: list["BenchReport"]) -> str:
    """Human-readable accuracy table: rows are methods, columns transforms."""
    headers = ["Method"] + [c.capitalize() for c in BenchReport.COLUMNS]
    rows = []
    for r in reports:
        row = [r.method]
        for c in BenchReport.COLUMNS:
            acc = r.accuracy(c)
            row.append("-" if acc is None else f"{100.0 * acc:.1f}")
        rows.append(row)
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(headers)]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)),
        "  ".join("-" * widths[i] for i in range(len(headers))),
    ]
    for row in rows:
        lines.append("  ".join(row[i].ljust(widths[i]) for i in range(len(row))))
    return "\n".join(lines)


def keypoint_grid_points(crop: tuple[int, int, int, int], n: int) -> list[Point2]:
    """Uniform n x n grid of integer pixels strictly inside the crop.

    Integer positions keep the exhaustive matcher exact: its candidates live
    on the feature grid, so fractional query points would add half-pixel
    quantization error to every correspondence.
    """
    x0, y0, x1, y1 = crop
    mx = max(2.0, 0.08 * (x1 - x0))
    my = max(2.0, 0.08 * (y1 - y0))
    xs = np.unique(np.linspace(x0 + mx, x1 - mx, n).round())
    ys = np.unique(np.linspace(y0 + my, y1 - my, n).round())
    return [Point2(float(x), float(y)) for y in ys for x in xs]


def evaluate_method(
    cases: list[AffineCase],
    backend: FeatureBackend | None = None,
    keypoint_grid: int = 8,
    seed: int = 0,
    method: str = "reference",
) -> BenchReport:
    """Score homography estimation accuracy per transform category.

    Estimation failures count as incorrect rather than aborting the run.
    """
    if not cases:
        raise EmptyBenchmark("no affine cases to evaluate")
    backend = backend or ReferenceFeatureBackend()
    report = BenchReport(method=method)
    for case in cases:
        try:
            fm_a = backend.extract(image_to_latent(case.reference), 0, None, "")
            fm_b = backend.extract(image_to_latent(case.warped), 0, None, "")
            keypoints = keypoint_grid_points(case.crop, keypoint_grid)
            h_est = estimate_homography(fm_a, fm_b, keypoints, seed=seed)
            err = corner_error(
                h_est, case.h_gt, case.reference.shape[1], case.reference.shape[0]
            )
            report.add(case.category, err <= report.threshold_px)
        except Exception:
            report.add(case.category, False)
    return report


# -- drag benchmark ----------------------------------------------------------


def run_drag_benchmark(
    case_paths: list[Path],
    out_dir: Path,
    engine_overrides: dict | None = None,
    denoiser_factory=ZeroDenoiser,
    backend_factory=ReferenceFeatureBackend,
    workers: int = 1,
) -> dict:
    """Run the full engine over a set of drag-case files.

    Each case gets a result directory (edited image, per-step trajectory,
    metadata); failures are recorded and do not stop the run. Results merge
    in case order regardless of worker scheduling.
    """
    if not case_paths:
        raise EmptyBenchmark("no drag cases supplied")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def run_one(path: Path) -> dict:
        name = Path(path).stem
        case_dir = out_dir / name
        case_dir.mkdir(parents=True, exist_ok=True)
        started = time.perf_counter()
        try:
            case = caseio.load_drag_case(path)
            config = caseio.drag_config_from_case(case, engine_overrides)
            session = DragSession(config, denoiser_factory(), backend_factory())
            result = session.run()
            caseio.save_image(case_dir / "edited.png", result.image)
            with open(case_dir / "trajectory.jsonl", "w") as fh:
                for report in result.trajectory:
                    fh.write(report.to_json_line() + "\n")
            final_dists = session.distances()
            meta = {
                "case": name,
                "stop_reason": result.stop_reason.value,
                "final_distances": final_dists,
                "mean_final_distance": float(np.mean(final_dists)),
                "steps": result.trajectory[-1].step,
                "angles": session.angles,
                "cache": session.cache_stats(),
                "hyperparameters": config.hyperparams(),
                "timing": result.timing,
                "error": result.error,
            }
            (case_dir / "metadata.json").write_text(json.dumps(meta, indent=2) + "\n")
            return meta
        except Exception as exc:
            meta = {
                "case": name,
                "stop_reason": StopReason.ABORTED.value,
                "error": f"{type(exc).__name__}: {exc}",
                "wall_seconds": time.perf_counter() - started,
            }
            (case_dir / "metadata.json").write_text(json.dumps(meta, indent=2) + "\n")
            return meta

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, case_paths))
    else:
        results = [run_one(p) for p in case_paths]

    completed = [r for r in results if r["stop_reason"] != StopReason.ABORTED.value]
    converged = [r for r in completed if r["stop_reason"] == StopReason.CONVERGED.value]
    summary = {
        "n_cases": len(results),
        "n_completed": len(completed),
        "n_failed": len(results) - len(completed),
        "convergence_rate": len(converged) / len(results),
        "mean_final_distance": (
            float(np.mean([r["mean_final_distance"] for r in completed]))
            if completed
            else None
        ),
        "total_wall_seconds": sum(
            r.get("timing", {}).get("invert", 0.0)
            + r.get("timing", {}).get("optimize", 0.0)
            + r.get("timing", {}).get("track", 0.0)
            + r.get("timing", {}).get("denoise", 0.0)
            for r in completed
        ),
        "cases": results,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary
