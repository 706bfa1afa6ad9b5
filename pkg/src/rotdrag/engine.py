"""The drag-optimization loop.

Each iteration alternates two phases. Motion supervision nudges the latent so
that the feature patch around every active handle reproduces itself one unit
step toward its target, with an L1 penalty keeping the region outside the
mask unchanged. Point tracking then relocates each handle by nearest-neighbor
feature search; crucially, the search template is sampled from a freshly
re-inverted *rotated* copy of the input image at the handle's current drag
angle, so templates stay valid while content turns in plane. Rotated
references are cached per quantized angle because each one costs a full DDIM
inversion.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Protocol

import numpy as np
import torch

from rotdrag.diffusion import (
    DEFAULT_SCHEDULE,
    Denoiser,
    LatentCode,
    NoiseSchedule,
    ddim_denoise,
    ddim_invert,
    ddim_step,
    trajectory_indices,
)
from rotdrag.features import FeatureBackend, FeatureMap, clamp_to_bounds, sample_feature
from rotdrag.geometry import (
    DegenerateAxis,
    EmptyMaskLine,
    Point2,
    compute_rotation_angle,
    image_center,
    mask_centroid,
    rotate_image,
    rotate_point,
    select_rotation_axis,
)


class AllHandlesConverged(RuntimeError):
    """Motion loss is undefined: every drag direction has degenerated."""


class NonFiniteLoss(RuntimeError):
    """The optimization produced a NaN/Inf loss; the session is aborted."""


class StopReason(Enum):
    CONVERGED = "converged"
    MAX_STEPS = "max_steps"
    ABORTED = "aborted"


@dataclass
class DragConfig:
    """One editing task plus its optimization hyperparameters."""

    image: np.ndarray  # (H, W) or (H, W, C) float in [0, 1]
    sources: list[Point2]
    targets: list[Point2]
    mask: np.ndarray  # (H, W); nonzero = editable
    prompt: str = ""
    r1: int = 1
    r2: int = 3
    lambda_mask: float = 0.1
    lr: float = 0.01
    max_steps: int = 160
    stop_dist: float = 2.0
    t_edit: int = 700
    n_ddim_steps: int = 50
    angle_bin: float = math.radians(1.0)
    latent_scale: float = 1.0
    use_rotated_templates: bool = True

    def __post_init__(self) -> None:
        self.image = np.asarray(self.image, dtype=float)
        if self.image.ndim == 2:
            self.image = self.image[:, :, None]
        if self.image.ndim != 3 or self.image.size == 0:
            raise ValueError("image must be a nonempty (H, W[, C]) array")
        self.mask = np.asarray(self.mask).astype(bool)
        if self.mask.shape != self.image.shape[:2]:
            raise ValueError(
                f"mask shape {self.mask.shape} != image shape {self.image.shape[:2]}"
            )
        if not self.sources or len(self.sources) != len(self.targets):
            raise ValueError("need equal, nonzero numbers of sources and targets")
        h, w = self.image.shape[:2]
        for p in [*self.sources, *self.targets]:
            if not (0 <= p.x <= w - 1 and 0 <= p.y <= h - 1):
                raise ValueError(f"point ({p.x}, {p.y}) outside {w}x{h} image")
        if not (self.r2 >= self.r1 >= 1):
            raise ValueError("need r2 >= r1 >= 1")
        if self.lr < 0 or self.stop_dist <= 0 or self.max_steps < 0:
            raise ValueError("bad optimizer settings")
        if self.angle_bin <= 0:
            raise ValueError("angle_bin must be positive")

    def hyperparams(self) -> dict:
        return {
            "r1": self.r1,
            "r2": self.r2,
            "lambda_mask": self.lambda_mask,
            "lr": self.lr,
            "max_steps": self.max_steps,
            "stop_dist": self.stop_dist,
            "t_edit": self.t_edit,
            "n_ddim_steps": self.n_ddim_steps,
            "angle_bin": self.angle_bin,
            "latent_scale": self.latent_scale,
            "use_rotated_templates": self.use_rotated_templates,
            "prompt": self.prompt,
        }


@dataclass
class StepReport:
    """Per-step progress record; serializes to one JSON line."""

    step: int
    loss: float
    handles: list[Point2]
    mean_dist_to_target: float
    angles: list[float]
    cache_hit: bool

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "loss": self.loss,
            "handles": [[p.x, p.y] for p in self.handles],
            "mean_dist_to_target": self.mean_dist_to_target,
            "angles": list(self.angles),
            "cache_hit": self.cache_hit,
        }

    def to_json_line(self) -> str:
        return json.dumps(self.to_dict())


@dataclass
class TrackingState:
    handles: list[Point2]
    axis: Point2
    angles: list[float]
    step: int


@dataclass
class RotatedReference:
    """Inverted latent and features of the input rotated by one angle bin."""

    angle_key: int
    rotated_latent: LatentCode
    rotated_sources: list[Point2]
    features: FeatureMap


@dataclass
class DragResult:
    image: np.ndarray
    trajectory: list[StepReport]
    stop_reason: StopReason
    timing: dict[str, float]
    error: str | None = None

    @property
    def final_handles(self) -> list[Point2]:
        return self.trajectory[-1].handles


class LatentCodec(Protocol):
    def encode(self, image: np.ndarray) -> LatentCode: ...

    def decode(self, latent: LatentCode) -> np.ndarray: ...


class IdentityCodec:
    """Image == latent: channels-first float64 tensor at image resolution."""

    def encode(self, image: np.ndarray) -> LatentCode:
        data = torch.tensor(np.moveaxis(image, -1, 0), dtype=torch.float64)
        return LatentCode(data, 0)

    def decode(self, latent: LatentCode) -> np.ndarray:
        img = np.moveaxis(latent.data.detach().numpy(), 0, -1)
        return np.clip(img, 0.0, 1.0)


def _bilinear_grid(data: torch.Tensor, x: float, y: float) -> torch.Tensor:
    """Bilinear sample of a (C, H, W) tensor at grid coords, edge-clamped."""
    h, w = data.shape[1], data.shape[2]
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    top = data[:, y0, x0] * (1.0 - fx) + data[:, y0, x1] * fx
    bot = data[:, y1, x0] * (1.0 - fx) + data[:, y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


class DragSession:
    """State of one drag edit: inverted latent, handles, caches, optimizer.

    Sessions are strictly sequential; run one optimization at a time per
    instance. Multiple sessions can run concurrently when each owns its
    denoiser.
    """

    def __init__(
        self,
        config: DragConfig,
        denoiser: Denoiser,
        backend: FeatureBackend,
        schedule: NoiseSchedule = DEFAULT_SCHEDULE,
        codec: LatentCodec | None = None,
    ) -> None:
        self.config = config
        self.denoiser = denoiser
        self.backend = backend
        self.schedule = schedule
        self.codec = codec if codec is not None else IdentityCodec()

        t0 = time.perf_counter()
        self.n_traj_steps = max(
            1, round(config.n_ddim_steps * config.t_edit / schedule.total_steps)
        )
        x0 = self.codec.encode(config.image)
        self.z_ref = ddim_invert(
            x0, config.t_edit, denoiser, config.prompt, self.n_traj_steps, schedule
        )
        grid = trajectory_indices(config.t_edit, self.n_traj_steps)
        self.t_prev = grid[-2]
        with torch.no_grad():
            self.z_prev_ref = ddim_step(
                self.z_ref, self.t_prev, denoiser, config.prompt, schedule
            ).data

        self.z = self.z_ref.data.clone().requires_grad_(True)
        self.optimizer = torch.optim.Adam([self.z], lr=config.lr)

        lh, lw = self.z.shape[1], self.z.shape[2]
        keep = torch.tensor(
            np.asarray(~config.mask, dtype=float), dtype=torch.float64
        )
        self.keep_mask = (
            torch.nn.functional.interpolate(
                keep[None, None], size=(lh, lw), mode="nearest"
            ).squeeze()
            > 0.5
        ).to(torch.float64)

        try:
            self.axis = select_rotation_axis(config.sources, config.targets, config.mask)
        except EmptyMaskLine:
            self.axis = mask_centroid(config.mask)
        self.center = image_center(config.image.shape)

        self.handles: list[Point2] = list(config.sources)
        self.angles: list[float] = [0.0] * len(config.sources)
        self.frozen: list[bool] = [
            s.dist(t) < config.stop_dist
            for s, t in zip(config.sources, config.targets)
        ]
        self.step = 0
        self.trajectory: list[StepReport] = []
        self.stop_reason: StopReason | None = None
        self.error: str | None = None
        self.timing = {"invert": time.perf_counter() - t0, "optimize": 0.0, "track": 0.0, "denoise": 0.0}

        self.cache: dict[int, RotatedReference] = {}
        self.cache_builds = 0
        self.cache_hits = 0
        self.degenerate_axis_fallbacks = 0
        self._last_cache_hit = False
        # bin 0 is the unrotated input: reuse the latent we already inverted
        self.cache[0] = RotatedReference(
            0,
            self.z_ref,
            list(config.sources),
            backend.extract(self.z_ref, config.t_edit, denoiser, config.prompt),
        )
        self._latent_version = 0
        self._tracked_version = 0

    # -- state inspection ---------------------------------------------------

    def distances(self) -> list[float]:
        return [h.dist(t) for h, t in zip(self.handles, self.config.targets)]

    def converged(self) -> bool:
        return all(d < self.config.stop_dist for d in self.distances())

    def finished(self) -> bool:
        return self.stop_reason is not None

    def current_latent(self) -> LatentCode:
        return LatentCode(self.z, self.config.t_edit)

    def set_latent(self, data: torch.Tensor) -> None:
        """Replace the optimized latent (diagnostic/testing hook)."""
        if data.shape != self.z.shape:
            raise ValueError("latent shape mismatch")
        with torch.no_grad():
            self.z.copy_(data)
        self._latent_version += 1

    def _report(self, loss: float) -> StepReport:
        return StepReport(
            step=self.step,
            loss=loss,
            handles=list(self.handles),
            mean_dist_to_target=float(np.mean(self.distances())),
            angles=list(self.angles),
            cache_hit=self._last_cache_hit,
        )

    # -- motion supervision ---------------------------------------------------

    def motion_loss(self) -> torch.Tensor:
        """Differentiable drag loss on the current latent.

        Patch term: for every active handle, the L1 gap between the feature
        patch at the handle (treated as constant) and the same patch shifted
        one unit step toward the target; the gradient therefore paints the
        handle's features onto the shifted location. Preservation term:
        lambda-weighted L1 change, outside the mask, of a one-step denoised
        latent against the same step of the original inverted latent.
        """
        cfg = self.config
        active = [i for i in range(len(self.handles)) if not self.frozen[i]]
        if not active:
            raise AllHandlesConverged("every drag direction has degenerated")

        fm = self.backend.extract(
            self.current_latent(), cfg.t_edit, self.denoiser, cfg.prompt
        )
        total = torch.zeros((), dtype=torch.float64)
        scale = cfg.latent_scale
        contributed = 0
        for i in active:
            h, t = self.handles[i], cfg.targets[i]
            dist = h.dist(t)
            if dist < 1e-12:
                continue
            contributed += 1
            dx, dy = (t.x - h.x) / dist, (t.y - h.y) / dist
            hx, hy = round(h.x * scale), round(h.y * scale)
            for qy in range(hy - cfg.r1, hy + cfg.r1 + 1):
                for qx in range(hx - cfg.r1, hx + cfg.r1 + 1):
                    here = _bilinear_grid(fm.data, float(qx), float(qy)).detach()
                    shifted = _bilinear_grid(fm.data, qx + dx, qy + dy)
                    total = total + torch.sum(torch.abs(here - shifted))
        if contributed == 0:
            raise AllHandlesConverged("every drag direction has degenerated")

        if cfg.lambda_mask > 0.0:
            z_prev = ddim_step(
                self.current_latent(), self.t_prev, self.denoiser, cfg.prompt, self.schedule
            ).data
            drift = torch.abs(z_prev - self.z_prev_ref) * self.keep_mask
            total = total + cfg.lambda_mask * torch.sum(drift)
        return total

    def optimize_step(self) -> StepReport:
        """One Adam update of the full latent against the motion loss."""
        if self.finished():
            raise RuntimeError("session already finished")
        t0 = time.perf_counter()
        self.optimizer.zero_grad()
        loss = self.motion_loss()
        loss_val = float(loss.detach())
        if not math.isfinite(loss_val):
            self.stop_reason = StopReason.ABORTED
            self.error = "non-finite loss"
            raise NonFiniteLoss(f"loss became {loss_val}")
        loss.backward()
        self.optimizer.step()
        self.step += 1
        self._latent_version += 1
        self.timing["optimize"] += time.perf_counter() - t0
        report = self._report(loss_val)
        self.trajectory.append(report)
        return report

    # -- point tracking -------------------------------------------------------

    def _rotated_reference(self, key: int) -> tuple[RotatedReference, bool]:
        if key in self.cache:
            self.cache_hits += 1
            return self.cache[key], True
        cfg = self.config
        angle = key * cfg.angle_bin
        rot_img = rotate_image(cfg.image, angle)
        x0 = self.codec.encode(rot_img)
        z_rot = ddim_invert(
            x0, cfg.t_edit, self.denoiser, cfg.prompt, self.n_traj_steps, self.schedule
        )
        feats = self.backend.extract(z_rot, cfg.t_edit, self.denoiser, cfg.prompt)
        rot_sources = [rotate_point(s, self.center, angle) for s in cfg.sources]
        ref = RotatedReference(key, z_rot, rot_sources, feats)
        self.cache[key] = ref
        self.cache_builds += 1
        return ref, False

    def track_points(self) -> TrackingState:
        """Relocate active handles by rotated-template nearest-neighbor search."""
        if self._tracked_version >= self._latent_version:
            raise RuntimeError("track_points requires a latent update since last tracking")
        t0 = time.perf_counter()
        cfg = self.config
        with torch.no_grad():
            fm = self.backend.extract(
                LatentCode(self.z.detach(), cfg.t_edit), cfg.t_edit, self.denoiser, cfg.prompt
            )
            all_hit = True
            for i in range(len(self.handles)):
                if self.frozen[i]:
                    continue
                try:
                    theta = compute_rotation_angle(cfg.sources[i], self.handles[i], self.axis)
                except DegenerateAxis:
                    theta = 0.0
                    self.degenerate_axis_fallbacks += 1
                if not cfg.use_rotated_templates:
                    theta = 0.0
                key = round(theta / cfg.angle_bin)
                ref, hit = self._rotated_reference(key)
                all_hit = all_hit and hit
                template = sample_feature(
                    ref.features, clamp_to_bounds(ref.features, ref.rotated_sources[i])
                )
                self.handles[i] = self._search_window(fm, template, self.handles[i])
                self.angles[i] = theta
                if self.handles[i].dist(cfg.targets[i]) < cfg.stop_dist:
                    self.frozen[i] = True
            self._last_cache_hit = all_hit
        self._tracked_version = self._latent_version
        self._refresh_last_report()
        self.timing["track"] += time.perf_counter() - t0
        return TrackingState(list(self.handles), self.axis, list(self.angles), self.step)

    def _refresh_last_report(self) -> None:
        # the report for the current step predates this tracking pass; bring
        # its handle bookkeeping up to date so trajectories show the state
        # the next step will actually start from
        if self.trajectory and self.trajectory[-1].step == self.step:
            last = self.trajectory[-1]
            last.handles = list(self.handles)
            last.angles = list(self.angles)
            last.cache_hit = self._last_cache_hit
            last.mean_dist_to_target = float(np.mean(self.distances()))

    def _search_window(
        self, fm: FeatureMap, template: torch.Tensor, handle: Point2
    ) -> Point2:
        """Argmin of L1 feature distance over the integer grid around handle."""
        cfg = self.config
        s = cfg.latent_scale
        h, w = fm.spatial
        hx, hy = handle.x * s, handle.y * s
        x_lo = max(0, math.ceil(hx - cfg.r2))
        x_hi = min(w - 1, math.floor(hx + cfg.r2))
        y_lo = max(0, math.ceil(hy - cfg.r2))
        y_hi = min(h - 1, math.floor(hy + cfg.r2))
        window = fm.data[:, y_lo : y_hi + 1, x_lo : x_hi + 1]
        costs = torch.sum(torch.abs(window - template[:, None, None]), dim=0).numpy()

        ys, xs = np.meshgrid(
            np.arange(y_lo, y_hi + 1), np.arange(x_lo, x_hi + 1), indexing="ij"
        )
        cost = costs.ravel()
        xs = xs.ravel()
        ys = ys.ravel()
        d2 = (xs - hx) ** 2 + (ys - hy) ** 2
        pick = np.lexsort((xs, ys, d2, cost))[0]
        return Point2(float(xs[pick]) / s, float(ys[pick]) / s)

    # -- orchestration ----------------------------------------------------------

    def run(self, on_step: Callable[[StepReport], None] | None = None) -> DragResult:
        """Alternate optimization and tracking until convergence or step cap.

        Emits every StepReport through on_step (exceptions from the callback
        propagate and abort the run). The final latent is denoised back to a
        clean image unless the session aborted.
        """
        if self.finished():
            raise RuntimeError("session already finished")
        initial = self._report(0.0)
        self.trajectory.append(initial)
        if on_step:
            on_step(initial)

        try:
            while self.step < self.config.max_steps and not self.converged():
                report = self.optimize_step()
                self.track_points()
                if on_step:
                    on_step(report)
        except NonFiniteLoss as exc:
            return self._abort_result(str(exc))

        self.stop_reason = (
            StopReason.CONVERGED if self.converged() else StopReason.MAX_STEPS
        )
        t0 = time.perf_counter()
        with torch.no_grad():
            clean = ddim_denoise(
                LatentCode(self.z.detach(), self.config.t_edit),
                self.denoiser,
                self.config.prompt,
                self.n_traj_steps,
                self.schedule,
            )
        image = self.codec.decode(clean)
        self.timing["denoise"] += time.perf_counter() - t0
        return DragResult(
            image=image,
            trajectory=list(self.trajectory),
            stop_reason=self.stop_reason,
            timing=dict(self.timing),
        )

    def _abort_result(self, message: str) -> DragResult:
        self.stop_reason = StopReason.ABORTED
        self.error = message
        return DragResult(
            image=np.array(self.config.image, copy=True),
            trajectory=list(self.trajectory),
            stop_reason=StopReason.ABORTED,
            timing=dict(self.timing),
            error=message,
        )

    def cache_stats(self) -> dict:
        return {
            "builds": self.cache_builds,
            "hits": self.cache_hits,
            "bins": sorted(self.cache.keys()),
            "degenerate_axis_fallbacks": self.degenerate_axis_fallbacks,
        }


def init_session(
    config: DragConfig,
    denoiser: Denoiser,
    backend: FeatureBackend,
    schedule: NoiseSchedule = DEFAULT_SCHEDULE,
    codec: LatentCodec | None = None,
) -> DragSession:
    """Invert the input, select the rotation axis, and prime a session."""
    return DragSession(config, denoiser, backend, schedule, codec)
