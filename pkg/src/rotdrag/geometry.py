"""Planar geometry for drag editing.

Rotation angles and axis selection, point/image rotation, homographies and
the corner-displacement metric used by the affine benchmark. Everything here
is a pure function of its inputs.

Coordinate convention: pixel coordinates with origin at the top-left corner,
x rightward (columns), y downward (rows). Subpixel positions are allowed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np


class DegenerateAxis(ValueError):
    """Rotation angle is undefined: a point coincides with the axis."""


class EmptyMaskLine(ValueError):
    """The perpendicular line through the source hits no mask pixel."""


class PointAtInfinity(ValueError):
    """Projective mapping sent the point to (near-)zero homogeneous depth."""


@dataclass(frozen=True)
class Point2:
    """2D pixel position; x and y must be finite."""

    x: float
    y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"point must be finite, got ({self.x}, {self.y})")

    def dist(self, other: "Point2") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def as_tuple(self) -> tuple[float, float]:
        return (self.x, self.y)


class AffineCategory(Enum):
    """Single-transform warp families used by the affine benchmark."""

    SCALING = "scaling"
    ROTATION = "rotation"
    PERSPECTIVE = "perspective"
    TRANSLATION = "translation"


def normalize_angle(angle: float) -> float:
    """Wrap an angle in radians into (-pi, pi]."""
    a = math.fmod(angle, 2.0 * math.pi)
    if a > math.pi:
        a -= 2.0 * math.pi
    elif a <= -math.pi:
        a += 2.0 * math.pi
    return a


def compute_rotation_angle(s: Point2, h: Point2, c: Point2) -> float:
    """Signed angle, in (-pi, pi], that carries the offset c->s onto c->h.

    Each offset goes through the two-argument arctangent, so all quadrants
    and vertical offsets are handled; a bare arctan of slope ratios would
    lose the quadrant and divide by zero.

    Raises:
        DegenerateAxis: if s or h coincides with the axis c.
    """
    if h.dist(c) < 1e-12 or s.dist(c) < 1e-12:
        raise DegenerateAxis("source or handle coincides with the rotation axis")
    ang_h = math.atan2(h.y - c.y, h.x - c.x)
    ang_s = math.atan2(s.y - c.y, s.x - c.x)
    return normalize_angle(ang_h - ang_s)


def rotate_point(p: Point2, axis: Point2, angle: float) -> Point2:
    """Rotate p about axis by angle radians (positive turns +x toward +y)."""
    ca, sa = math.cos(angle), math.sin(angle)
    vx, vy = p.x - axis.x, p.y - axis.y
    return Point2(axis.x + ca * vx - sa * vy, axis.y + sa * vx + ca * vy)


def select_rotation_axis(
    sources: list[Point2], targets: list[Point2], mask: np.ndarray
) -> Point2:
    """Choose the pivot about which a drag is interpreted as a rotation.

    An anchored pair (source == target) wins outright: the first one in input
    order is the axis. Otherwise the axis is the mask pixel lying on the line
    through the first source point perpendicular to that point's drag
    direction, at maximal distance from the source. Ties break toward smaller
    y, then smaller x.

    Raises:
        EmptyMaskLine: if no mask pixel lies on the perpendicular line
            (callers typically fall back to the mask centroid).
    """
    if not sources or len(sources) != len(targets):
        raise ValueError("need equal, nonzero numbers of sources and targets")
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2 or not mask.any():
        raise ValueError("mask must be a nonempty 2D array")

    for s, t in zip(sources, targets):
        if s.x == t.x and s.y == t.y:
            return s

    s0, t0 = sources[0], targets[0]
    dx, dy = t0.x - s0.x, t0.y - s0.y
    norm = math.hypot(dx, dy)

    ys, xs = np.nonzero(mask)
    vx = xs.astype(float) - s0.x
    vy = ys.astype(float) - s0.y
    # Distance from each pixel center to the perpendicular line equals the
    # length of its component along the drag direction.
    off = np.abs(vx * dx + vy * dy) / norm
    on_line = off <= 0.5
    if not on_line.any():
        raise EmptyMaskLine("perpendicular line intersects no mask pixel")

    d2 = vx[on_line] ** 2 + vy[on_line] ** 2
    cx, cy = xs[on_line], ys[on_line]
    best = d2 == d2.max()
    order = np.lexsort((cx[best], cy[best]))
    return Point2(float(cx[best][order[0]]), float(cy[best][order[0]]))


def mask_centroid(mask: np.ndarray) -> Point2:
    """Center of mass of the nonzero mask pixels."""
    mask = np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise ValueError("mask is empty")
    return Point2(float(xs.mean()), float(ys.mean()))


def image_center(shape: tuple[int, ...]) -> Point2:
    """Pixel-center of an image with the given (H, W, ...) shape."""
    h, w = shape[0], shape[1]
    return Point2((w - 1) / 2.0, (h - 1) / 2.0)


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinearly sample an (H, W) or (H, W, C) image at float positions.

    Coordinates are clamped to the frame, so out-of-frame reads replicate
    the nearest edge pixel.
    """
    h, w = img.shape[:2]
    xs = np.clip(np.asarray(xs, dtype=float), 0.0, w - 1.0)
    ys = np.clip(np.asarray(ys, dtype=float), 0.0, h - 1.0)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def rotate_image(img: np.ndarray, angle: float) -> np.ndarray:
    """Rotate an image about its center, same output size.

    Resampling is bilinear and out-of-frame samples replicate the nearest
    edge (a constant fill would inject synthetic corners that pollute
    feature tracking near the borders). Content at point p lands at
    rotate_point(p, image_center, angle). angle == 0 is the exact identity.
    """
    img = np.asarray(img)
    if img.size == 0:
        raise ValueError("image is empty")
    if angle == 0.0:
        return img.copy()
    h, w = img.shape[:2]
    c = image_center(img.shape)
    gx, gy = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    ca, sa = math.cos(-angle), math.sin(-angle)
    vx, vy = gx - c.x, gy - c.y
    sxs = c.x + ca * vx - sa * vy
    sys_ = c.y + sa * vx + ca * vy
    return bilinear_sample(img, sxs, sys_)


class Homography:
    """3x3 projective map on pixel coordinates, normalized so m[2, 2] == 1."""

    __slots__ = ("m",)

    def __init__(self, m: np.ndarray) -> None:
        m = np.array(m, dtype=float)
        if m.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {m.shape}")
        if abs(m[2, 2]) < 1e-12:
            raise ValueError("cannot normalize: m[2, 2] is (near) zero")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) < 1e-12:
            raise ValueError("homography is singular")
        self.m = m

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])

    @classmethod
    def rotation(cls, angle: float, center: Point2 | None = None) -> "Homography":
        ca, sa = math.cos(angle), math.sin(angle)
        r = cls([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
        return r if center is None else _about(r, center)

    @classmethod
    def scaling(cls, s: float, center: Point2 | None = None) -> "Homography":
        m = cls([[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, 1.0]])
        return m if center is None else _about(m, center)

    @classmethod
    def perspective(
        cls, px: float, py: float, center: Point2 | None = None
    ) -> "Homography":
        m = cls([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [px, py, 1.0]])
        return m if center is None else _about(m, center)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.m @ other.m)

    def apply(self, p: Point2) -> Point2:
        return apply_homography(self, p)

    def map_points(self, pts: np.ndarray) -> np.ndarray:
        """Map an (N, 2) array of points; raises PointAtInfinity on zero depth."""
        pts = np.asarray(pts, dtype=float)
        q = pts @ self.m[:2, :2].T + self.m[:2, 2]
        w = pts @ self.m[2, :2] + 1.0
        if np.any(np.abs(w) < 1e-12):
            raise PointAtInfinity("a point mapped to zero homogeneous depth")
        return q / w[:, None]

    def __repr__(self) -> str:
        return f"Homography({self.m.tolist()})"


def _about(h: Homography, center: Point2) -> Homography:
    t = Homography.translation(center.x, center.y)
    return t @ h @ t.inverse()


def apply_homography(h: Homography, p: Point2) -> Point2:
    """Projective mapping of a single point, with division by the depth."""
    v = h.m @ np.array([p.x, p.y, 1.0])
    if abs(v[2]) < 1e-12:
        raise PointAtInfinity(f"({p.x}, {p.y}) maps to zero homogeneous depth")
    return Point2(v[0] / v[2], v[1] / v[2])


def warp_image(img: np.ndarray, h: Homography) -> np.ndarray:
    """Warp an image by a homography (inverse mapping, bilinear, edge fill)."""
    img = np.asarray(img)
    hh, ww = img.shape[:2]
    gx, gy = np.meshgrid(np.arange(ww, dtype=float), np.arange(hh, dtype=float))
    inv = h.inverse().m
    w = inv[2, 0] * gx + inv[2, 1] * gy + inv[2, 2]
    if np.any(np.abs(w) < 1e-12):
        raise PointAtInfinity("warp grid crosses the plane at infinity")
    sxs = (inv[0, 0] * gx + inv[0, 1] * gy + inv[0, 2]) / w
    sys_ = (inv[1, 0] * gx + inv[1, 1] * gy + inv[1, 2]) / w
    return bilinear_sample(img, sxs, sys_)


CORRECTNESS_THRESHOLD_PX = 3.0


def corner_error(
    h_est: Homography, h_gt: Homography, width: int, height: int
) -> float:
    """Mean displacement of the four image corners under the two maps.

    A case counts as correctly estimated when this value is at most
    CORRECTNESS_THRESHOLD_PX pixels.
    """
    corners = [
        Point2(0.0, 0.0),
        Point2(width - 1.0, 0.0),
        Point2(0.0, height - 1.0),
        Point2(width - 1.0, height - 1.0),
    ]
    return float(
        np.mean([apply_homography(h_est, c).dist(apply_homography(h_gt, c)) for c in corners])
    )
