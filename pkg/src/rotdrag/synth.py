"""Synthetic images and drag fixtures for tests, demos, and benchmarks.

These generators are deterministic given their arguments, so fixtures built
from them can be frozen into expected values.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from rotdrag.geometry import Point2, image_center, rotate_point


def blob_image(
    size: int,
    blobs: list[tuple[float, float, float, float]],
    background: float = 0.0,
) -> np.ndarray:
    """Grayscale (H, W) image of Gaussian blobs given as (x, y, sigma, amp)."""
    gx, gy = np.meshgrid(np.arange(size, dtype=float), np.arange(size, dtype=float))
    img = np.full((size, size), background, dtype=float)
    for x, y, sigma, amp in blobs:
        img += amp * np.exp(-((gx - x) ** 2 + (gy - y) ** 2) / (2.0 * sigma**2))
    return img


def _box_smooth(img: np.ndarray, k: int) -> np.ndarray:
    kernel = np.ones(2 * k + 1) / (2 * k + 1)
    for axis in (0, 1):
        img = np.apply_along_axis(
            lambda r: np.convolve(np.pad(r, k, mode="edge"), kernel, mode="valid"),
            axis,
            img,
        )
    return img


def textured_image(size: int, seed: int, octaves: tuple[int, ...] = (2, 4, 8)) -> np.ndarray:
    """Multi-octave band-limited random texture in [0, 1].

    The mix of scales keeps feature vectors locally unique (dense matchers
    need that to avoid gross correspondence outliers) while staying smooth
    enough at the pixel level that bilinear resampling barely changes the
    content.
    """
    rng = np.random.default_rng(seed)
    img = np.zeros((size, size))
    for k in octaves:
        img = img + math.sqrt(k) * _box_smooth(rng.random((size, size)), k)
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo + 1e-12)


def textured_rgb(size: int, seed: int) -> np.ndarray:
    """Three independent texture octave stacks as an (H, W, 3) image.

    Dense matching needs the extra channels: grayscale yields only five
    reference-feature channels, too few to keep exhaustive nearest-neighbor
    search collision-free at desk-scale image sizes.
    """
    return np.stack([textured_image(size, seed * 3 + c) for c in range(3)], axis=-1)


def disk_mask(size: int, cx: float, cy: float, radius: float) -> np.ndarray:
    gx, gy = np.meshgrid(np.arange(size, dtype=float), np.arange(size, dtype=float))
    return (gx - cx) ** 2 + (gy - cy) ** 2 <= radius**2


def oriented_patch_scene(
    size: int = 64,
    handle: Point2 | None = None,
    blob_dist: float = 4.0,
    blob_dir: float = 0.0,
    blob_sigma: float = 2.0,
    amp: float = 1.0,
    pin_amp: float = 0.0,
    pin_dist: float = 5.0,
    pin_sigma: float = 1.5,
) -> tuple[np.ndarray, Point2, Point2]:
    """A handle point with an off-center blob defining its orientation.

    Returns (image, handle, blob_center). The feature vector at the handle is
    orientation-dominated: its gradient points at the blob, so a template
    taken at the wrong rotation matches best at the wrong spot on the
    iso-distance circle around the blob. A nonzero pin_amp adds a weaker
    second blob 120 degrees away that breaks the circular ambiguity and pins
    correctly-rotated templates to a unique position.
    """
    if handle is None:
        handle = Point2((size - 1) / 2.0, (size - 1) / 2.0)
    bx = handle.x + blob_dist * math.cos(blob_dir)
    by = handle.y + blob_dist * math.sin(blob_dir)
    blobs = [(bx, by, blob_sigma, amp)]
    if pin_amp > 0.0:
        pa = blob_dir + 2.0 * math.pi / 3.0
        blobs.append(
            (
                handle.x + pin_dist * math.cos(pa),
                handle.y + pin_dist * math.sin(pa),
                pin_sigma,
                pin_amp,
            )
        )
    img = blob_image(size, blobs)
    return img, handle, Point2(bx, by)


@lru_cache(maxsize=None)
def _lattice_offsets(theta_centideg: int, r2: int, tol_milli: int) -> tuple:
    """Blob placements whose stale-template match point is lattice-aligned.

    For a pattern blob at distance rho/direction bdir from the handle, a
    template taken at rotation 0 matches the theta-rotated content best at
    the handle plus offset (R(theta) - I) rho e(bdir). Returns (rho, bdir)
    pairs for which that offset rounds to an integer vector inside the
    search box with at most tol coordinate error.
    """
    theta = math.radians(theta_centideg / 100.0)
    tol = tol_milli / 1000.0
    ca, sa = math.cos(theta), math.sin(theta)
    out = []
    for rho10 in range(30, 46):
        rho = rho10 / 10.0
        for k in range(2880):
            bdir = k * math.pi / 1440.0
            ox, oy = rho * math.cos(bdir), rho * math.sin(bdir)
            dx = (ca * ox - sa * oy) - ox
            dy = (sa * ox + ca * oy) - oy
            rx, ry = round(dx), round(dy)
            if (
                abs(dx - rx) <= tol
                and abs(dy - ry) <= tol
                and abs(rx) <= r2
                and abs(ry) <= r2
                and math.hypot(rx, ry) >= 2.2
            ):
                out.append((rho, bdir))
    return tuple(out)


def _annulus_grid_points(
    center: Point2, theta: float, tol: float, r_min: float, r_max: float
) -> list[Point2]:
    """Integer pixels on an annulus whose pre-rotation position is also
    within tol of the integer grid."""
    gs = []
    for gy in range(int(center.y - r_max), int(center.y + r_max) + 1):
        for gx in range(int(center.x - r_max), int(center.x + r_max) + 1):
            r = math.hypot(gx - center.x, gy - center.y)
            if not (r_min <= r <= r_max):
                continue
            p = rotate_point(Point2(float(gx), float(gy)), center, -theta)
            if abs(p.x - round(p.x)) <= tol and abs(p.y - round(p.y)) <= tol:
                gs.append(Point2(float(gx), float(gy)))
    return gs


def tracking_oracle_scene(
    theta: float,
    seed: int,
    size: int = 64,
    r2: int = 3,
    blob_sigma: float = 2.6,
):
    """One trial of the rotated- vs fixed-template tracking comparison.

    Builds an oriented-patch image whose handle, after an exact in-plane
    rotation by theta about the image center, lands on an integer pixel
    (its pre-image is also near-integer, and so is the stale template's
    preferred match point). The lattice alignment removes bilinear
    interpolation confounds so the trial isolates the tracking mechanism:
    a correctly rotated template matches at the ground truth, while a
    rotation-0 template is pulled to the blob's iso-distance circle point
    that restores the original orientation, 2+ pixels away.

    Returns (image, sources, targets, mask, ground_truth) where sources[0]
    anchors the rotation axis at the image center.
    """
    rng = np.random.default_rng(seed)
    center = image_center((size, size))
    g_int = bdir = rho = None
    for tol in (0.05, 0.08, 0.12):
        gs = _annulus_grid_points(center, theta, tol, 6.0, 11.5)
        if not gs:
            continue
        offs = _lattice_offsets(int(round(math.degrees(theta) * 100)), r2, int(tol * 1000))
        if offs:
            g_int = gs[int(rng.integers(0, len(gs)))]
            rho, bdir = offs[int(rng.integers(0, len(offs)))]
            break
        if abs(math.degrees(theta)) < 40.0:
            # small angles: the stale-template displacement is below the
            # search resolution anyway, any blob direction will do
            g_int = gs[int(rng.integers(0, len(gs)))]
            rho, bdir = 4.0, float(rng.uniform(0, 2 * math.pi))
            break
    if g_int is None:
        raise RuntimeError(f"no lattice-aligned scene for theta={theta}")

    p0 = rotate_point(g_int, center, -theta)
    img, _, _ = oriented_patch_scene(
        size, handle=p0, blob_dist=rho, blob_dir=bdir, blob_sigma=blob_sigma
    )
    anchor = Point2(center.x, center.y)
    sources = [anchor, p0]
    targets = [anchor, rotate_point(p0, center, theta + math.radians(25.0))]
    mask = np.ones((size, size), dtype=bool)
    return img, sources, targets, mask, g_int


def arc_drag_fixture(
    size: int = 64,
    radius: float = 10.0,
    angle: float = math.radians(30.0),
    blob_sigma: float = 1.8,
):
    """Synthetic rotation-drag task: blobs on a ring dragged along an arc.

    Pair 0 anchors the rotation axis at the ring center (source == target);
    the remaining pairs sit on blobs at the given radius and are dragged to
    their analytically rotated positions. Returns (image, sources, targets,
    mask).
    """
    c = Point2(round((size - 1) / 2.0), round((size - 1) / 2.0))
    s1 = Point2(c.x + radius, c.y)
    s2 = Point2(c.x, c.y + radius)
    blobs = [
        (c.x, c.y, blob_sigma, 1.0),
        (s1.x, s1.y, blob_sigma, 0.8),
        (s2.x, s2.y, blob_sigma, 0.6),
    ]
    img = blob_image(size, blobs, background=0.05)
    sources = [c, s1, s2]
    targets = [c, rotate_point(s1, c, angle), rotate_point(s2, c, angle)]
    mask = disk_mask(size, c.x, c.y, radius + 8.0)
    return img, sources, targets, mask
