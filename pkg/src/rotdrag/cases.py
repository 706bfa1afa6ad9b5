"""Drag-case files: the on-disk task format for the benchmark, CLI, and service.

A case is one JSON document per image:

    {
      "image": "cat.png",               // path relative to the case file
      "mask": "cat_mask.png",           // single-channel, nonzero = editable
      "prompt": "a photo of a cat",
      "points": [
        {"source": [138.5, 100.0], "target": [150.0, 92.25]}
      ],
      "engine": {"lr": 0.02},           // optional hyperparameter overrides
      "expected": {...}                 // optional free-form metadata
    }

Coordinates are pixel floats, origin top-left, x rightward, y downward.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from rotdrag.engine import DragConfig
from rotdrag.geometry import Point2


class CaseFormatError(ValueError):
    """A drag-case document is malformed; the message names path and field."""


ENGINE_OVERRIDE_KEYS = (
    "r1",
    "r2",
    "lambda_mask",
    "lr",
    "max_steps",
    "stop_dist",
    "t_edit",
    "n_ddim_steps",
    "angle_bin",
    "latent_scale",
    "use_rotated_templates",
    "prompt",
)


@dataclass
class DragCase:
    image_path: Path
    mask_path: Path
    prompt: str
    points: list[tuple[Point2, Point2]]
    engine: dict = field(default_factory=dict)
    expected: dict | None = None
    name: str = ""


def load_image(path: Path) -> np.ndarray:
    """PNG/JPEG to float (H, W, C) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=float) / 255.0
    return arr


def load_mask(path: Path, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Single-channel image to bool (H, W); nonzero pixels are editable."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    mask = arr > 0
    if shape is not None and mask.shape != shape:
        raise CaseFormatError(f"{path}: mask shape {mask.shape} != image shape {shape}")
    return mask


def save_image(path: Path, img: np.ndarray) -> None:
    arr = np.clip(np.asarray(img, dtype=float), 0.0, 1.0)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray((arr * 255.0).round().astype(np.uint8)).save(path)


def save_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def _parse_point(value, path: Path, where: str) -> Point2:
    if (
        not isinstance(value, (list, tuple))
        or len(value) != 2
        or not all(isinstance(v, (int, float)) and math.isfinite(v) for v in value)
    ):
        raise CaseFormatError(f"{path}: {where} must be a finite [x, y] pair, got {value!r}")
    return Point2(float(value[0]), float(value[1]))


def parse_points(payload, path: Path = Path("<memory>")) -> list[tuple[Point2, Point2]]:
    """Validate the points list shared by case files and the HTTP API."""
    if not isinstance(payload, list) or not payload:
        raise CaseFormatError(f"{path}: field 'points' must be a nonempty list")
    pairs = []
    for i, entry in enumerate(payload):
        if not isinstance(entry, dict) or "source" not in entry or "target" not in entry:
            raise CaseFormatError(
                f"{path}: points[{i}] needs 'source' and 'target' fields"
            )
        pairs.append(
            (
                _parse_point(entry["source"], path, f"points[{i}].source"),
                _parse_point(entry["target"], path, f"points[{i}].target"),
            )
        )
    return pairs


def points_to_payload(points: list[tuple[Point2, Point2]]) -> list[dict]:
    return [
        {"source": [s.x, s.y], "target": [t.x, t.y]} for s, t in points
    ]


def load_drag_case(path: Path) -> DragCase:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CaseFormatError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise CaseFormatError(f"{path}: top level must be an object")
    for fieldname in ("image", "mask", "points"):
        if fieldname not in doc:
            raise CaseFormatError(f"{path}: missing required field '{fieldname}'")

    image_path = (path.parent / doc["image"]).resolve()
    mask_path = (path.parent / doc["mask"]).resolve()
    if not image_path.is_file():
        raise CaseFormatError(f"{path}: field 'image': no such file {image_path}")
    if not mask_path.is_file():
        raise CaseFormatError(f"{path}: field 'mask': no such file {mask_path}")

    points = parse_points(doc["points"], path)
    engine = doc.get("engine", {})
    if not isinstance(engine, dict):
        raise CaseFormatError(f"{path}: field 'engine' must be an object")
    unknown = set(engine) - set(ENGINE_OVERRIDE_KEYS)
    if unknown:
        raise CaseFormatError(f"{path}: unknown engine fields {sorted(unknown)}")

    return DragCase(
        image_path=image_path,
        mask_path=mask_path,
        prompt=str(doc.get("prompt", "")),
        points=points,
        engine=engine,
        expected=doc.get("expected"),
        name=path.stem,
    )


def save_drag_case(path: Path, case: DragCase) -> None:
    doc = {
        "image": str(Path(case.image_path).name),
        "mask": str(Path(case.mask_path).name),
        "prompt": case.prompt,
        "points": points_to_payload(case.points),
    }
    if case.engine:
        doc["engine"] = case.engine
    if case.expected is not None:
        doc["expected"] = case.expected
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def drag_config_from_case(case: DragCase, overrides: dict | None = None) -> DragConfig:
    """Materialize a DragConfig; explicit overrides win over the case file."""
    image = load_image(case.image_path)
    mask = load_mask(case.mask_path, image.shape[:2])
    sources = [s for s, _ in case.points]
    targets = [t for _, t in case.points]
    kwargs = {"prompt": case.prompt}
    kwargs.update(case.engine)
    if overrides:
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
    h, w = image.shape[:2]
    for p in [*sources, *targets]:
        if not (0 <= p.x <= w - 1 and 0 <= p.y <= h - 1):
            raise CaseFormatError(
                f"{case.name}: point ({p.x}, {p.y}) outside {w}x{h} image"
            )
    return DragConfig(image=image, sources=sources, targets=targets, mask=mask, **kwargs)
