#!/usr/bin/env python3
"""Generate a synthetic arc-drag case directory for the CLI and benchmarks.

Usage:
    python scripts/make_demo_case.py out_dir [--size 64] [--radius 10] [--angle-deg 30]

The directory then works with both entry points:
    rotdrag edit --config out_dir/arc.json --out results/
    rotdrag bench-drag --cases out_dir --out results/
"""

import argparse
import math
from pathlib import Path

from rotdrag.cases import DragCase, save_drag_case, save_image, save_mask
from rotdrag.synth import arc_drag_fixture


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--radius", type=float, default=10.0)
    parser.add_argument("--angle-deg", type=float, default=30.0)
    args = parser.parse_args()

    args.out_dir.mkdir(parents=True, exist_ok=True)
    image, sources, targets, mask = arc_drag_fixture(
        size=args.size, radius=args.radius, angle=math.radians(args.angle_deg)
    )
    save_image(args.out_dir / "arc.png", image)
    save_mask(args.out_dir / "arc_mask.png", mask)
    case = DragCase(
        image_path=args.out_dir / "arc.png",
        mask_path=args.out_dir / "arc_mask.png",
        prompt="",
        points=list(zip(sources, targets)),
        name="arc",
    )
    save_drag_case(args.out_dir / "arc.json", case)
    print(f"wrote {args.out_dir}/arc.json ({len(sources)} point pairs)")


if __name__ == "__main__":
    main()
