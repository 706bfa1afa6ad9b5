"""Command-line entry points over the engine, benchmarks, and HTTP service.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Engine flags override case-file settings, which override built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

WEIGHTS_ENV = "ROTDRAG_WEIGHTS_ROOT"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def _engine_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--backend",
        choices=["reference", "unet-adapter"],
        default="reference",
        help="feature backend (unet-adapter needs model weights)",
    )
    parser.add_argument("--max-steps", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--r1", type=int, default=None)
    parser.add_argument("--r2", type=int, default=None)
    parser.add_argument("--lambda", dest="lambda_mask", type=float, default=None)
    parser.add_argument("--stop-dist", type=float, default=None)
    parser.add_argument(
        "--angle-bin", type=float, default=None, help="rotated-reference bin width, degrees"
    )
    parser.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rotdrag",
        description="Rotation-aware point-based image editing and benchmarks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    edit = sub.add_parser("edit", help="run one drag edit from a case file")
    edit.add_argument("--config", required=True, help="drag-case JSON document")
    edit.add_argument("--out", required=True, help="output directory")
    _engine_flags(edit)

    affine = sub.add_parser("bench-affine", help="single-transform homography benchmark")
    affine.add_argument("--images", required=True, help="directory of PNG/JPEG images")
    affine.add_argument(
        "--categories", default="scaling,rotation,perspective,translation"
    )
    affine.add_argument("--count", type=int, default=10, help="cases per category")
    affine.add_argument("--keypoint-grid", type=int, default=8)
    affine.add_argument("--seed", type=int, default=0)
    affine.add_argument("--out", required=True)
    affine.add_argument(
        "--backend", choices=["reference", "unet-adapter"], default="reference"
    )
    affine.add_argument(
        "--identity",
        action="store_true",
        help="degenerate parameter ranges (identity warps); harness sanity mode",
    )

    drag = sub.add_parser("bench-drag", help="run the engine over a case directory")
    drag.add_argument("--cases", required=True, help="directory of drag-case JSON files")
    drag.add_argument("--out", required=True)
    drag.add_argument("--workers", type=int, default=1)
    _engine_flags(drag)

    serve = sub.add_parser("serve", help="start the interactive editing service")
    serve.add_argument("--data-dir", required=True)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    _engine_flags(serve)

    return parser


def resolve_backend(name: str):
    """Map a backend flag to (denoiser_factory, backend_factory).

    The UNet adapter fails fast here: it needs pretrained weights (pointed to
    by the weights-root environment variable) and a model-backed denoiser,
    neither of which this package bundles.
    """
    from rotdrag.diffusion import ZeroDenoiser
    from rotdrag.features import ReferenceFeatureBackend, UNetFeatureAdapter

    if name == "reference":
        return ZeroDenoiser, ReferenceFeatureBackend
    root = os.environ.get(WEIGHTS_ENV)
    if not root:
        raise UsageError(
            f"backend 'unet-adapter' needs model weights: set {WEIGHTS_ENV} "
            "to the weights root"
        )
    if not Path(root).is_dir():
        raise UsageError(f"{WEIGHTS_ENV}={root} is not a directory")
    raise UsageError(
        "backend 'unet-adapter' requires a model-backed denoiser; none is "
        "bundled. Construct UNetFeatureAdapter with your model through the "
        "library API instead."
    )


class UsageError(ValueError):
    pass


def engine_overrides(args: argparse.Namespace) -> dict:
    out = {}
    for key in ("max_steps", "lr", "r1", "r2", "lambda_mask", "stop_dist"):
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    if getattr(args, "angle_bin", None) is not None:
        out["angle_bin"] = math.radians(args.angle_bin)
    return out


def cmd_edit(args: argparse.Namespace) -> int:
    from rotdrag import cases as caseio
    from rotdrag.engine import DragSession, StopReason

    config_path = Path(args.config)
    if not config_path.is_file():
        print(f"error: config file not found: {config_path}", file=sys.stderr)
        return 2
    try:
        case = caseio.load_drag_case(config_path)
        config = caseio.drag_config_from_case(case, engine_overrides(args))
        denoiser_factory, backend_factory = resolve_backend(args.backend)
    except (caseio.CaseFormatError, UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    backend = backend_factory()
    session = DragSession(config, denoiser_factory(), backend)

    with open(out_dir / "trajectory.jsonl", "w") as trajectory_file:
        result = session.run(
            on_step=lambda r: trajectory_file.write(r.to_json_line() + "\n")
        )

    caseio.save_image(out_dir / "edited.png", result.image)
    describe = getattr(backend, "describe", lambda: {"kind": args.backend})
    metadata = {
        "case": case.name,
        "stop_reason": result.stop_reason.value,
        "error": result.error,
        "steps": result.trajectory[-1].step,
        "final_distances": session.distances(),
        "angles": session.angles,
        "hyperparameters": config.hyperparams(),
        "cache": session.cache_stats(),
        "timing": result.timing,
        "backend": describe(),
        "seed": args.seed,
    }
    (out_dir / "metadata.json").write_text(json.dumps(metadata, indent=2) + "\n")
    print(f"{case.name}: {result.stop_reason.value} after {metadata['steps']} steps")
    return 0 if result.stop_reason is not StopReason.ABORTED else 1


def cmd_bench_affine(args: argparse.Namespace) -> int:
    from rotdrag import cases as caseio
    from rotdrag.bench import (
        ParamRanges,
        curate_affine_cases,
        evaluate_method,
        format_report_table,
    )
    from rotdrag.geometry import AffineCategory

    if args.count < 1:
        print("error: EmptyBenchmark: --count must be at least 1", file=sys.stderr)
        return 2
    images_dir = Path(args.images)
    paths = sorted(
        p for p in images_dir.glob("*") if p.suffix.lower() in IMAGE_SUFFIXES
    )
    if not paths:
        print(f"error: EmptyBenchmark: no images in {images_dir}", file=sys.stderr)
        return 2
    try:
        categories = [AffineCategory(c.strip()) for c in args.categories.split(",") if c.strip()]
        _, backend_factory = resolve_backend(args.backend)
    except (ValueError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    images = [caseio.load_image(p) for p in paths]
    backend = backend_factory()
    ranges = (
        ParamRanges(
            rotation=(0.0, 0.0),
            scale=(1.0, 1.0),
            translation=(0.0, 0.0),
            perspective=(0.0, 0.0),
        )
        if args.identity
        else None
    )
    from rotdrag.bench import BenchReport

    report = BenchReport(method=args.backend)
    for category in categories:
        cases = curate_affine_cases(
            images, category, args.count, seed=args.seed, param_ranges=ranges
        )
        partial = evaluate_method(
            cases, backend, keypoint_grid=args.keypoint_grid, seed=args.seed, method=args.backend
        )
        for key in partial.counts:
            report.counts[key] = report.counts.get(key, 0) + partial.counts[key]
            report.correct[key] = report.correct.get(key, 0) + partial.correct[key]

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = format_report_table([report])
    machine = {
        "seed": args.seed,
        "count_per_category": args.count,
        "keypoint_grid": args.keypoint_grid,
        "images": [p.name for p in paths],
        "report": report.to_dict(),
    }
    (out_dir / "report.json").write_text(
        json.dumps(machine, sort_keys=True, indent=2) + "\n"
    )
    (out_dir / "report.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_bench_drag(args: argparse.Namespace) -> int:
    from rotdrag.bench import run_drag_benchmark

    cases_dir = Path(args.cases)
    case_paths = sorted(cases_dir.glob("*.json"))
    if not case_paths:
        print(f"error: no case files in {cases_dir}", file=sys.stderr)
        return 2
    try:
        denoiser_factory, backend_factory = resolve_backend(args.backend)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    summary = run_drag_benchmark(
        case_paths,
        Path(args.out),
        engine_overrides=engine_overrides(args),
        denoiser_factory=denoiser_factory,
        backend_factory=backend_factory,
        workers=args.workers,
    )
    print(
        f"cases: {summary['n_cases']}  completed: {summary['n_completed']}  "
        f"failed: {summary['n_failed']}  convergence: {summary['convergence_rate']:.2f}"
    )
    if summary["mean_final_distance"] is not None:
        print(f"mean final distance: {summary['mean_final_distance']:.3f} px")
    return 0 if summary["n_completed"] > 0 else 1


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from rotdrag.service import create_app

    try:
        denoiser_factory, backend_factory = resolve_backend(args.backend)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    app = create_app(
        Path(args.data_dir),
        engine_defaults=engine_overrides(args),
        denoiser_factory=denoiser_factory,
        backend_factory=backend_factory,
    )
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handler = {
        "edit": cmd_edit,
        "bench-affine": cmd_bench_affine,
        "bench-drag": cmd_bench_drag,
        "serve": cmd_serve,
    }[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
