"""Command-line entry point: ``h3r {generate-data,train,render,evaluate,inspect}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, load_model, read_tensors
from .config import ConfigError, RunConfig, dump_config, load_config
from .scene import SceneFormatError, camera_from_json, generate_scene, load_scene, save_scene, write_ppm
from .tensor import ContractError, NumericError, ShapeError

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_CONFIG", "EXIT_DATA", "EXIT_NUMERIC"]

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("h3r")


class DataError(RuntimeError):
    pass


def _print_config(title: str, values: dict) -> None:
    print(f"# resolved {title}")
    for key, value in values.items():
        print(f"{key} = {value}")
    sys.stdout.flush()


def _scene_dirs(path) -> list[Path]:
    root = Path(path)
    if (root / "cameras.json").exists():
        return [root]
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    dirs = sorted(p for p in root.iterdir() if (p / "cameras.json").exists())
    if not dirs:
        raise DataError(f"{root}: no scenes (directories with cameras.json) found")
    return dirs


def _load_scenes(path) -> list:
    return [load_scene(d) for d in _scene_dirs(path)]


def _run_config(args) -> RunConfig:
    overrides = {"model": {}, "train": {}}
    for field in ("cost_strategy",):
        if getattr(args, field, None) is not None:
            overrides["model"][field] = getattr(args, field)
    for field in ("steps", "seed", "min_context", "max_context"):
        if getattr(args, field, None) is not None:
            overrides["train"][field] = getattr(args, field)
    return load_config(args.config, overrides)


# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    from .scene import SyntheticSceneSpec

    if args.views < 3:
        raise ConfigError("--views must be at least 3 (two context views plus a target)")
    n_ctx = args.context if args.context is not None else 2
    if not 2 <= n_ctx < args.views:
        raise ConfigError("--context must satisfy 2 <= context < views")
    out = Path(args.out)
    specs = [
        SyntheticSceneSpec(seed=args.seed + k, resolution=args.resolution, n_context=n_ctx, n_target=args.views - n_ctx)
        for k in range(args.scenes)
    ]
    _print_config("generate-data", {"out": out, "count": args.scenes, **dataclasses.asdict(specs[0])})
    for spec in specs:
        scene = generate_scene(spec)
        save_scene(scene, out / scene.name)
        print(f"wrote {out / scene.name} (near {scene.near}, far {scene.far})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import Trainer

    cfg = _run_config(args)
    print(dump_config(cfg), end="")
    torch.set_default_dtype(torch.float64 if args.float64 else torch.float32)
    scenes = _load_scenes(args.scenes)
    trainer = Trainer(cfg, scenes, args.out)
    trainer.run()
    print(f"finished {trainer.step} steps; checkpoints in {args.out}")
    return EXIT_OK


def cmd_render(args) -> int:
    from .gaussians import read_splats, write_splats
    from .rasterizer import render

    if args.splats is not None:
        if args.camera is None:
            raise ConfigError("--splats needs --camera")
        _print_config("render", {"splats": args.splats, "camera": args.camera, "out": args.out})
        try:
            entry = json.loads(Path(args.camera).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"{args.camera}: {exc}") from None
        camera = camera_from_json(entry, str(args.camera))
        gaussians = read_splats(args.splats, dtype=torch.float64)
    else:
        if args.ckpt is None or args.scene is None or args.view is None:
            raise ConfigError("render needs either --splats/--camera or --ckpt/--scene/--view")
        model, cfg = load_model(args.ckpt, use_ema=not args.raw_weights)
        print(dump_config(cfg), end="")
        _print_config("render", {"ckpt": args.ckpt, "scene": args.scene, "view": args.view, "out": args.out})
        scene = load_scene(args.scene)
        if not 0 <= args.view < len(scene.views):
            raise DataError(f"--view {args.view} out of range (scene has {len(scene.views)} views)")
        camera = scene.views[args.view].camera
        ctx = scene.context
        dtype = next(model.parameters()).dtype
        with torch.no_grad():
            pred = model(torch.as_tensor(np.stack([v.image for v in ctx]), dtype=dtype), [v.camera for v in ctx],
                         scene.near, scene.far)
        gaussians = pred.gaussians
        if args.export_splats:
            write_splats(gaussians, args.export_splats)
    with torch.no_grad():
        image = render(gaussians, camera).color.clamp(0, 1).numpy()
    write_ppm(args.out, image)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import evaluate

    model, cfg = load_model(args.ckpt, use_ema=not args.raw_weights)
    print(dump_config(cfg), end="")
    _print_config("evaluate", {"ckpt": args.ckpt, "scenes": args.scenes, "bucket": args.bucket, "context": args.context})
    scenes = _load_scenes(args.scenes)
    torch.set_default_dtype(next(model.parameters()).dtype)
    report = evaluate(model, scenes, args.bucket, n_context=args.context)
    for s in report.scores:
        print(f"{s.scene}: psnr {s.psnr:.3f} ssim {s.ssim:.4f}" + (f" [{s.bucket}]" if s.bucket else ""))
    for key, agg in report.buckets().items():
        if key is not None:
            print(f"bucket {key}: psnr {agg['psnr']:.3f} ssim {agg['ssim']:.4f} (n={agg['count']})")
    agg = report.aggregate
    print(f"mean: psnr {agg['psnr']:.3f} ssim {agg['ssim']:.4f} (n={agg['count']})")
    if args.out:
        report.write_csv(args.out)
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .network import H3R

    tensors = read_tensors(args.ckpt)
    side = Path(str(args.ckpt) + ".cfg")
    cfg = load_config(args.config if args.config else (side if side.exists() else None))
    print(dump_config(cfg), end="")
    for name, arr in tensors.items():
        print(f"{name}\t{arr.dtype}\t{tuple(arr.shape)}")
    expected = {n: tuple(p.shape) for n, p in H3R(cfg.model).state_dict().items()}
    stored = {n: tuple(a.shape) for n, a in tensors.items() if not n.startswith("ema/")}
    missing = sorted(set(expected) - set(stored))
    unexpected = sorted(set(stored) - set(expected))
    mismatched = sorted(n for n in set(expected) & set(stored) if expected[n] != stored[n])
    n_params = sum(int(np.prod(s)) for s in stored.values())
    print(f"{len(stored)} tensors, {n_params} parameters; ema: {any(n.startswith('ema/') for n in tensors)}")
    if missing or unexpected or mismatched:
        print(f"config mismatch: missing {missing}, unexpected {unexpected}, shape {mismatched}")
        return EXIT_DATA
    print("tensor names and shapes match the model config")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="h3r", description="Feed-forward Gaussian splatting reconstruction")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write synthetic scenes")
    g.add_argument("--out", required=True, help="output directory (one sub-directory per scene)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scenes", type=int, default=1)
    g.add_argument("--views", type=int, default=5, help="views per scene (context + target)")
    g.add_argument("--context", type=int, default=None, help="context views per scene (default 2)")
    g.add_argument("--resolution", type=int, default=64)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", default=None, help="INI config with [model]/[train] sections")
    t.add_argument("--scenes", required=True, help="scene directory or directory of scenes")
    t.add_argument("--out", required=True, help="run directory for checkpoints and metrics.csv")
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--min-context", dest="min_context", type=int, default=None)
    t.add_argument("--max-context", dest="max_context", type=int, default=None)
    t.add_argument("--cost-strategy", dest="cost_strategy", choices=["correlation", "difference", "cost-free"], default=None)
    t.add_argument("--float64", action="store_true", help="train in double precision")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render a view from a checkpoint or a splat file")
    r.add_argument("--out", required=True, help="output P6 pixmap")
    r.add_argument("--ckpt")
    r.add_argument("--scene")
    r.add_argument("--view", type=int)
    r.add_argument("--splats", help="splat file (alternative to --ckpt)")
    r.add_argument("--camera", help="camera JSON (intrinsics, extrinsics, width, height) for --splats")
    r.add_argument("--export-splats", dest="export_splats", help="also write the predicted splats here")
    r.add_argument("--raw-weights", dest="raw_weights", action="store_true", help="ignore EMA weights")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("evaluate", help="PSNR/SSIM on target views")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--scenes", required=True)
    e.add_argument("--bucket", choices=["overlap", "views", "none"], default="none")
    e.add_argument("--context", type=int, default=None, help="use this many (evenly spread) context views")
    e.add_argument("--out", help="CSV report path")
    e.add_argument("--raw-weights", dest="raw_weights", action="store_true", help="ignore EMA weights")
    e.set_defaults(func=cmd_evaluate)

    i = sub.add_parser("inspect", help="list checkpoint tensors and compare against the config")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--config", default=None, help="config to compare against (default: the .cfg sidecar)")
    i.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, SceneFormatError, CheckpointError, ContractError, ShapeError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
