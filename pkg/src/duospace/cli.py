"""Command-line entry point: ``duospace <subcommand> [options]``."""
from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .pipeline import DataError, read_split, split_names, train_run

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "DUOSPACE_NUM_THREADS"


# -- helpers ------------------------------------------------------------------------------
def _threads(args) -> int | None:
    value = getattr(args, "threads", None) or os.environ.get(THREADS_ENV)
    if value in (None, ""):
        return None
    try:
        n = int(value)
    except ValueError:
        from .config import ConfigError
        raise ConfigError(f"thread count must be an integer, got {value!r}", "/threads") from None
    if n < 1:
        from .config import ConfigError
        raise ConfigError("thread count must be >= 1", "/threads")
    return n


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _load_cfg(args):
    from .config import RunConfig, load_config
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "temporal", None) is not None:
        cfg.temporal.enabled = bool(args.temporal)
    if getattr(args, "seg", None) is not None:
        cfg.model.seg_mode = args.seg
    if getattr(args, "ablate", None) is not None:
        cfg.model.ablate = args.ablate
    return cfg


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def _manifest(out: Path, command: str, args, cfg=None, outputs=()) -> None:
    from .config import config_to_dict
    record = {
        "command": command,
        "version": __version__,
        "args": {k: v for k, v in vars(args).items() if k != "func" and v is not None},
        "threads": _threads(args),
        "outputs": sorted(str(o) for o in outputs),
    }
    if cfg is not None:
        record["config"] = config_to_dict(cfg)
    _write_json(out / "run_manifest.json", record)


def _resolve_checkpoint(path) -> Path:
    p = Path(path)
    if (p / "checkpoints" / "latest").is_file():
        p = p / "checkpoints"
    if (p / "latest").is_file():
        p = p / (p / "latest").read_text().strip()
    if not (p / "manifest.json").is_file():
        raise DataError(f"no checkpoint found at {path}")
    return p


def _model_from_checkpoint(path):
    from .autodiff import load_arrays
    from .config import config_from_dict
    from .pipeline import build_model
    from .training.loop import CHECKPOINT_KIND
    ckpt = _resolve_checkpoint(path)
    arrays, meta = load_arrays(ckpt)
    if meta.get("kind") != CHECKPOINT_KIND or "config" not in meta:
        raise DataError(f"{ckpt}: not a model checkpoint")
    cfg = config_from_dict(meta["config"])
    model = build_model(cfg)
    model.load_state_dict({k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")})
    return model, cfg, ckpt


# -- subcommands --------------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    from .pipeline import generate_scenes
    from .scene import write_scenes
    cfg = _load_cfg(args)
    train, val = generate_scenes(cfg)
    names = [f"scene_{i:04d}" for i in range(len(train) + len(val))]
    out = Path(args.out)
    write_scenes(train + val, out, {"train": names[: len(train)], "val": names[len(train):]})
    _manifest(out, "gen-data", args, cfg, ["dataset.json"] + names)
    print(f"wrote {len(train)} train and {len(val)} val scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, trainer, result, _ = train_run(cfg, Path(args.data), out, args.resume)
    summary = {"steps": result.steps, "initial_loss": result.losses[0] if result.losses else None,
               "final_loss": result.losses[-1] if result.losses else None,
               "checkpoint": (str(Path(result.last_checkpoint).relative_to(out)) if result.last_checkpoint
                              else None)}
    _write_json(out / "train_summary.json", summary)
    _manifest(out, "train", args, cfg, ["config.json", "train_summary.json", "train_log.jsonl",
                                         "metrics.jsonl", "checkpoints"])
    print(json.dumps(summary))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .pipeline import class_names
    from .training import evaluate_model
    model, cfg, ckpt = _model_from_checkpoint(args.checkpoint)
    scenes = read_split(Path(args.data), None if args.split == "all" else args.split)
    report = evaluate_model(model, scenes, cfg.decoder.num_classes, class_names())
    report["checkpoint"] = ckpt.name
    report["split"] = args.split
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.out:
        out = Path(args.out)
        _write_json(out / "eval.json", report)
        _manifest(out, "eval", args, cfg, ["eval.json"])
    print(text)
    return EXIT_OK


def cmd_infer(args) -> int:
    from .autodiff import no_grad
    from .pipeline import class_names
    from .training import decode
    model, cfg, _ = _model_from_checkpoint(args.checkpoint)
    scenes = read_split(Path(args.data), None if args.split == "all" else args.split)
    names = class_names()
    frames_out = []
    with no_grad():
        for si, sc in enumerate(scenes):
            for fi in range(len(sc.frames)):
                out = model(sc.frames[: fi + 1])
                rec = {"scene": si, "frame": fi, "layers": []}
                for layer in out.layers:
                    poses, cls, score = decode(layer, args.score_floor)
                    rec["layers"].append([{"pose": p.tolist(), "class": names[c], "score": float(s)}
                                          for p, c, s in zip(poses, cls, score)])
                if out.layers:
                    rec["detections"] = rec["layers"][-1]
                if out.seg is not None:
                    rec["mask_pixels"] = {n: int(v) for n, v in
                                          zip(("drivable", "lane"), (out.seg.logits.data > 0).sum(axis=(1, 2)))}
                frames_out.append(rec)
    out_dir = Path(args.out)
    _write_json(out_dir / "predictions.json", {"frames": frames_out})
    _manifest(out_dir, "infer", args, cfg, ["predictions.json"])
    print(f"wrote predictions for {len(frames_out)} frames to {out_dir / 'predictions.json'}")
    return EXIT_OK


def cmd_dump_heatmaps(args) -> int:
    from .autodiff import no_grad
    from .heatmaps import norm_map, write_pgm
    model, cfg, _ = _model_from_checkpoint(args.checkpoint)
    scenes = read_split(Path(args.data), None if args.split == "all" else args.split)
    if not 0 <= args.scene < len(scenes) or not 0 <= args.frame < len(scenes[args.scene].frames):
        raise DataError(f"scene {args.scene} / frame {args.frame} out of range")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    with no_grad():
        out = model(scenes[args.scene].frames[: args.frame + 1])
    if out.bev is not None:
        written.append(write_pgm(out_dir / "bev_norm.pgm", norm_map(out.bev.features.data)))
    for lv, level in enumerate(out.pyramid.levels):
        for cam in range(level.shape[0]):
            written.append(write_pgm(out_dir / f"pv_cam{cam}_level{lv}.pgm", norm_map(level.data[cam])))
    if out.seg is not None:
        for c, name in enumerate(("drivable", "lane")):
            written.append(write_pgm(out_dir / f"mask_{name}.pgm",
                                     (out.seg.logits.data[c] > 0).astype(np.uint8) * 255))
    _manifest(out_dir, "dump-heatmaps", args, cfg, [p.name for p in written])
    print(f"wrote {len(written)} PGM maps to {out_dir}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .autodiff import run_suite
    reports = run_suite(seed=args.seed, names=args.ops or None)
    worst = 0.0
    failed = []
    for r in reports:
        status = "ok" if r.passed(args.tol) else "FAIL"
        worst = max(worst, r.max_rel_error)
        print(f"{r.op:24s} max_rel_error={r.max_rel_error:.3e}  {status}")
        if status != "ok":
            failed.append(r.op)
    print(f"{len(reports)} ops, max relative error {worst:.3e}, tolerance {args.tol:g}")
    if args.out:
        out = Path(args.out)
        _write_json(out / "grad_check.json", {"tolerance": args.tol, "max_rel_error": worst,
                                              "ops": {r.op: r.max_rel_error for r in reports}, "failed": failed})
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import run_ablations
    cfg = _load_cfg(args)
    out = Path(args.out)
    table = run_ablations(cfg, Path(args.data), out, modes=args.modes, temporal_frames=args.temporal_frames)
    _manifest(out, "ablate", args, cfg, ["ablation.json", "ablation.md"])
    print(table)
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    from .model import ABLATIONS, SEG_MODES
    p = argparse.ArgumentParser(prog="duospace", description="Duo-space multi-camera 3D detection at desk scale.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--threads", type=int, help=f"BLAS thread count (default: ${THREADS_ENV} or library default)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, seed=True):
        if config:
            sp.add_argument("--config", help="run configuration JSON")
        if seed:
            sp.add_argument("--seed", type=int)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(g)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--temporal", type=int, choices=(0, 1))
    t.add_argument("--seg", choices=SEG_MODES)
    t.add_argument("--ablate", choices=ABLATIONS)
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    t.set_defaults(func=cmd_train)

    for name, fn, helptext in (("eval", cmd_eval, "evaluate a checkpoint"),
                               ("infer", cmd_infer, "write per-frame predictions"),
                               ("dump-heatmaps", cmd_dump_heatmaps, "write BEV/PV feature-norm PGM maps")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True, help="checkpoint directory or training --out directory")
        e.add_argument("--data", required=True)
        e.add_argument("--split", default="train", choices=("train", "val", "all"))
        e.add_argument("--out", required=(name != "eval"))
        if name == "infer":
            e.add_argument("--score-floor", type=float, default=0.0)
        if name == "dump-heatmaps":
            e.add_argument("--scene", type=int, default=0)
            e.add_argument("--frame", type=int, default=0)
        e.set_defaults(func=fn)

    gc = sub.add_parser("grad-check", help="finite-difference check of every registered op")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--ops", nargs="*")
    gc.add_argument("--out")
    gc.set_defaults(func=cmd_grad_check)

    a = sub.add_parser("ablate", help="train and compare every ablation mode")
    common(a)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--modes", nargs="*", choices=ABLATIONS, default=list(ABLATIONS))
    a.add_argument("--temporal-frames", type=int, default=2,
                   help="history length used by the temporal comparison modes")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    from .autodiff import CheckpointError, NonFiniteError
    from .config import ConfigError
    from .scene import DatasetError, SceneSpecError
    from .training import NumericFailure

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    try:
        with _thread_limit(_threads(args)):
            return args.func(args)
    except (ConfigError, SceneSpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
