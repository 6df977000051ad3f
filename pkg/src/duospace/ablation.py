"""Ablation harness: train each mode on the same data and tabulate the results."""
from __future__ import annotations

import copy
import json
from pathlib import Path

from .config import RunConfig, config_to_dict
from .model import ABLATIONS

__all__ = ["run_ablations", "format_table"]

COLUMNS = ("mAP", "NDS", "mATE", "mASE", "mAOE", "mAVE")


def _mode_config(cfg: RunConfig, mode: str, temporal_frames: int) -> RunConfig:
    c = copy.deepcopy(cfg)
    c.model.ablate = mode
    if mode.startswith("temporal"):
        c.temporal.enabled = False
        c.temporal.length = max(2, temporal_frames)
    return c


def format_table(rows: list) -> str:
    head = "| mode | " + " | ".join(COLUMNS) + " | final loss |"
    sep = "|" + "---|" * (len(COLUMNS) + 2)
    lines = [head, sep]
    for r in rows:
        m = r["metrics"]
        vals = " | ".join(f"{m[k]:.3f}" if k in m else "-" for k in COLUMNS)
        lines.append(f"| {r['mode']} | {vals} | {r['final_loss']:.4f} |")
    return "\n".join(lines)


def _orderings(rows: list) -> dict:
    """Orderings reported for inspection only; nothing here is asserted."""
    by = {r["mode"]: r["metrics"].get("mAP") for r in rows}
    out = {}
    singles = [by[m] for m in ("bev-only", "pv-only") if by.get(m) is not None]
    if by.get("duo") is not None and singles:
        out["duo_beats_single_space"] = bool(by["duo"] >= max(singles))
    if by.get("temporal-stacking") is not None and by.get("temporal-attn") is not None:
        out["attn_beats_stacking"] = bool(by["temporal-attn"] >= by["temporal-stacking"])
    return out


def run_ablations(cfg: RunConfig, data: Path, out: Path, modes=ABLATIONS, temporal_frames: int = 2) -> str:
    from .pipeline import class_names, read_split, split_names, train_run
    from .training import evaluate_model

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    split = "val" if (split_names(data) or {}).get("val") else None
    rows = []
    for mode in modes:
        mcfg = _mode_config(cfg, mode, temporal_frames)
        model, _, result, train = train_run(mcfg, data, out / mode, resume=False, quiet=True)
        scenes = read_split(data, split) if split else train
        metrics = evaluate_model(model, scenes, mcfg.decoder.num_classes, class_names())
        rows.append({"mode": mode, "metrics": {k: metrics[k] for k in COLUMNS if k in metrics},
                     "final_loss": result.losses[-1] if result.losses else float("nan"),
                     "steps": result.steps, "eval_split": split or "train",
                     "config": config_to_dict(mcfg)})
    table = format_table(rows)
    (out / "ablation.json").write_text(json.dumps({"rows": rows, "orderings": _orderings(rows)},
                                                  indent=1, sort_keys=True) + "\n")
    (out / "ablation.md").write_text(table + "\n")
    return table
