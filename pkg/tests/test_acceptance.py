"""Acceptance criteria: each test records one PASS/FAIL line, printed in the terminal summary."""
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from helpers import tiny_dict

from duospace.autodiff import clear_tape, no_grad, precision, run_suite
from duospace.cli import main
from duospace.config import load_config
from duospace.model import ABLATIONS
from duospace.pipeline import build_model, class_names, generate_scenes
from duospace.training import Trainer, evaluate_model, sample_loss

ROOT = Path(__file__).resolve().parents[1]
OVERFIT_CONFIG = ROOT / "configs" / "overfit.json"
RESULTS = []


def record(number, name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def run_subset(node_ids):
    start = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *node_ids],
                          cwd=ROOT, capture_output=True, text=True)
    return proc, time.perf_counter() - start


def test_1_gradient_suite():
    start = time.perf_counter()
    with precision(np.float64):
        reports = run_suite(seed=0)
    elapsed = time.perf_counter() - start
    worst = max(r.max_rel_error for r in reports)
    record(1, "finite-difference gradient suite",
           worst < 1e-4 and elapsed < 300,
           f"{len(reports)} ops, max rel error {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 300s)")


ORACLES = [
    "tests/test_autodiff.py::TestForward::test_grid_sample_matches_oracle",
    "tests/test_encoder_lifting.py::TestLift::test_matches_per_voxel_oracle",
    "tests/test_decoder.py::TestDeformableAttention::test_matches_scalar_loop",
    "tests/test_decoder.py::TestSelfAttention::test_matches_naive_oracle",
    "tests/test_training.py::TestMatch::test_brute_force_oracle",
    "tests/test_metrics.py::TestMap::test_exhaustive_oracle",
]

INVARIANTS = [
    "tests/test_decoder.py::TestCompose::test_shared_pose_identity",
    "tests/test_decoder.py::TestCompose::test_identity_at_every_layer",
    "tests/test_decoder.py::TestSpaceSpecificity",
    "tests/test_decoder.py::TestSelfAttention::test_rows_sum_to_one",
    "tests/test_autodiff.py::TestForward::test_softmax_normalised",
    "tests/test_decoder.py::TestDecoder::test_query_permutation_equivariance",
    "tests/test_encoder_lifting.py::TestLift::test_camera_permutation_equivariance",
    "tests/test_encoder_lifting.py::TestLift::test_linear_in_features",
]

TEMPORAL = [
    "tests/test_temporal.py::TestTemporalPoses::test_matches_sequential_oracle",
    "tests/test_temporal.py::TestTemporalAttention::test_single_frame_reduction",
    "tests/test_temporal.py::TestTemporalAttention::test_layer_l1_attention_equals_single_frame_layer",
    "tests/test_temporal.py::TestTemporalPoses::test_agrees_with_simulator",
    "tests/test_scene.py::test_motion_convention_matches_simulator",
]


@pytest.mark.parametrize("number,name,nodes,budget", [
    (2, "oracle equivalences", ORACLES, 120.0),
    (3, "algebraic invariants", INVARIANTS, 120.0),
    (4, "temporal correctness", TEMPORAL, None),
])
def test_property_suites(number, name, nodes, budget):
    proc, elapsed = run_subset(nodes)
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = proc.returncode == 0 and (budget is None or elapsed < budget)
    limit = f" (< {budget:.0f}s)" if budget else ""
    record(number, name, ok, f"{summary}; {elapsed:.1f}s{limit}")


def dataset_loss(model, scenes, cfg):
    """Mean total loss over every training sample, without updating anything."""
    vals = []
    with no_grad():
        for sc in scenes:
            for fi in range(len(sc.frames)):
                vals.append(sample_loss(model, sc.frames[: fi + 1], cfg.decoder.num_classes,
                                        cfg.grid.extent, cfg.training)[1]["total"])
                clear_tape()
    return float(np.mean(vals))


@pytest.fixture(scope="module")
def overfit():
    cfg = load_config(OVERFIT_CONFIG)
    scenes, _ = generate_scenes(cfg)
    model = build_model(cfg)
    initial = dataset_loss(model, scenes, cfg)
    trainer = Trainer(model, cfg.training, scenes, seed=cfg.seed, num_classes=cfg.decoder.num_classes)
    start = time.perf_counter()
    result = trainer.run()
    elapsed = time.perf_counter() - start
    final = dataset_loss(model, scenes, cfg)
    report = evaluate_model(model, scenes, cfg.decoder.num_classes, class_names())
    return {"cfg": cfg, "initial": initial, "final": final, "steps": result.steps, "elapsed": elapsed,
            "report": report}


@pytest.mark.slow
def test_5_overfit_detection(overfit):
    rep, cfg = overfit["report"], overfit["cfg"]
    ratio = overfit["final"] / overfit["initial"]
    ok = (cfg.data.num_scenes == 8 and overfit["steps"] == 500 and ratio <= 0.1 and rep["mAP"] >= 0.9
          and rep["NDS"] >= 0.8 and overfit["elapsed"] <= 1800)
    aps = {n: {t: round(v, 3) for t, v in c["AP"].items()} for n, c in rep["per_class"].items()}
    record(5, "overfit convergence", ok,
           f"{cfg.data.num_scenes} scenes, {overfit['steps']} steps, loss {overfit['initial']:.3f} -> "
           f"{overfit['final']:.3f} (ratio {ratio:.3f} <= 0.1), mAP {rep['mAP']:.3f} (>= 0.9), "
           f"NDS {rep['NDS']:.3f} (>= 0.8), {overfit['elapsed'] / 60:.1f} min (<= 30); per-class AP {aps}")


@pytest.mark.slow
def test_6_segmentation_overfit(overfit):
    iou = overfit["report"]["IoU"]
    ok = overfit["cfg"].model.seg_mode == "joint" and iou["drivable"] >= 0.8 and iou["lane"] >= 0.8
    record(6, "joint segmentation IoU", ok,
           f"drivable {iou['drivable']:.3f}, lane {iou['lane']:.3f} (both >= 0.8)")


def _cli_config(directory, **overrides):
    path = Path(directory) / "config.json"
    path.write_text(json.dumps(tiny_dict(**overrides)))
    return str(path)


@pytest.mark.slow
def test_7_ablation_harness(tmp_path):
    cfg = _cli_config(tmp_path, training={"max_steps": 4, "eval_every": 0})
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "data")]) == 0
    code = main(["ablate", "--config", cfg, "--data", str(tmp_path / "data"), "--out", str(tmp_path / "abl")])
    table = (tmp_path / "abl" / "ablation.md").read_text() if code == 0 else ""
    data = json.loads((tmp_path / "abl" / "ablation.json").read_text()) if code == 0 else {"rows": []}
    modes = [r["mode"] for r in data["rows"]]
    ok = code == 0 and modes == list(ABLATIONS) and all(f"| {m} |" in table for m in ABLATIONS)
    record(7, "ablation harness", ok,
           f"modes {modes}; orderings (reported, not gated) {data.get('orderings')}")


@pytest.mark.slow
def test_8_determinism(tmp_path):
    cfg = _cli_config(tmp_path, training={"max_steps": 4, "eval_every": 1}, model={"seg_mode": "joint"})
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "data")]) == 0
    for run in ("a", "b"):
        assert main(["--threads", "1", "train", "--config", cfg, "--seed", "7", "--data", str(tmp_path / "data"),
                     "--out", str(tmp_path / run)]) == 0
        assert main(["eval", "--checkpoint", str(tmp_path / run), "--data", str(tmp_path / "data"),
                     "--out", str(tmp_path / run / "eval")]) == 0

    def tree(run):
        base = tmp_path / run
        keep = [p for p in sorted(base.rglob("*")) if p.is_file() and p.name != "run_manifest.json"]
        return {str(p.relative_to(base)): p.read_bytes() for p in keep}

    a, b = tree("a"), tree("b")
    differing = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    ckpts = [k for k in a if k.endswith("params.bin")]
    ok = not differing and ckpts and "metrics.jsonl" in a and "eval/eval.json" in a
    record(8, "determinism", ok,
           f"{len(a)} files compared ({len(ckpts)} checkpoint blobs, metrics.jsonl, eval.json); "
           f"differing: {differing or 'none'}")
