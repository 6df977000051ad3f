import math

import numpy as np
import pytest
from helpers import tiny_config

import oracles
from duospace.autodiff import Tensor, backward, load_arrays
from duospace.decoder import LayerPrediction, pose_inputs
from duospace.pipeline import build_model, generate_scenes
from duospace.training import NumericFailure, Trainer
from duospace.training.losses import LossConfig, detection_cost, detection_loss
from duospace.training.matching import match
from duospace.training.optim import AdamW, ParamGroup, clip_grad_norm, cosine_lr

EXTENT = (-24.0, 24.0, -24.0, 24.0, -1.0, 5.0)


def random_poses(rng, n):
    p = np.zeros((n, 10))
    p[:, :2] = rng.uniform(-20, 20, (n, 2))
    p[:, 2] = rng.uniform(0, 2, n)
    p[:, 3:6] = rng.uniform(0.5, 4, (n, 3))
    yaw = rng.uniform(-np.pi, np.pi, n)
    p[:, 6], p[:, 7] = np.sin(yaw), np.cos(yaw)
    p[:, 8:] = rng.uniform(-5, 5, (n, 2))
    return p


def layer_of(logits, poses, grad=False):
    return LayerPrediction(Tensor(logits, requires_grad=grad), Tensor(poses, requires_grad=grad))


class TestMatch:
    def test_two_by_two(self):
        m = match(np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert m.pairs == ((0, 0), (1, 1)) and m.total_cost(np.array([[0.0, 1.0], [1.0, 0.0]])) == 0.0

    def test_single_gt_takes_cheapest_query(self, rng):
        cost = rng.uniform(size=(5, 1))
        m = match(cost)
        assert m.pairs == ((int(cost.argmin()), 0),)
        assert len(m.unmatched) == 4

    @pytest.mark.parametrize("seed", range(30))
    def test_brute_force_oracle(self, seed):
        r = np.random.default_rng(seed)
        k, g = r.integers(1, 7, 2)
        cost = r.uniform(-3, 3, (k, g))
        m = match(cost)
        best, _ = oracles.brute_force_assignment(cost)
        assert abs(m.total_cost(cost) - best) < 1e-12
        assert len(m.pairs) == min(k, g)
        qs, gs = m.query_indices, m.gt_indices
        assert len(set(qs)) == len(qs) and len(set(gs)) == len(gs)
        assert set(m.unmatched) == set(range(k)) - set(qs)

    def test_constant_shift_invariance(self, rng):
        cost = rng.uniform(size=(6, 4))
        assert match(cost).pairs == match(cost + 17.5).pairs

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            match(np.array([[0.0, np.nan]]))

    def test_empty(self):
        assert match(np.zeros((3, 0))).unmatched == (0, 1, 2)


class TestCost:
    def test_perfect_prediction_is_cheapest(self):
        for seed in range(10):
            r = np.random.default_rng(seed)
            gt = random_poses(r, 3)
            cls = r.integers(0, 3, 3)
            poses = random_poses(r, 6)
            logits = r.standard_normal((6, 3))
            poses[2] = gt[1]
            logits[2] = -8.0
            logits[2, cls[1]] = 8.0
            cost = detection_cost(logits, poses, gt, cls, EXTENT)
            others = np.delete(cost[:, 1], 2)
            assert np.all(cost[2, 1] < others)

    def test_identical_queries_identical_rows(self, rng):
        poses = np.repeat(random_poses(rng, 1), 3, axis=0)
        logits = np.repeat(rng.standard_normal((1, 3)), 3, axis=0)
        cost = detection_cost(logits, poses, random_poses(rng, 4), [0, 1, 2, 0], EXTENT)
        assert np.array_equal(cost[0], cost[1]) and np.array_equal(cost[1], cost[2])

    def test_regression_only_weights(self, rng):
        poses, gt = random_poses(rng, 4), random_poses(rng, 3)
        cost = detection_cost(rng.standard_normal((4, 3)), poses, gt, [0, 1, 2], EXTENT,
                              LossConfig(cost_cls=0.0, cost_reg=0.7))
        a, b = pose_inputs(poses, EXTENT), pose_inputs(gt, EXTENT)
        want = np.array([[0.7 * np.abs(a[i] - b[j]).sum() for j in range(3)] for i in range(4)])
        assert np.allclose(cost, want, atol=1e-12)


class TestDetectionLoss:
    def test_zero_gt_is_pure_negative_focal(self, f64, rng):
        logits = rng.standard_normal((4, 3))
        loss, parts = detection_loss([layer_of(logits, random_poses(rng, 4))], np.zeros((0, 10)), [], 3, EXTENT)
        p = 1 / (1 + np.exp(-logits))
        want = 2.0 * np.sum(0.75 * p ** 2 * -np.log(1 - p))
        assert parts["reg"] == 0.0
        assert abs(loss.item() - want) < 1e-9

    def test_perfect_fit(self, f64, rng):
        gt = random_poses(rng, 3)
        cls = np.array([0, 2, 1])
        poses = np.concatenate([gt, random_poses(rng, 3)])
        logits = np.full((6, 3), -20.0)
        logits[np.arange(3), cls] = 20.0
        loss, _ = detection_loss([layer_of(logits, poses)] * 2, gt, cls, 3, EXTENT)
        assert loss.item() < 1e-3

    def test_permutation_invariance(self, f64, rng):
        gt, cls = random_poses(rng, 3), np.array([0, 1, 2])
        poses, logits = random_poses(rng, 6), rng.standard_normal((6, 3))
        base = detection_loss([layer_of(logits, poses)], gt, cls, 3, EXTENT)[0].item()
        qp, gp = rng.permutation(6), rng.permutation(3)
        by_query = detection_loss([layer_of(logits[qp], poses[qp])], gt, cls, 3, EXTENT)[0].item()
        by_gt = detection_loss([layer_of(logits, poses)], gt[gp], cls[gp], 3, EXTENT)[0].item()
        assert abs(by_query - base) < 1e-12 and abs(by_gt - base) < 1e-12

    def test_deep_supervision_sums_layers(self, f64, rng):
        gt, cls = random_poses(rng, 2), np.array([1, 2])
        layers = [layer_of(rng.standard_normal((5, 3)), random_poses(rng, 5)) for _ in range(2)]
        both, parts = detection_loss(layers, gt, cls, 3, EXTENT)
        single = [detection_loss([lay], gt, cls, 3, EXTENT)[0].item() for lay in layers]
        assert abs(both.item() - sum(single)) < 1e-12 and np.allclose(parts["layers"], single)

    def test_pose_gradient_finite_difference(self, f64, rng):
        gt, cls = random_poses(rng, 3), np.array([0, 1, 2])
        poses, logits = random_poses(rng, 5), rng.standard_normal((5, 3))
        lay = layer_of(logits, poses, grad=True)
        loss, parts = detection_loss([lay], gt, cls, 3, EXTENT)
        backward(loss)
        pairs = parts["matches"][0]
        eps = 1e-6
        for q, _ in pairs.pairs:
            for d in range(10):
                hi, lo = poses.copy(), poses.copy()
                hi[q, d] += eps
                lo[q, d] -= eps
                f = lambda p: detection_loss([layer_of(logits, p)], gt, cls, 3, EXTENT)[0].item()
                num = (f(hi) - f(lo)) / (2 * eps)
                ana = lay.poses.grad[q, d]
                assert abs(num - ana) <= 1e-3 * max(abs(num), abs(ana), 1e-6) + 1e-8
        bump = np.zeros_like(logits)
        bump[0, 0] = eps
        f = lambda lg: detection_loss([layer_of(lg, poses)], gt, cls, 3, EXTENT)[0].item()
        num = (f(logits + bump) - f(logits - bump)) / (2 * eps)
        assert abs(num - lay.logits.grad[0, 0]) <= 1e-3 * max(abs(num), 1e-6) + 1e-8

    def test_requires_a_layer(self):
        with pytest.raises(ValueError):
            detection_loss([], np.zeros((0, 10)), [], 3, EXTENT)


class TestOptim:
    def _params(self, rng):
        return [(f"p{i}", Tensor(rng.standard_normal((3, 2)), requires_grad=True)) for i in range(2)]

    def test_zero_gradient_step_is_noop(self, f64, rng):
        named = self._params(rng)
        before = [p.data.copy() for _, p in named]
        opt = AdamW([ParamGroup(named, 1e-2)], weight_decay=0.0)
        for _, p in named:
            p.grad = np.zeros_like(p.data)
        for _ in range(3):
            opt.step()
        assert all(np.array_equal(b, p.data) for b, (_, p) in zip(before, named))

    def test_weight_decay_is_decoupled(self, f64, rng):
        named = self._params(rng)
        before = [p.data.copy() for _, p in named]
        opt = AdamW([ParamGroup(named, 0.1)], weight_decay=0.5)
        opt.step()
        assert all(np.allclose(p.data, b * 0.95) for b, (_, p) in zip(before, named))

    def test_first_step_is_sign_times_lr(self, f64, rng):
        named = self._params(rng)
        before = named[0][1].data.copy()
        g = rng.standard_normal((3, 2))
        named[0][1].grad = g
        AdamW([ParamGroup(named, 0.01)], weight_decay=0.0).step()
        assert np.allclose(named[0][1].data, before - 0.01 * np.sign(g), atol=1e-8)

    def test_cosine_schedule(self):
        assert cosine_lr(0, 100) == 1.0
        assert math.isclose(cosine_lr(100, 100), 0.01)
        assert math.isclose(cosine_lr(50, 100), 0.505)
        assert all(cosine_lr(s, 100) >= cosine_lr(s + 1, 100) for s in range(100))

    def test_clip_grad_norm(self, rng):
        ps = [Tensor(np.zeros(3)), Tensor(np.zeros(4))]
        ps[0].grad = np.array([3.0, 0.0, 0.0])
        ps[1].grad = np.array([0.0, 4.0, 0.0, 0.0])
        assert clip_grad_norm(ps, 1.0) == 5.0
        assert math.isclose(np.sqrt(sum(np.sum(p.grad ** 2) for p in ps)), 1.0, rel_tol=1e-9)
        assert clip_grad_norm(ps, 10.0) < 1.0 + 1e-9


def _trainer(tmp_path=None, **train):
    cfg = tiny_config(training={"eval_every": 0, **train})
    scenes, _ = generate_scenes(cfg)
    model = build_model(cfg)
    return Trainer(model, cfg.training, scenes, out_dir=tmp_path, seed=cfg.seed), model


class TestTrainer:
    def test_zero_lr_keeps_parameters(self):
        tr, model = _trainer(lr_backbone=0.0, lr_other=0.0, max_steps=3)
        before = {n: p.data.copy() for n, p in model.named_parameters()}
        tr.run()
        assert all(before[n].tobytes() == p.data.tobytes() for n, p in model.named_parameters())

    def test_resume_is_bit_exact(self, tmp_path):
        full, _ = _trainer(tmp_path / "a", epochs=2, max_steps=0)
        ref = full.run().losses
        assert len(ref) == 2 * full.steps_per_epoch
        part, _ = _trainer(tmp_path / "b", epochs=2, max_steps=0)
        part.resume(tmp_path / "a" / "checkpoints" / f"step_{full.steps_per_epoch:06d}")
        tail = part.run().losses
        assert tail == ref[full.steps_per_epoch:]

    def test_checkpoint_rotation(self, tmp_path):
        tr, _ = _trainer(tmp_path, epochs=3, max_steps=0, keep_checkpoints=2)
        tr.run()
        kept = sorted(p.name for p in (tmp_path / "checkpoints").iterdir() if p.is_dir())
        assert len(kept) == 2 and tr.latest_checkpoint().name == kept[-1]

    def test_non_finite_loss_aborts_keeping_last_checkpoint(self, tmp_path):
        tr, model = _trainer(tmp_path, epochs=3, max_steps=0)
        tr.total_steps = tr.steps_per_epoch
        tr.run()
        good = tr.latest_checkpoint()
        next(p for n, p in model.named_parameters() if n.startswith("decoder")).data[...] = np.nan
        tr.total_steps = 3 * tr.steps_per_epoch
        with pytest.raises(NumericFailure):
            tr.run()
        assert tr.latest_checkpoint() == good
        arrays, _ = load_arrays(good)
        assert all(np.all(np.isfinite(a)) for a in arrays.values())

    def test_sample_order_depends_only_on_seed_and_epoch(self):
        a, _ = _trainer()
        b, _ = _trainer()
        assert [a.batch_for(s) for s in range(8)] == [b.batch_for(s) for s in range(8)]
