import numpy as np
import pytest

from duospace.autodiff import Tensor, precision
from duospace.autodiff import functional as F
from duospace.decoder import DecoderLayer, compose_duo_queries, init_queries
from duospace.geometry import EgoWarp, PoseVector, compose_warps, motion_compensate, rotation_z
from duospace.lifting import BevGrid
from duospace.temporal import FeatureMemory, MemoryEntry, temporal_poses
from test_decoder import EXTENT, context, small_cfg


def memory_of(warps, dts, length=None):
    """Memory whose newest-first step warps are ``warps`` with gaps ``dts``."""
    n = len(warps) + 1
    mem = FeatureMemory(length or n)
    times = np.concatenate([[0.0], np.cumsum(dts[::-1])])
    chain = [EgoWarp.identity()] + list(warps[::-1])   # oldest frame's warp is unused
    for i in range(n):
        mem.push(MemoryEntry(None, None, chain[i], float(times[i])))
    return mem


def random_warp(r):
    return EgoWarp(rotation_z(r.uniform(-0.3, 0.3)), np.r_[r.uniform(-2, 2, 2), 0.0])


def pose_array(r, k=4):
    p = np.zeros((k, 10))
    p[:, :3] = r.uniform(-10, 10, (k, 3))
    p[:, 3:6] = r.uniform(0.5, 4, (k, 3))
    yaw = r.uniform(-np.pi, np.pi, k)
    p[:, 6], p[:, 7] = np.sin(yaw), np.cos(yaw)
    p[:, 8:] = r.uniform(-3, 3, (k, 2))
    return p


class TestTemporalPoses:
    def test_identity_static(self, rng):
        p = pose_array(rng)
        p[:, 8:] = 0
        out = temporal_poses(p, memory_of([EgoWarp.identity()] * 2, [0.5, 0.5]))
        assert len(out) == 3 and all(np.array_equal(o, p) for o in out)

    def test_one_step_rollback(self):
        p = PoseVector(x=5.0, vx=2.0).to_array()[None]
        out = temporal_poses(p, memory_of([EgoWarp.identity()], [0.5]))
        assert np.isclose(out[1][0, 0], 4.0)

    def test_matches_sequential_oracle(self, rng):
        warps = [random_warp(rng) for _ in range(2)]
        dts = [0.5, 0.4]
        p = pose_array(rng)
        out = temporal_poses(p, memory_of(warps, dts))
        for q in range(len(p)):
            cur = PoseVector.from_array(p[q])
            for j, (w, dt) in enumerate(zip(warps, dts)):
                cur = motion_compensate(cur, w, dt)
                assert np.allclose(out[j + 1][q], cur.to_array(), atol=1e-9)

    def test_empty_memory_fallback(self, rng):
        p = pose_array(rng)
        out = temporal_poses(p, FeatureMemory(3))
        assert len(out) == 1 and np.array_equal(out[0], p)

    def test_agrees_with_simulator(self, scene):
        mem = FeatureMemory(3)
        for fr in scene.frames:
            mem.push(MemoryEntry(None, None, fr.ego_warp_to_prev, fr.timestamp))
        out = temporal_poses(scene.frames[-1].gt_poses, mem)
        for j in range(3):
            assert np.allclose(out[j], scene.frames[-1 - j].gt_poses, atol=1e-6)


class TestMemory:
    def test_rejects_non_increasing_timestamps(self):
        mem = FeatureMemory(2)
        mem.push(MemoryEntry(None, None, EgoWarp.identity(), 1.0))
        with pytest.raises(ValueError):
            mem.push(MemoryEntry(None, None, EgoWarp.identity(), 1.0))

    def test_length_validated(self):
        with pytest.raises(ValueError):
            FeatureMemory(0)

    def test_eviction_keeps_chain(self, rng):
        warps = [random_warp(rng) for _ in range(4)]
        mem = FeatureMemory(3)
        for i, w in enumerate(warps):
            mem.push(MemoryEntry(None, None, w, float(i)))
        assert len(mem) == 3
        # retained frames 1..3; composite maps frame 3 to frame 1 through warps 3 then 2
        want = compose_warps(warps[2], warps[3])
        got = mem.warp_to_oldest()
        assert np.allclose(got.matrix(), want.matrix(), atol=1e-12)
        assert [e.timestamp for e in mem.entries()] == [3.0, 2.0, 1.0]


def _temporal_layer(rng):
    with precision(np.float64):
        layer = DecoderLayer(small_cfg(), 2, EXTENT, rng, temporal=True)
        for m in (layer.bev_attn, layer.pv_attn):
            m.offsets.weight.data[...] = rng.standard_normal(m.offsets.weight.shape) * 0.1
    return layer


def _queries(rng):
    poses, cb, cp = init_queries(small_cfg(), EXTENT, [2, 4, 1.5], seed=3)
    poses[:, 8:] = rng.uniform(-2, 2, (len(poses), 2))
    return poses, Tensor(cb.astype(np.float64)), Tensor(cp.astype(np.float64))


class TestTemporalAttention:
    def test_single_frame_reduction(self, f64, rng):
        layer = _temporal_layer(rng)
        poses, cb, cp = _queries(rng)
        ctx = context(np.random.default_rng(9), np.float64)
        agg_b, agg_p, ob, op = layer.temporal_attention(cb, cp, [poses], [ctx], "duo")
        qp = layer.pose_encoder(poses, EXTENT)
        zb, zp = compose_duo_queries(cb, cp, qp)
        single_b = layer.bev_attention(zb, poses, ctx.bev)
        single_p = layer.pv_attention(zp, poses, ctx.pyramid, ctx.rig)
        assert ob[0].data.tobytes() == single_b.data.tobytes()
        assert op[0].data.tobytes() == single_p.data.tobytes()
        ref_b = layer.temporal_bev(F.concat([single_b, single_b], axis=1))
        assert np.array_equal(agg_b.data, ref_b.data)
        assert agg_b.shape == agg_p.shape == cb.shape

    def test_explicit_loop_oracle(self, f64, rng):
        layer = _temporal_layer(rng)
        poses, cb, cp = _queries(rng)
        ctxs = [context(np.random.default_rng(s), np.float64) for s in (1, 2, 3)]
        tposes = temporal_poses(poses, memory_of([random_warp(rng), random_warp(rng)], [0.5, 0.5]))
        agg_b, agg_p, _, _ = layer.temporal_attention(cb, cp, tposes, ctxs, "duo")

        def mlp(m, x):
            ls = m.layers
            for i, lin in enumerate(ls):
                x = x @ lin.weight.data + lin.bias.data
                if i < len(ls) - 1:
                    x = np.maximum(x, 0)
            return x

        outs_b, outs_p = [], []
        for p, c in zip(tposes, ctxs):
            qp = layer.pose_encoder(p, EXTENT)
            outs_b.append(layer.bev_attention(cb + qp, p, c.bev).data)
            outs_p.append(layer.pv_attention(cp + qp, p, c.pyramid, c.rig).data)
        for agg, outs, m in ((agg_b, outs_b, layer.temporal_bev), (agg_p, outs_p, layer.temporal_pv)):
            h = outs[-1]
            for o in outs[::-1]:
                h = mlp(m, np.concatenate([h, o], axis=1))
            assert np.allclose(agg.data, h, atol=1e-6)

    def test_perturbation_isolated_to_its_timestamp(self, f64, rng):
        layer = _temporal_layer(rng)
        poses, cb, cp = _queries(rng)
        ctxs = [context(np.random.default_rng(s), np.float64) for s in (1, 2)]
        tposes = temporal_poses(poses, memory_of([random_warp(rng)], [0.5]))
        _, _, ob1, op1 = layer.temporal_attention(cb, cp, tposes, ctxs, "duo")
        old = ctxs[1]
        ctxs[1] = type(old)(BevGrid(old.bev.extent, old.bev.resolution, old.bev.features * 5.0),
                            old.pyramid, old.rig)
        _, _, ob2, op2 = layer.temporal_attention(cb, cp, tposes, ctxs, "duo")
        assert ob1[0].data.tobytes() == ob2[0].data.tobytes()
        assert ob1[1].data.tobytes() != ob2[1].data.tobytes()
        assert all(a.data.tobytes() == b.data.tobytes() for a, b in zip(op1, op2))

    def test_layer_l1_attention_equals_single_frame_layer(self, f64, rng):
        temporal = DecoderLayer(small_cfg(), 2, EXTENT, np.random.default_rng(4), temporal=True)
        single = DecoderLayer(small_cfg(), 2, EXTENT, np.random.default_rng(4))
        poses, cb, cp = _queries(rng)
        ctx = context(np.random.default_rng(9), np.float64)
        qp_t = temporal.pose_encoder(poses, EXTENT)
        qp_s = single.pose_encoder(poses, EXTENT)
        assert np.array_equal(qp_t.data, qp_s.data)
        zb, zp = compose_duo_queries(cb, cp, qp_s)
        _, _, ob, op = temporal.temporal_attention(cb, cp, [poses], [ctx], "duo")
        assert np.array_equal(ob[0].data, single.bev_attention(zb, poses, ctx.bev).data)
        assert np.array_equal(op[0].data, single.pv_attention(zp, poses, ctx.pyramid, ctx.rig).data)
