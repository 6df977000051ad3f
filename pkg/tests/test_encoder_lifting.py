import numpy as np
import pytest

import oracles
from duospace.autodiff import ShapeError, Tensor, backward, strict_mode
from duospace.autodiff import functional as F
from duospace.encoder import EncoderConfig, FeaturePyramid, ImageEncoder
from duospace.geometry import default_rig
from duospace.lifting import FeatureDivergence, GridConfig, enhance_and_reduce, lift, voxel_centers


def small_encoder(rng, image_size=(32, 24), width=4):
    return ImageEncoder(EncoderConfig([width] * 4, width), rng, image_size)


def pyramid_of(arr):
    return FeaturePyramid([Tensor(arr)], [8])


class TestEncoder:
    def test_level_shapes(self, rng):
        enc = ImageEncoder(EncoderConfig(), rng)
        out = enc(np.zeros((4, 3, 96, 128), np.float32))
        assert [lv.shape for lv in out.levels] == [(4, 64, 12, 16), (4, 64, 6, 8)]
        assert out.strides == [8, 16]

    def test_wrong_shape_rejected(self, rng):
        with pytest.raises(ShapeError):
            small_encoder(rng)(np.zeros((2, 3, 10, 10)))

    def test_zero_images_zero_bias_zero_output(self, rng):
        enc = small_encoder(rng)
        for name, p in enc.named_parameters():
            if name.endswith("bias"):
                p.data[...] = 0.0
        out = enc(np.zeros((2, 3, 24, 32)))
        assert all(not np.any(lv.data) for lv in out.levels)

    def test_camera_independence(self, rng):
        enc = small_encoder(rng)
        imgs = rng.uniform(0, 1, (3, 3, 24, 32))
        a = enc(imgs)
        b = enc(imgs[[2, 0, 1]])
        for la, lb in zip(a.levels, b.levels):
            assert np.array_equal(la.data[[2, 0, 1]], lb.data)

    def test_finite_under_strict_mode(self, rng):
        with strict_mode():
            out = small_encoder(rng)(rng.uniform(0, 1, (1, 3, 24, 32)))
        assert np.all(np.isfinite(out.levels[0].data))

    def test_image_gradient_finite_difference(self, f64, rng):
        enc = small_encoder(rng)
        imgs = rng.uniform(0, 1, (2, 3, 24, 32))
        proj = rng.standard_normal(enc(imgs).levels[0].shape)

        def scalar(x, grad=False):
            t = Tensor(x, requires_grad=grad)
            out = enc(t)
            s = F.sum(out.levels[0] * Tensor(proj)) + F.sum(out.levels[1])
            return t, s

        t, s = scalar(imgs, True)
        backward(s)
        eps = 1e-6
        for _ in range(8):
            idx = tuple(rng.integers(0, n) for n in imgs.shape)
            hi, lo = imgs.copy(), imgs.copy()
            hi[idx] += eps
            lo[idx] -= eps
            num = (scalar(hi)[1].item() - scalar(lo)[1].item()) / (2 * eps)
            ana = t.grad[idx]
            assert abs(num - ana) <= 1e-3 * max(abs(num), abs(ana), 1e-6) + 1e-8


class TestLift:
    def test_matches_per_voxel_oracle(self, f64, rng):
        rig = default_rig(num_cameras=4, image_size=(16, 12))
        grid = GridConfig(extent=(2.0, 10.0, -5.0, 3.0, -1.0, 3.0), resolution=(2, 2, 2))
        feats = rng.standard_normal((4, 5, 12, 16))
        vox = lift(pyramid_of(feats), rig, grid)
        ref, hits = oracles.lift(feats, rig, grid.extent, grid.resolution)
        assert np.array_equal(vox.hit_count, hits)
        assert np.allclose(vox.features.data, ref, atol=1e-6)
        assert hits.max() >= 1

    def test_constant_field(self, rig):
        grid = GridConfig()
        feats = np.full((4, 3, 12, 16), 2.5, np.float32)
        vox = lift(pyramid_of(feats), rig, grid)
        seen = vox.hit_count >= 1
        assert np.allclose(vox.features.data[:, seen], 2.5, atol=1e-6)
        assert np.all(vox.features.data[:, ~seen] == 0.0)
        assert vox.hit_count.max() <= 4

    def test_voxel_behind_all_cameras(self):
        # a one-camera rig looking forward sees nothing behind the ego
        rig = default_rig(num_cameras=1, image_size=(16, 12))
        grid = GridConfig(extent=(-10.0, -8.0, -1.0, 1.0, 0.0, 1.0), resolution=(1, 1, 1))
        vox = lift(pyramid_of(np.ones((1, 2, 12, 16))), rig, grid)
        assert vox.hit_count[0, 0, 0] == 0 and not np.any(vox.features.data)

    def test_cell_centres(self):
        c = voxel_centers(GridConfig(extent=(0.0, 4.0, 0.0, 2.0, 0.0, 1.0), resolution=(2, 1, 1)))
        assert np.allclose(c[:, 0, 0], [[1.0, 1.0, 0.5], [3.0, 1.0, 0.5]])

    def test_camera_permutation_equivariance(self, rig, rng):
        grid = GridConfig(resolution=(12, 12, 4))
        feats = rng.standard_normal((4, 3, 12, 16)).astype(np.float32)
        order = [3, 1, 0, 2]
        a = lift(pyramid_of(feats), rig, grid)
        b = lift(pyramid_of(feats[order]), rig.permuted(order), grid)
        assert np.array_equal(a.hit_count, b.hit_count)
        assert np.allclose(a.features.data, b.features.data, atol=1e-6)

    def test_linear_in_features(self, f64, rig, rng):
        grid = GridConfig(resolution=(12, 12, 4))
        f1, f2 = rng.standard_normal((2, 4, 3, 12, 16))
        a = lift(pyramid_of(f1), rig, grid).features.data
        b = lift(pyramid_of(f2), rig, grid).features.data
        c = lift(pyramid_of(3.0 * f1 - 0.5 * f2), rig, grid).features.data
        assert np.allclose(c, 3.0 * a - 0.5 * b, atol=1e-12)
        assert np.array_equal(lift(pyramid_of(2.0 * f1), rig, grid).features.data, 2.0 * a)

    def test_camera_count_mismatch(self, rig):
        with pytest.raises(ValueError):
            lift(pyramid_of(np.zeros((2, 3, 12, 16))), rig, GridConfig())


class TestFeatureDivergence:
    def test_shape_contract(self, rng):
        grid = GridConfig()
        mod = FeatureDivergence(64, 8, rng)
        vox = lift(pyramid_of(rng.standard_normal((4, 64, 12, 16)).astype(np.float32)), default_rig(), grid)
        bev = enhance_and_reduce(vox, mod)
        assert bev.features.shape == (64, 48, 48)
        assert bev.extent == grid.bev_extent

    def test_zero_in_zero_out(self, rng):
        mod = FeatureDivergence(3, 2, rng)
        for name, p in mod.named_parameters():
            if name.endswith("bias"):
                p.data[...] = 0.0
        assert not np.any(mod(Tensor(np.zeros((3, 5, 5, 2)))).data)

    def test_bypass_is_flatten_and_mix(self, f64, rng):
        mod = FeatureDivergence(2, 3, rng, bypass=True)
        v = rng.standard_normal((2, 4, 5, 3))
        flat = np.transpose(v, (0, 3, 1, 2)).reshape(6, 4, 5)
        w = mod.mix.weight.data[:, :, 0, 0]
        ref = np.einsum("oc,cxy->oxy", w, flat) + mod.mix.bias.data[:, None, None]
        assert np.allclose(mod(Tensor(v)).data, ref, atol=1e-12)

    def test_voxel_gradient_finite_difference(self, f64, rng):
        mod = FeatureDivergence(2, 2, rng)
        v = rng.standard_normal((2, 4, 4, 2))
        proj = rng.standard_normal((2, 4, 4))
        t = Tensor(v, requires_grad=True)
        backward(F.sum(mod(t) * Tensor(proj)))
        eps = 1e-6
        for _ in range(8):
            idx = tuple(rng.integers(0, n) for n in v.shape)
            hi, lo = v.copy(), v.copy()
            hi[idx] += eps
            lo[idx] -= eps
            num = (np.sum(mod(Tensor(hi)).data * proj) - np.sum(mod(Tensor(lo)).data * proj)) / (2 * eps)
            assert abs(num - t.grad[idx]) <= 1e-3 * max(abs(num), 1e-6) + 1e-8
