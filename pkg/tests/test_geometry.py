import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duospace.geometry import (Camera, CameraRig, EgoWarp, PoseVector, backproject, compose_warps,
                               default_rig, motion_compensate, motion_compensate_array, project_point,
                               project_points, rotation_z)


def simple_rig():
    K = np.array([[100.0, 0, 64], [0, 100.0, 48], [0, 0, 1]])
    return CameraRig([Camera(K, np.eye(4), (128, 96))])


def random_warp(r):
    yaw = r.uniform(-np.pi, np.pi)
    return EgoWarp(rotation_z(yaw), r.uniform(-3, 3, 3))


class TestProjection:
    def test_principal_ray(self):
        assert project_point(simple_rig(), 0, (0, 0, 5)) == (64.0, 48.0, 5.0, True)

    def test_offset_point(self):
        u, v, d, ok = project_point(simple_rig(), 0, (1, 0, 5))
        assert (u, v, ok) == (84.0, 48.0, True)

    def test_behind_camera(self):
        assert not project_point(simple_rig(), 0, (0, 0, -1))[3]

    def test_min_depth_and_bounds(self):
        assert not project_point(simple_rig(), 0, (0, 0, 0.04))[3]
        assert not project_point(simple_rig(), 0, (10, 0, 5))[3]

    def test_bad_index(self):
        with pytest.raises(IndexError):
            project_point(simple_rig(), 1, (0, 0, 5))

    def test_roundtrip_backprojection(self, rig, rng):
        pts = rng.uniform(-20, 20, (300, 3))
        u, v, d, ok = project_points(rig, pts)
        hits = 0
        for n in range(len(rig)):
            for p in np.flatnonzero(ok[n]):
                back = backproject(rig, n, u[n, p], v[n, p], d[n, p])
                assert np.allclose(back, pts[p], atol=1e-9)
                hits += 1
        assert hits > 50

    def test_default_rig_is_valid(self, rig):
        for cam in rig.cameras:
            R = cam.T[:3, :3]
            assert np.allclose(R.T @ R, np.eye(3), atol=1e-9)
            assert np.isclose(np.linalg.det(R), 1.0)
            assert cam.K[2, 2] == 1.0

    def test_default_rig_covers_surroundings(self, rig):
        az = np.linspace(0, 2 * np.pi, 72, endpoint=False) + np.radians(2.5)
        pts = np.stack([10 * np.cos(az), 10 * np.sin(az), np.zeros_like(az)], -1)
        assert project_points(rig, pts)[3].any(axis=0).all()

    def test_rig_json_roundtrip(self, rig):
        back = CameraRig.from_dict(rig.to_dict())
        for a, b in zip(rig.cameras, back.cameras):
            assert np.array_equal(a.K, b.K) and np.array_equal(a.T, b.T)

    def test_rejects_non_rotation(self):
        with pytest.raises(ValueError):
            EgoWarp(np.diag([1.0, 1.0, -1.0]))


class TestWarps:
    def test_identity_left_unit(self, rng):
        w = random_warp(rng)
        c = compose_warps(EgoWarp.identity(), w)
        assert np.array_equal(c.R, w.R) and np.array_equal(c.t, w.t)

    def test_translations_add(self):
        c = compose_warps(EgoWarp(t=[1, 2, 0]), EgoWarp(t=[3, -1, 1]))
        assert np.allclose(c.t, [4, 1, 1])

    def test_composite_matches_sequential(self, rng):
        a, b = random_warp(rng), random_warp(rng)
        p = rng.standard_normal((20, 3)) * 10
        assert np.allclose(compose_warps(a, b).apply(p), a.apply(b.apply(p)), atol=1e-12)


class TestMotionCompensation:
    def pose(self, **kw):
        return PoseVector(x=3.0, y=-2.0, z=0.5, w=1.9, l=4.2, h=1.6, sin_yaw=0.6, cos_yaw=0.8, **kw)

    def test_identity_exact(self):
        p = self.pose()
        assert np.array_equal(motion_compensate(p, EgoWarp.identity(), 0.5).to_array(), p.to_array())

    def test_dt_zero_identity_with_velocity(self):
        p = self.pose(vx=1.5, vy=-0.5)
        assert np.array_equal(motion_compensate(p, EgoWarp.identity(), 0.0).to_array(), p.to_array())

    def test_pure_translation(self):
        out = motion_compensate(self.pose(), EgoWarp(t=[1, 0, 0]), 0.5).to_array()
        ref = self.pose().to_array()
        ref[0] += 1
        assert np.allclose(out, ref, atol=1e-15)

    def test_constant_velocity_rollback(self):
        out = motion_compensate(self.pose(vx=2.0), EgoWarp.identity(), 0.5)
        assert np.isclose(out.x, 2.0)

    def test_rotation_rotates_heading_and_velocity(self):
        p = PoseVector(x=1, y=0, sin_yaw=0, cos_yaw=1, vx=1, vy=0)
        out = motion_compensate(p, EgoWarp(rotation_z(np.pi / 2)), 0.0)
        assert np.allclose([out.x, out.y, out.yaw, out.vx, out.vy], [0, 1, np.pi / 2, 0, 1], atol=1e-12)

    def test_sizes_unchanged_and_unit_heading(self, rng):
        poses = np.tile(self.pose(vx=1, vy=2).to_array(), (5, 1))
        out = motion_compensate_array(poses, random_warp(rng), 0.5)
        assert np.array_equal(out[:, 3:6], poses[:, 3:6])
        assert np.allclose(out[:, 6] ** 2 + out[:, 7] ** 2, 1.0, atol=1e-9)

    def test_negative_dt_rejected(self):
        with pytest.raises(ValueError):
            motion_compensate(self.pose(), EgoWarp.identity(), -0.1)

    def test_repeated_equals_composed_for_static_poses(self, rng):
        warps = [random_warp(rng) for _ in range(3)]
        p = self.pose().to_array()[None]
        seq = p
        for w in warps:
            seq = motion_compensate_array(seq, w, 0.5)
        comp = warps[0]
        for w in warps[1:]:
            comp = compose_warps(w, comp)
        assert np.allclose(seq, motion_compensate_array(p, comp, 1.5), atol=1e-9)

    def test_normalized_pose(self):
        p = PoseVector(w=0.01, sin_yaw=3.0, cos_yaw=4.0).normalized()
        assert np.isclose(p.sin_yaw ** 2 + p.cos_yaw ** 2, 1.0, atol=1e-9) and p.w == 0.1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_warp_inverse_property(seed):
    r = np.random.default_rng(seed)
    w = random_warp(r)
    inv = EgoWarp(w.R.T, -w.R.T @ w.t)
    p = r.standard_normal((4, 3))
    assert np.allclose(compose_warps(inv, w).apply(p), p, atol=1e-9)


def test_default_rig_sizes():
    r = default_rig(num_cameras=6, image_size=(64, 48))
    assert len(r) == 6 and r.image_size == (64, 48)
