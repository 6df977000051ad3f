import json

import numpy as np
import pytest
from scipy.spatial import ConvexHull

from duospace.geometry import default_rig, motion_compensate_array, project_points
from duospace.scene import (DRIVABLE, MalformedManifestError, MissingManifestError, SceneSpec,
                            SceneSpecError, ShapeMismatchError, TruncatedBlobError, generate,
                            read_dataset, read_scenes, write_dataset, write_scenes)
from duospace.scene.raster import box_corners


def frames_equal(a, b):
    for fa, fb in zip(a.frames, b.frames):
        assert fa.images.tobytes() == fb.images.tobytes()
        assert fa.map_masks.tobytes() == fb.map_masks.tobytes()
        assert fa.gt_poses.tobytes() == fb.gt_poses.tobytes()
        assert np.array_equal(fa.gt_classes, fb.gt_classes)
        assert np.array_equal(fa.ego_warp_to_prev.matrix(), fb.ego_warp_to_prev.matrix())
        assert fa.timestamp == fb.timestamp
    assert len(a.frames) == len(b.frames)


def test_deterministic(scene):
    frames_equal(scene, generate(SceneSpec(seed=3, num_frames=3)))


def test_seeds_differ():
    a = generate(SceneSpec(seed=1, num_frames=1))
    b = generate(SceneSpec(seed=2, num_frames=1))
    assert a.frames[0].images.tobytes() != b.frames[0].images.tobytes()


def test_frame_contract(scene):
    spec = scene.spec
    for fr in scene.frames:
        assert fr.images.shape == (4, 96, 128, 3) and fr.images.dtype == np.float32
        assert 0.0 <= fr.images.min() and fr.images.max() <= 1.0
        assert fr.map_masks.shape == (2, 48, 48)
        assert set(np.unique(fr.map_masks)) <= {0.0, 1.0}
        x0, x1, y0, y1 = spec.bev_extent
        assert np.all((fr.gt_poses[:, 0] > x0) & (fr.gt_poses[:, 0] < x1))
        assert np.all((fr.gt_poses[:, 1] > y0) & (fr.gt_poses[:, 1] < y1))
        assert np.allclose(fr.gt_poses[:, 6] ** 2 + fr.gt_poses[:, 7] ** 2, 1.0)
    assert [f.timestamp for f in scene.frames] == [0.0, 0.5, 1.0]


def test_zero_objects_is_background():
    sc = generate(SceneSpec(seed=5, num_objects=0, num_frames=1))
    assert sc.frames[0].gt_poses.shape == (0, 10)
    with_objects = generate(SceneSpec(seed=5, num_objects=3, num_frames=1))
    # same seed draws the same ground, so only object pixels differ
    diff = np.any(sc.frames[0].images != with_objects.frames[0].images, axis=-1)
    assert 0 < diff.mean() < 0.5


def test_motion_convention_matches_simulator(scene):
    for t in range(1, len(scene.frames)):
        cur, prev = scene.frames[t], scene.frames[t - 1]
        back = motion_compensate_array(cur.gt_poses, cur.ego_warp_to_prev, cur.timestamp - prev.timestamp)
        order = [list(prev.track_ids).index(i) for i in cur.track_ids]
        assert np.allclose(back, prev.gt_poses[order], atol=1e-6)


def test_drivable_covers_vehicle_footprints(scene):
    spec = scene.spec
    x0, x1, y0, y1 = spec.bev_extent
    nx, ny = spec.bev_resolution
    for fr in scene.frames:
        for pose, cls in zip(fr.gt_poses, fr.gt_classes):
            if cls != 0:
                continue
            i = int((pose[0] - x0) / (x1 - x0) * nx)
            j = int((pose[1] - y0) / (y1 - y0) * ny)
            assert fr.map_masks[DRIVABLE, i, j] == 1.0


def test_rejects_invalid_specs():
    with pytest.raises(SceneSpecError):
        generate(SceneSpec(num_frames=0))
    with pytest.raises(SceneSpecError):
        generate(SceneSpec(dt=0.0))
    with pytest.raises(SceneSpecError):
        generate(SceneSpec(num_objects=500))


def _segment_distance(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def test_silhouette_matches_projected_hull():
    rig = default_rig(num_cameras=1)
    for seed in range(200):
        spec = SceneSpec(seed=seed, num_objects=1, num_frames=1, rig=rig)
        sc = generate(spec)
        pose = sc.frames[0].gt_poses[0]
        corners = box_corners(pose[:3], pose[3:6], np.arctan2(pose[6], pose[7]))
        u, v, d, ok = project_points(rig, corners)
        if ok.all():
            break
    else:
        pytest.skip("no seed puts the object fully in view")
    bg = generate(SceneSpec(seed=seed, num_objects=0, num_frames=1, rig=rig)).frames[0].images[0]
    img = sc.frames[0].images[0]
    painted = np.any(img != bg, axis=-1)
    uv = np.stack([u[0], v[0]], -1)
    hull = uv[ConvexHull(uv).vertices]
    h, w = painted.shape
    jj, ii = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    pix = np.stack([jj.ravel(), ii.ravel()], -1)
    inside = np.ones(len(pix), bool)
    for a, b in zip(hull, np.roll(hull, -1, axis=0)):
        inside &= (b[0] - a[0]) * (pix[:, 1] - a[1]) - (b[1] - a[1]) * (pix[:, 0] - a[0]) >= 0
    if not inside.any():
        inside = np.ones(len(pix), bool)
        for a, b in zip(hull, np.roll(hull, -1, axis=0)):
            inside &= (b[0] - a[0]) * (pix[:, 1] - a[1]) - (b[1] - a[1]) * (pix[:, 0] - a[0]) <= 0
    mismatch = pix[inside != painted.ravel()]
    assert inside.sum() > 20
    if len(mismatch):
        dist = np.min([_segment_distance(mismatch, a, b) for a, b in zip(hull, np.roll(hull, -1, axis=0))],
                      axis=0)
        assert dist.max() <= 1.0


class TestIO:
    def test_roundtrip_bit_exact(self, scene, tmp_path):
        write_dataset(scene, tmp_path / "s")
        back = read_dataset(tmp_path / "s")
        frames_equal(scene, back)
        assert np.array_equal(back.rig[0].K, scene.rig[0].K)

    def test_multi_scene_roundtrip(self, tmp_path):
        scenes = [generate(SceneSpec(seed=s, num_frames=1)) for s in range(2)]
        write_scenes(scenes, tmp_path / "d", split={"train": ["scene_0000"], "val": ["scene_0001"]})
        assert len(read_scenes(tmp_path / "d")) == 2
        val = read_scenes(tmp_path / "d", "val")
        frames_equal(val[0], scenes[1])

    def test_empty_directory(self, tmp_path):
        with pytest.raises(MissingManifestError):
            read_dataset(tmp_path)

    def test_malformed_manifest(self, tmp_path):
        (tmp_path / "manifest.json").write_text("{not json")
        with pytest.raises(MalformedManifestError):
            read_dataset(tmp_path)

    def _tamper(self, scene, directory, edit):
        write_dataset(scene, directory)
        path = directory / "manifest.json"
        man = json.loads(path.read_text())
        edit(man)
        path.write_text(json.dumps(man))

    def test_shape_mismatch(self, scene, tmp_path):
        def edit(man):
            man["frames"][0]["images"]["shape"][0] = 2
        self._tamper(scene, tmp_path / "s", edit)
        with pytest.raises(ShapeMismatchError):
            read_dataset(tmp_path / "s")

    def test_truncated_blob(self, scene, tmp_path):
        write_dataset(scene, tmp_path / "s")
        blob = next((tmp_path / "s").glob("frame_0000_images.bin"))
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(TruncatedBlobError):
            read_dataset(tmp_path / "s")
