import numpy as np
import pytest

from ovimap.scene_io import SequenceReader, load_ground_truth, load_masks
from ovimap.synth import (
    SceneObject,
    SyntheticScene,
    _intrinsics,
    look_at_pose,
    make_scene,
    orbit_trajectory,
    render_frame,
    render_synthetic,
    scene_ground_truth,
)

from oracles import ray_sphere_bruteforce


class TestRenderFrame:
    def test_unit_cube_two_meters_ahead(self):
        intr = _intrinsics(64, 48)
        scene = SyntheticScene(
            "t",
            [SceneObject("box", np.array([0.0, 0.0, 2.0]), np.array([1.0, 1.0, 1.0]), "red")],
            [],
            intr,
        )
        pose = look_at_pose([0.0, 0.0, 0.0], [0.0, 0.0, 2.0])
        _, depth, idmap = render_frame(scene, pose)
        assert depth[24, 32] == pytest.approx(1.5, abs=1e-9)
        assert idmap[24, 32] == 1

    def test_sphere_depth_matches_analytic(self):
        intr = _intrinsics(64, 48)
        center = np.array([0.2, -0.1, 0.0])
        scene = SyntheticScene("t", [SceneObject("sphere", center, 0.4, "red")], [], intr)
        pose = look_at_pose([1.5, 0.4, 0.5], center)
        _, depth, idmap = render_frame(scene, pose)
        ys, xs = np.nonzero(idmap)
        rng = np.random.default_rng(0)
        for i in rng.choice(len(ys), size=50, replace=False):
            v, u = ys[i], xs[i]
            ray_cam = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
            ray_world = pose.rotation @ ray_cam
            t = ray_sphere_bruteforce(pose.translation, ray_world, center, 0.4)
            # depth is the camera-frame z of the hit point
            hit = pose.translation + ray_world / np.linalg.norm(ray_world) * t
            cam_z = (pose.rotation.T @ (hit - pose.translation))[2]
            assert depth[v, u] == pytest.approx(cam_z, abs=1e-5)

    def test_object_outside_frustum_empty_mask(self):
        intr = _intrinsics(64, 48)
        scene = SyntheticScene(
            "t", [SceneObject("sphere", np.array([0.0, 0.0, -5.0]), 0.3, "red")], [], intr
        )
        pose = look_at_pose([0.0, 0.0, 5.0], [0.0, 0.0, 10.0])
        _, depth, idmap = render_frame(scene, pose)
        assert not idmap.any()
        assert not depth.any()

    def test_nearer_object_occludes(self):
        intr = _intrinsics(64, 48)
        scene = SyntheticScene(
            "t",
            [
                SceneObject("box", np.array([0.0, 0.0, 3.0]), np.array([2.0, 2.0, 0.2]), "red"),
                SceneObject("sphere", np.array([0.0, 0.0, 1.5]), 0.3, "green"),
            ],
            [],
            intr,
        )
        pose = look_at_pose([0.0, 0.0, 0.0], [0.0, 0.0, 1.0])
        _, depth, idmap = render_frame(scene, pose)
        assert idmap[24, 32] == 2  # the sphere wins the center pixel
        assert depth[24, 32] == pytest.approx(1.2, abs=1e-6)


class TestSceneCatalog:
    @pytest.mark.parametrize("name,expected_objects", [("boxes3", 3), ("orbit-sphere", 1), ("revisit", 3)])
    def test_scene_shapes(self, name, expected_objects):
        scene = make_scene(name)
        assert len(scene.objects) == expected_objects
        assert len(scene.trajectory) > 0

    def test_objects_do_not_intersect(self):
        for name in ("boxes3", "revisit"):
            scene = make_scene(name)
            for i, a in enumerate(scene.objects):
                for b in scene.objects[i + 1 :]:
                    gap = np.linalg.norm(a.center - b.center)
                    ra = float(np.max(a.size)) * (0.87 if a.kind == "box" else 1.0)
                    rb = float(np.max(b.size)) * (0.87 if b.kind == "box" else 1.0)
                    assert gap > ra + rb

    def test_every_object_visible_somewhere(self):
        for name in ("boxes3", "orbit-sphere", "revisit"):
            scene = make_scene(name, frames=12 if name == "boxes3" else None)
            seen = set()
            for pose in scene.trajectory:
                _, _, idmap = render_frame(scene, pose)
                seen |= set(np.unique(idmap[idmap > 0]).tolist())
            assert seen == set(range(1, len(scene.objects) + 1))

    def test_ground_truth_arrays_aligned(self):
        gt = scene_ground_truth(make_scene("boxes3"))
        assert len(gt.vertices) == len(gt.instance_ids) == len(gt.semantic_ids)
        assert set(gt.instance_ids) == {1, 2, 3}
        assert gt.label_names == ["red", "green", "blue"]


class TestRenderSynthetic:
    def test_dataset_loads_back(self, tmp_path):
        scene = make_scene("orbit-sphere", frames=4)
        root = render_synthetic(scene, tmp_path / "ds")
        reader = SequenceReader(root)
        assert len(reader) == 4
        frame = reader.load_frame(0)
        _, depth, idmap = render_frame(scene, scene.trajectory[0])
        assert np.allclose(frame.depth, depth, atol=1.0 / 5000.0 + 1e-6)
        masks = load_masks(root, 0)
        assert np.array_equal(masks.masks[0], idmap > 0)
        gt = load_ground_truth(root)
        assert gt.label_names == ["red"]

    def test_split_halves_partition_each_object(self, tmp_path):
        scene = make_scene("boxes3", frames=2)
        root = render_synthetic(scene, tmp_path / "ds", split_masks_seed=7)
        _, _, idmap = render_frame(scene, scene.trajectory[0])
        masks = load_masks(root, 0)
        assert len(masks) == 6  # each of 3 boxes split in two
        for obj_id in (1, 2, 3):
            halves = [m for mid, m in zip(masks.ids, masks.masks) if mid in (2 * obj_id - 1, 2 * obj_id)]
            assert len(halves) == 2
            assert np.array_equal(halves[0] | halves[1], idmap == obj_id)
            assert not (halves[0] & halves[1]).any()
