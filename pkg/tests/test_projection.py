import numpy as np
from scipy.ndimage import binary_dilation

from ovimap.geom_seg import RefinedSegment
from ovimap.instance_map import InstanceMap, LiftedSegment, VoxelGrid, lift
from ovimap.projection import project_instances
from ovimap.scene_io import Frame
from ovimap.synth import SceneObject, SyntheticScene, look_at_pose, orbit_trajectory, render_frame
from ovimap.synth import _intrinsics


def integrate_scene_views(scene, poses, voxel_size=0.05):
    """Feed rendered views through the real lift/associate/integrate path."""
    imap = InstanceMap(voxel_size=voxel_size, min_votes=5)
    for t, pose in enumerate(poses):
        color, depth, idmap = render_frame(scene, pose)
        frame = Frame(t, color, depth.astype(np.float32), pose, scene.intrinsics)
        pairs = []
        for obj_id in np.unique(idmap[idmap > 0]):
            seg = RefinedSegment(t, idmap == obj_id, int(obj_id))
            lifted = lift(seg, frame, max_depth=10.0)
            pairs.append((lifted, imap.associate(lifted)))
        imap.integrate_frame(frame, pairs)
    return imap


def one_box_scene(width=128, height=96):
    objs = [SceneObject("box", np.array([0.0, 0.0, 0.0]), np.array([0.4, 0.4, 0.4]), "red")]
    return SyntheticScene("t", objs, [], _intrinsics(width, height))


class TestProjectInstances:
    def test_empty_grid(self, flat_frame):
        assert project_instances(VoxelGrid(0.1), flat_frame) == []

    def test_silhouette_matches_analytic_projection(self):
        scene = one_box_scene()
        poses = orbit_trajectory([0, 0, 0], radius=1.6, height=0.7, num=12)
        imap = integrate_scene_views(scene, poses)
        pose = poses[0]
        color, depth, idmap = render_frame(scene, pose)
        frame = Frame(99, color, depth.astype(np.float32), pose, scene.intrinsics)
        obs = project_instances(imap.grid, frame)
        assert len(obs) == 1
        silhouette = idmap > 0  # analytic ray-box projection
        assert not (obs[0].mask & ~binary_dilation(silhouette, iterations=1)).any()
        assert not (silhouette & ~binary_dilation(obs[0].mask, iterations=1)).any()
        # the overwhelming majority of silhouette pixels must be recovered
        assert obs[0].pixel_count >= 0.95 * silhouette.sum()

    def test_full_occlusion_hides_back_box(self):
        front = SceneObject("box", np.array([0.0, 0.0, 1.0]), np.array([0.4, 0.4, 0.4]), "red")
        back = SceneObject("box", np.array([0.0, 0.0, 3.0]), np.array([0.4, 0.4, 0.4]), "green")
        intr = _intrinsics(128, 96)
        scene_front = SyntheticScene("f", [front], [], intr)
        scene_back = SyntheticScene("b", [back], [], intr)
        both = SyntheticScene("fb", [front, back], [], intr)

        imap = InstanceMap(voxel_size=0.05, min_votes=5)
        # integrate the front box from the origin, the back box from behind
        for t, (scene, pose) in enumerate(
            [
                (scene_front, look_at_pose([0, 0, -1.0], [0, 0, 1.0])),
                (scene_back, look_at_pose([0, 0, 5.0], [0, 0, 3.0])),
            ]
        ):
            color, depth, idmap = render_frame(scene, pose)
            frame = Frame(t, color, depth.astype(np.float32), pose, intr)
            seg = RefinedSegment(t, idmap > 0, 1)
            lifted = lift(seg, frame, max_depth=10.0)
            imap.integrate_frame(frame, [(lifted, imap.associate(lifted))])
        assert len(imap.alive_superpoints()) == 2

        pose = look_at_pose([0, 0, -1.0], [0, 0, 1.0])
        color, depth, _ = render_frame(both, pose)
        frame = Frame(9, color, depth.astype(np.float32), pose, intr)
        obs = project_instances(imap.grid, frame)
        ids = {o.instance_id for o in obs}
        assert 1 in ids and 2 not in ids  # the occluded box contributes nothing

    def test_occlusion_respects_depth_band(self):
        # a labeled voxel more than the band behind the measured surface never claims a pixel
        grid = VoxelGrid(0.1)
        # surface voxel of instance 2 at z = 3.0, but the sensor sees z = 1.0
        keys = grid.add_support(np.array([[0.0, 0.0, 3.05]]), 2)
        grid.integrate_samples(np.array([[0.0, 0.0, 3.05]]), np.array([0.0]))
        grid.stabilize(keys)
        intr = _intrinsics(16, 12)
        depth = np.full((12, 16), 1.0, np.float32)
        frame = Frame(
            0, np.zeros((12, 16, 3), np.uint8), depth, look_at_pose([0, 0, -1], [0, 0, 1]), intr
        )
        assert project_instances(grid, frame, depth_band=0.2) == []

    def test_visible_points_within_inflated_aabb(self):
        scene = one_box_scene()
        poses = orbit_trajectory([0, 0, 0], radius=1.6, height=0.7, num=8)
        imap = integrate_scene_views(scene, poses)
        sp = imap.alive_superpoints()[0]
        color, depth, _ = render_frame(scene, poses[3])
        frame = Frame(50, color, depth.astype(np.float32), poses[3], scene.intrinsics)
        obs = project_instances(imap.grid, frame)[0]
        vs = imap.grid.voxel_size
        assert np.all(obs.visible_points >= sp.aabb_min - vs - 1e-9)
        assert np.all(obs.visible_points <= sp.aabb_max + vs + 1e-9)
        assert obs.pixel_count == obs.mask.sum() == len(obs.visible_points)

    def test_deterministic(self):
        scene = one_box_scene()
        poses = orbit_trajectory([0, 0, 0], radius=1.6, height=0.7, num=6)
        imap = integrate_scene_views(scene, poses)
        color, depth, _ = render_frame(scene, poses[0])
        frame = Frame(7, color, depth.astype(np.float32), poses[0], scene.intrinsics)
        a = project_instances(imap.grid, frame)
        b = project_instances(imap.grid, frame)
        assert len(a) == len(b)
        for oa, ob in zip(a, b):
            assert oa.instance_id == ob.instance_id
            assert np.array_equal(oa.mask, ob.mask)
            assert np.array_equal(oa.visible_points, ob.visible_points)

    def test_invalid_depth_pixels_unassigned(self):
        scene = one_box_scene()
        poses = orbit_trajectory([0, 0, 0], radius=1.6, height=0.7, num=6)
        imap = integrate_scene_views(scene, poses)
        color, depth, idmap = render_frame(scene, poses[0])
        depth[:, :40] = 0.0  # knock out the left part of the sensor image
        frame = Frame(5, color, depth.astype(np.float32), poses[0], scene.intrinsics)
        obs = project_instances(imap.grid, frame)
        for o in obs:
            assert not o.mask[:, :40].any()
