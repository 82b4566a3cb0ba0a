import numpy as np
import pytest

from ovimap.scene_io import CameraIntrinsics, Frame, Pose
from ovimap.synth import make_scene, render_synthetic


@pytest.fixture(scope="session")
def boxes3_dataset(tmp_path_factory):
    scene = make_scene("boxes3", frames=24)
    root = tmp_path_factory.mktemp("boxes3") / "ds"
    render_synthetic(scene, root)
    return root


@pytest.fixture
def flat_frame():
    """A fronto-parallel plane at 2 m, 64x48."""
    intr = CameraIntrinsics(60.0, 60.0, 32.0, 24.0, 64, 48)
    depth = np.full((48, 64), 2.0, np.float32)
    color = np.zeros((48, 64, 3), np.uint8)
    return Frame(0, color, depth, Pose(np.eye(3), np.zeros(3)), intr)


def make_frame(depth, pose=None, fx=60.0):
    h, w = depth.shape
    intr = CameraIntrinsics(fx, fx, w / 2.0, h / 2.0, w, h)
    color = np.zeros((h, w, 3), np.uint8)
    if pose is None:
        pose = Pose(np.eye(3), np.zeros(3))
    return Frame(0, color, np.asarray(depth, np.float32), pose, intr)
