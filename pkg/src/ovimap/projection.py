"""Depth-guided projection of the instance map into a camera frame.

Instead of marching rays from the camera, each pixel with valid sensor depth
samples the grid at its backprojected point and at whole-voxel offsets along
the ray within a small band. The first labeled near-surface voxel (|tsdf|
below one voxel) claims the pixel. Pixels whose measured depth disagrees with
the map stay unassigned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .instance_map import VoxelGrid, pack_keys
from .scene_io import Frame


@dataclass
class InstanceObservation:
    frame_index: int
    instance_id: int
    mask: np.ndarray  # (H, W) bool
    visible_points: np.ndarray  # (pixel_count, 3) matched voxel centers
    pixel_count: int


def project_instances(
    grid: VoxelGrid, frame: Frame, depth_band: float | None = None
) -> list[InstanceObservation]:
    """Occlusion-aware per-instance masks of the map in ``frame``."""
    if not grid.blocks:
        return []
    band = depth_band if depth_band is not None else 2.0 * grid.voxel_size
    depth = frame.depth
    h, w = depth.shape
    vs_idx, us_idx = np.nonzero(depth > 0)
    if len(vs_idx) == 0:
        return []
    d = depth[vs_idx, us_idx].astype(np.float64)
    k = frame.intrinsics
    rays_cam = np.stack(
        [(us_idx - k.cx) / k.fx, (vs_idx - k.cy) / k.fy, np.ones(len(us_idx))], axis=1
    )
    rays_world = rays_cam @ frame.pose.rotation.T
    ray_scale = np.linalg.norm(rays_world, axis=1, keepdims=True)
    unit = rays_world / ray_scale
    surface = frame.pose.translation + rays_world * d[:, None]

    # offsets ordered by |offset|, nearer-to-camera first on ties
    n_off = int(np.floor(band / grid.voxel_size + 1e-9))
    offsets = [0.0]
    for j in range(1, n_off + 1):
        offsets += [-j * grid.voxel_size, j * grid.voxel_size]

    assigned = np.zeros(len(vs_idx), np.int32)
    matched_vox = np.full(len(vs_idx), -1, np.int64)
    pending = np.arange(len(vs_idx))
    for off in offsets:
        if len(pending) == 0:
            break
        pts = surface[pending] + unit[pending] * off
        tsdf, weight, label = grid.lookup(pts)
        hit = (weight > 0) & (label > 0) & (np.abs(tsdf) < grid.voxel_size)
        if hit.any():
            rows = pending[hit]
            assigned[rows] = label[hit]
            matched_vox[rows] = pack_keys(grid.voxel_indices(pts[hit]))
            pending = pending[~hit]

    out = []
    for inst_id in np.unique(assigned[assigned > 0]):
        sel = assigned == inst_id
        mask = np.zeros((h, w), bool)
        mask[vs_idx[sel], us_idx[sel]] = True
        from .instance_map import unpack_keys

        centers = grid.voxel_centers(unpack_keys(matched_vox[sel]))
        out.append(
            InstanceObservation(
                frame_index=frame.index,
                instance_id=int(inst_id),
                mask=mask,
                visible_points=centers,
                pixel_count=int(sel.sum()),
            )
        )
    return out
