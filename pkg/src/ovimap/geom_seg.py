"""Geometric depth segmentation and entity-mask refinement.

``depth_segment`` groups pixels into connected components separated by depth
steps or surface-normal changes. ``mask_fusion`` splits each entity mask along
those geometric boundaries, so that two touching objects covered by one entity
proposal end up in separate segments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .scene_io import Frame


@dataclass
class GeometricSegmentation:
    label_raster: np.ndarray  # (H, W) int32, 0 = unassigned
    num_segments: int


@dataclass
class RefinedSegment:
    frame_index: int
    mask: np.ndarray  # (H, W) bool
    source_entity_id: int


def _camera_points(depth: np.ndarray, frame: Frame) -> np.ndarray:
    h, w = depth.shape
    k = frame.intrinsics
    us, vs = np.meshgrid(np.arange(w), np.arange(h))
    x = (us - k.cx) / k.fx * depth
    y = (vs - k.cy) / k.fy * depth
    return np.stack([x, y, depth], axis=-1)


# Normals are only trusted where the one-sided depth change stays below this
# fraction of the local depth; the normal cut never applies across a jump.
_RELIABLE_REL_JUMP = 0.02


def _one_sided_diff(points, depth, valid, axis):
    """Per-pixel difference along ``axis`` picking the smoother valid side."""
    fwd = np.zeros_like(points)
    bwd = np.zeros_like(points)
    inf = np.full(depth.shape, np.inf)
    fd, bd = inf.copy(), inf.copy()
    if axis == 1:
        step = points[:, 1:] - points[:, :-1]
        jump = np.where(valid[:, 1:] & valid[:, :-1], np.abs(depth[:, 1:] - depth[:, :-1]), np.inf)
        fwd[:, :-1], fd[:, :-1] = step, jump
        bwd[:, 1:], bd[:, 1:] = step, jump
    else:
        step = points[1:] - points[:-1]
        jump = np.where(valid[1:] & valid[:-1], np.abs(depth[1:] - depth[:-1]), np.inf)
        fwd[:-1], fd[:-1] = step, jump
        bwd[1:], bd[1:] = step, jump
    use_fwd = fd <= bd
    diff = np.where(use_fwd[..., None], fwd, bwd)
    jump = np.where(use_fwd, fd, bd)
    diff[~np.isfinite(jump)] = 0.0  # no valid neighbor on either side
    return diff, jump


def _normals(points: np.ndarray, depth: np.ndarray, valid: np.ndarray):
    """Unit normals plus a per-pixel reliability mask (no jump in the stencil)."""
    dx, jx = _one_sided_diff(points, depth, valid, axis=1)
    dy, jy = _one_sided_diff(points, depth, valid, axis=0)
    n = np.cross(dx, dy)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    norm[norm == 0] = 1.0
    n = n / norm
    reliable = valid & (jx <= _RELIABLE_REL_JUMP * depth) & (jy <= _RELIABLE_REL_JUMP * depth)
    n[~valid] = 0.0
    return n, reliable


def depth_segment(
    frame: Frame,
    normal_angle_thresh: float = 30.0,
    depth_step_thresh: float = 0.05,
) -> GeometricSegmentation:
    """Segment the depth image into geometrically coherent connected components.

    A 4-neighbor edge is cut when the depth difference exceeds
    ``depth_step_thresh`` meters per meter of depth, or when the normals of
    the two pixels differ by more than ``normal_angle_thresh`` degrees.
    Invalid-depth pixels get label 0.
    """
    depth = frame.depth
    h, w = depth.shape
    valid = depth > 0
    if not valid.any():
        return GeometricSegmentation(np.zeros((h, w), np.int32), 0)

    points = _camera_points(depth, frame)
    normals, reliable = _normals(points, depth, valid)
    cos_thresh = np.cos(np.deg2rad(normal_angle_thresh))

    flat = np.arange(h * w).reshape(h, w)
    rows, cols = [], []
    for axis in (0, 1):
        if axis == 0:
            a, b = (slice(None, -1), slice(None)), (slice(1, None), slice(None))
        else:
            a, b = (slice(None), slice(None, -1)), (slice(None), slice(1, None))
        da, db = depth[a], depth[b]
        ok = valid[a] & valid[b]
        step = np.abs(da - db) > depth_step_thresh * 0.5 * (da + db)
        bend = (
            (np.einsum("...k,...k->...", normals[a], normals[b]) < cos_thresh)
            & reliable[a]
            & reliable[b]
        )
        keep = ok & ~step & ~bend
        rows.append(flat[a][keep])
        cols.append(flat[b][keep])

    n = h * w
    edges = coo_matrix(
        (np.ones(sum(len(r) for r in rows), np.int8), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )
    _, cc = connected_components(edges, directed=False)

    # relabel so valid pixels get dense labels 1..K in first-seen scan order
    cc_valid = cc[valid.ravel()]
    first_seen, first_idx, inverse = np.unique(cc_valid, return_index=True, return_inverse=True)
    rank = np.empty(len(first_seen), np.int64)
    rank[np.argsort(first_idx)] = np.arange(len(first_seen))
    labels = np.zeros(n, np.int32)
    labels[valid.ravel()] = rank[inverse] + 1
    return GeometricSegmentation(labels.reshape(h, w), int(len(first_seen)))


def mask_fusion(entities, geo: GeometricSegmentation, min_area: int = 50) -> list[RefinedSegment]:
    """Split entity masks along geometric segment boundaries.

    Each output is the intersection of one entity mask with one geometric
    segment. Intersections below ``min_area`` merge into the entity's largest
    intersection; an entity whose only intersection is below ``min_area`` is
    dropped. Pixels outside every entity mask, and pixels without valid
    depth (geometric label 0), are discarded.
    """
    out: list[RefinedSegment] = []
    labels = geo.label_raster
    for entity_id, mask in zip(entities.ids, entities.masks):
        part_labels = labels[mask]
        part_labels = part_labels[part_labels > 0]
        if part_labels.size == 0:
            continue
        counts = np.bincount(part_labels)
        present = np.nonzero(counts)[0]
        anchor = present[np.argmax(counts[present])]
        big = [g for g in present if counts[g] >= min_area and g != anchor]
        small = [g for g in present if counts[g] < min_area and g != anchor]
        if len(present) == 1 and counts[anchor] < min_area:
            continue
        anchor_mask = mask & np.isin(labels, [anchor] + small)
        out.append(RefinedSegment(entities.frame_index, anchor_mask, entity_id))
        for g in big:
            out.append(RefinedSegment(entities.frame_index, mask & (labels == g), entity_id))
    return out
