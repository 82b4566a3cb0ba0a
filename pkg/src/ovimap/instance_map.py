"""Global TSDF instance map: voxel grid, super-points, voting, fusion, merging.

Voxels live in sparse 8x8x8 blocks hashed by block index. Each voxel carries
a truncated signed distance, a fusion weight, an instance label, and a
per-instance support count; the label is always the argmax of the support
(ties keep the current label, otherwise the smaller id wins).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySegmentError, ConfigError
from .geom_seg import RefinedSegment
from .scene_io import Frame
from .semantics import make_feature_accumulator

BLOCK_SHIFT = 3
BLOCK_EDGE = 1 << BLOCK_SHIFT
BLOCK_VOL = BLOCK_EDGE**3
_COORD_OFFSET = 1 << 20  # packed keys hold 21 bits per signed axis


def pack_keys(ijk: np.ndarray) -> np.ndarray:
    """Pack (N, 3) integer voxel/block coordinates into int64 keys."""
    q = ijk.astype(np.int64) + _COORD_OFFSET
    return (q[:, 0] << 42) | (q[:, 1] << 21) | q[:, 2]


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    mask = (1 << 21) - 1
    return np.stack(
        [(keys >> 42) & mask, (keys >> 21) & mask, keys & mask], axis=1
    ) - _COORD_OFFSET


class _Block:
    __slots__ = ("tsdf", "weight", "label")

    def __init__(self):
        self.tsdf = np.zeros(BLOCK_VOL, np.float32)
        self.weight = np.zeros(BLOCK_VOL, np.float32)
        self.label = np.zeros(BLOCK_VOL, np.int32)


class VoxelGrid:
    """Sparse hashed TSDF volume with per-voxel instance support."""

    def __init__(self, voxel_size: float = 0.1, truncation: float | None = None):
        if voxel_size <= 0:
            raise ConfigError(f"voxel_size must be positive, got {voxel_size}")
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation) if truncation is not None else 4.0 * voxel_size
        if self.truncation < self.voxel_size:
            raise ConfigError("truncation must be >= voxel_size")
        self.blocks: dict[int, _Block] = {}
        self.support: dict[int, dict[int, int]] = {}

    # -- indexing -----------------------------------------------------------

    def voxel_indices(self, points: np.ndarray) -> np.ndarray:
        return np.floor(np.asarray(points) / self.voxel_size).astype(np.int64)

    def voxel_centers(self, ijk: np.ndarray) -> np.ndarray:
        return (np.asarray(ijk, dtype=np.float64) + 0.5) * self.voxel_size

    def _block(self, bkey: int) -> _Block:
        blk = self.blocks.get(bkey)
        if blk is None:
            blk = _Block()
            self.blocks[bkey] = blk
        return blk

    @staticmethod
    def _split(ijk: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Block keys and flat local offsets for (N, 3) voxel indices."""
        bkeys = pack_keys(ijk >> BLOCK_SHIFT)
        local = ijk & (BLOCK_EDGE - 1)
        flat = (local[:, 0] << (2 * BLOCK_SHIFT)) | (local[:, 1] << BLOCK_SHIFT) | local[:, 2]
        return bkeys, flat

    def _iter_runs(self, bkeys: np.ndarray):
        """Yield (block_key, positions) grouping indices by block."""
        order = np.argsort(bkeys, kind="stable")
        sorted_keys = bkeys[order]
        starts = np.flatnonzero(np.r_[True, sorted_keys[1:] != sorted_keys[:-1]])
        bounds = np.r_[starts, len(sorted_keys)]
        for i, s in enumerate(starts):
            yield int(sorted_keys[s]), order[s : bounds[i + 1]]

    # -- queries ------------------------------------------------------------

    def lookup(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-point (tsdf, weight, label); unallocated space reads as (0, 0, 0)."""
        pts = np.atleast_2d(points)
        n = len(pts)
        tsdf = np.zeros(n, np.float32)
        weight = np.zeros(n, np.float32)
        label = np.zeros(n, np.int32)
        if n == 0:
            return tsdf, weight, label
        ijk = self.voxel_indices(pts)
        bkeys, flat = self._split(ijk)
        for bkey, pos in self._iter_runs(bkeys):
            blk = self.blocks.get(bkey)
            if blk is None:
                continue
            idx = flat[pos]
            tsdf[pos] = blk.tsdf[idx]
            weight[pos] = blk.weight[idx]
            label[pos] = blk.label[idx]
        return tsdf, weight, label

    def lookup_labels(self, points: np.ndarray) -> np.ndarray:
        return self.lookup(points)[2]

    # -- updates ------------------------------------------------------------

    def integrate_samples(self, samples: np.ndarray, sdf: np.ndarray, w: float = 1.0) -> None:
        """Weighted-mean TSDF update at the voxels containing ``samples``."""
        if len(samples) == 0:
            return
        sdf = np.clip(sdf, -self.truncation, self.truncation)
        ijk = self.voxel_indices(samples)
        vkeys = pack_keys(ijk)
        uniq, inverse = np.unique(vkeys, return_inverse=True)
        add_w = np.bincount(inverse, minlength=len(uniq)).astype(np.float64) * w
        add_wd = np.bincount(inverse, weights=sdf, minlength=len(uniq)) * w
        bkeys, flat = self._split(unpack_keys(uniq))
        for bkey, pos in self._iter_runs(bkeys):
            blk = self._block(bkey)
            idx = flat[pos]
            w_old = blk.weight[idx].astype(np.float64)
            w_new = w_old + add_w[pos]
            blk.tsdf[idx] = ((w_old * blk.tsdf[idx] + add_wd[pos]) / w_new).astype(np.float32)
            blk.weight[idx] = w_new.astype(np.float32)

    def add_support(self, points: np.ndarray, instance_id: int) -> np.ndarray:
        """Count one observation of ``instance_id`` per point; returns touched voxel keys."""
        if len(points) == 0:
            return np.zeros(0, np.int64)
        vkeys = pack_keys(self.voxel_indices(points))
        uniq, counts = np.unique(vkeys, return_counts=True)
        bkeys, _ = self._split(unpack_keys(uniq))
        for bkey in np.unique(bkeys):
            self._block(int(bkey))
        support = self.support
        for key, c in zip(uniq.tolist(), counts.tolist()):
            d = support.get(key)
            if d is None:
                support[key] = {instance_id: c}
            else:
                d[instance_id] = d.get(instance_id, 0) + c
        return uniq

    def stabilize(self, touched_keys: np.ndarray) -> None:
        """Set each touched voxel's label to its support argmax (ties keep current)."""
        if len(touched_keys) == 0:
            return
        touched = np.unique(np.asarray(touched_keys, dtype=np.int64))
        bkeys, flat = self._split(unpack_keys(touched))
        for bkey, pos in self._iter_runs(bkeys):
            blk = self._block(bkey)
            for p in pos:
                d = self.support.get(int(touched[p]))
                if not d:
                    continue
                best = max(d.values())
                cands = [k for k, v in d.items() if v == best]
                cur = int(blk.label[flat[p]])
                blk.label[flat[p]] = cur if cur in cands else min(cands)

    def relabel(self, mapping: dict[int, int]) -> None:
        """Fold merged-away instance ids into their survivors (support + labels)."""
        if not mapping:
            return
        dirty = []
        for key, d in self.support.items():
            if any(k in mapping for k in d):
                folded: dict[int, int] = {}
                for k, v in d.items():
                    nk = mapping.get(k, k)
                    folded[nk] = folded.get(nk, 0) + v
                self.support[key] = folded
                dirty.append(key)
        if dirty:
            # map current labels first so the tie-break keeps the surviving id
            bkeys, flat = self._split(unpack_keys(np.asarray(dirty, np.int64)))
            for bkey, pos in self._iter_runs(bkeys):
                blk = self.blocks[bkey]
                for p in pos:
                    cur = int(blk.label[flat[p]])
                    if cur in mapping:
                        blk.label[flat[p]] = mapping[cur]
            self.stabilize(np.asarray(dirty, np.int64))

    # -- inspection ---------------------------------------------------------

    def surface_points(self) -> tuple[np.ndarray, np.ndarray]:
        """Centers and labels of labeled near-surface voxels (|tsdf| < voxel_size)."""
        pts, labels = [], []
        for bkey, blk in self.blocks.items():
            sel = (blk.weight > 0) & (blk.label > 0) & (np.abs(blk.tsdf) < self.voxel_size)
            idx = np.flatnonzero(sel)
            if idx.size == 0:
                continue
            base = unpack_keys(np.array([bkey]))[0] << BLOCK_SHIFT
            local = np.stack(
                [idx >> (2 * BLOCK_SHIFT), (idx >> BLOCK_SHIFT) & (BLOCK_EDGE - 1), idx & (BLOCK_EDGE - 1)],
                axis=1,
            )
            pts.append(self.voxel_centers(base + local))
            labels.append(blk.label[idx])
        if not pts:
            return np.zeros((0, 3)), np.zeros(0, np.int64)
        return np.vstack(pts), np.concatenate(labels).astype(np.int64)

    def total_support(self) -> int:
        return sum(sum(d.values()) for d in self.support.values())

    def num_voxels(self) -> int:
        return sum(int(np.count_nonzero(blk.weight > 0)) for blk in self.blocks.values())


# ---------------------------------------------------------------------------
# super-points and per-segment records
# ---------------------------------------------------------------------------


@dataclass
class SuperPoint:
    id: int
    aabb_min: np.ndarray = field(default_factory=lambda: np.full(3, np.inf))
    aabb_max: np.ndarray = field(default_factory=lambda: np.full(3, -np.inf))
    centroid: np.ndarray | None = None
    coverage: np.ndarray | None = None  # (180, 240) bool, lazily allocated
    feature: object = None
    alive: bool = True
    merged_into: int | None = None
    num_queries: int = 0

    def expand_aabb(self, points: np.ndarray) -> None:
        self.aabb_min = np.minimum(self.aabb_min, points.min(axis=0))
        self.aabb_max = np.maximum(self.aabb_max, points.max(axis=0))

    def aabb_center(self) -> np.ndarray:
        return 0.5 * (self.aabb_min + self.aabb_max)


@dataclass
class LiftedSegment:
    frame_index: int
    points: np.ndarray  # (N, 3) world
    pixel_count: int
    segment: RefinedSegment | None = None
    pixels: np.ndarray | None = None  # (N, 2) source (row, col), kept for fusion


@dataclass
class VoteRecord:
    frame_index: int
    votes: dict[int, int]
    assigned_id: int
    threshold: float


# ---------------------------------------------------------------------------
# per-segment operations
# ---------------------------------------------------------------------------


def lift(segment: RefinedSegment, frame: Frame, max_depth: float = 5.0) -> LiftedSegment:
    """Backproject a segment's masked pixels into world coordinates."""
    vs_idx, us_idx = np.nonzero(segment.mask)
    depth = frame.depth[vs_idx, us_idx]
    ok = (depth > 0) & (depth <= max_depth)
    if not ok.any():
        raise EmptySegmentError(f"segment has no usable depth in frame {frame.index}")
    us, vsy, d = us_idx[ok], vs_idx[ok], depth[ok].astype(np.float64)
    k = frame.intrinsics
    cam = np.stack([(us - k.cx) / k.fx * d, (vsy - k.cy) / k.fy * d, d], axis=1)
    return LiftedSegment(
        frame.index,
        frame.pose.transform(cam),
        int(ok.sum()),
        segment,
        pixels=np.stack([vsy, us], axis=1),
    )


def vote(lifted: LiftedSegment, grid: VoxelGrid) -> dict[int, int]:
    """Count, per existing instance, how many points fall in its voxels."""
    labels = grid.lookup_labels(lifted.points)
    labels = labels[labels > 0]
    if labels.size == 0:
        return {}
    ids, counts = np.unique(labels, return_counts=True)
    return {int(i): int(c) for i, c in zip(ids, counts)}


def association_threshold(num_points: int, theta_assoc: float, min_votes: int) -> float:
    return max(float(min_votes), theta_assoc * num_points)


def decide_association(
    votes: dict[int, int], num_points: int, theta_assoc: float, min_votes: int
) -> int | None:
    """The winning instance id, or None when a new instance is needed."""
    if not votes:
        return None
    best = max(votes.values())
    winner = min(k for k, v in votes.items() if v == best)
    if best >= association_threshold(num_points, theta_assoc, min_votes):
        return winner
    return None


# Grazing rays overestimate the distance to the surface; the per-ray signed
# distance is rescaled by the incidence cosine (floored to keep a usable band).
_MIN_INCIDENCE_COS = 0.35


def _incidence_cos(frame: Frame) -> np.ndarray:
    """Per-pixel |cos| between the viewing ray and the observed surface normal."""
    from .geom_seg import _camera_points, _normals

    depth = frame.depth.astype(np.float64)
    valid = depth > 0
    normals, _ = _normals(_camera_points(depth, frame), depth, valid)
    k = frame.intrinsics
    us, vs = np.meshgrid(np.arange(k.width), np.arange(k.height))
    rays = np.stack([(us - k.cx) / k.fx, (vs - k.cy) / k.fy, np.ones_like(depth)], axis=-1)
    rays /= np.linalg.norm(rays, axis=-1, keepdims=True)
    cos = np.abs(np.einsum("...k,...k->...", normals, rays))
    degenerate = ~np.any(normals != 0.0, axis=-1)
    return np.where(degenerate, 1.0, np.clip(cos, _MIN_INCIDENCE_COS, 1.0))


def integrate(
    frame: Frame,
    assigned: list[tuple[LiftedSegment, int]],
    grid: VoxelGrid,
    sample_step: float | None = None,
) -> np.ndarray:
    """Fuse assigned segments into the grid; returns the support-touched voxel keys.

    TSDF updates cover the truncation band around each observed surface point
    along its camera ray; support counts one observation per segment point.
    """
    cam = frame.pose.translation
    step = sample_step if sample_step is not None else grid.voxel_size
    n_steps = int(np.ceil(grid.truncation / step))
    offsets = np.arange(-n_steps, n_steps + 1, dtype=np.float64) * step
    incidence = _incidence_cos(frame) if assigned else None
    touched = []
    for lifted, inst_id in assigned:
        pts = lifted.points
        rel = pts - cam
        dist = np.linalg.norm(rel, axis=1, keepdims=True)
        unit = rel / np.maximum(dist, 1e-12)
        samples = (cam + unit[None, :, :] * (dist[None, :, :] + offsets[:, None, None])).reshape(-1, 3)
        if lifted.pixels is not None:
            cos = incidence[lifted.pixels[:, 0], lifted.pixels[:, 1]]
        else:
            cos = np.ones(len(pts))
        sdf = (-offsets[:, None] * cos[None, :]).reshape(-1)
        grid.integrate_samples(samples, sdf, w=1.0)
        touched.append(grid.add_support(pts, inst_id))
    return np.unique(np.concatenate(touched)) if touched else np.zeros(0, np.int64)


def stabilize_labels(grid: VoxelGrid, touched_keys: np.ndarray) -> None:
    grid.stabilize(touched_keys)


# ---------------------------------------------------------------------------
# the map: grid + super-points + vote history
# ---------------------------------------------------------------------------


class InstanceMap:
    """Owns the grid, the super-point set, and the vote history."""

    def __init__(
        self,
        voxel_size: float = 0.1,
        truncation: float | None = None,
        theta_assoc: float = 0.25,
        min_votes: int = 50,
        feature_strategy: str = "weighted",
        vote_history_cap: int = 0,
        cluster_capacity: int = 64,
    ):
        self.grid = VoxelGrid(voxel_size, truncation)
        self.superpoints: dict[int, SuperPoint] = {}
        self.vote_log: list[VoteRecord] = []
        self.theta_assoc = theta_assoc
        self.min_votes = min_votes
        self.feature_strategy = feature_strategy
        self.vote_history_cap = vote_history_cap
        self.cluster_capacity = cluster_capacity
        self._next_id = 1

    # -- super-point management ----------------------------------------------

    def new_superpoint(self) -> SuperPoint:
        sp = SuperPoint(
            id=self._next_id,
            feature=make_feature_accumulator(self.feature_strategy, self.cluster_capacity),
        )
        self.superpoints[sp.id] = sp
        self._next_id += 1
        return sp

    def alive_superpoints(self) -> list[SuperPoint]:
        return [sp for sp in self.superpoints.values() if sp.alive]

    def resolve_id(self, instance_id: int) -> int:
        """Follow merge redirects to the surviving id."""
        sp = self.superpoints.get(instance_id)
        while sp is not None and sp.merged_into is not None:
            sp = self.superpoints.get(sp.merged_into)
        return sp.id if sp is not None else instance_id

    # -- association ----------------------------------------------------------

    def associate(self, lifted: LiftedSegment) -> int:
        """Vote, pick or create an instance, and record the decision."""
        votes = vote(lifted, self.grid)
        winner = decide_association(votes, lifted.pixel_count, self.theta_assoc, self.min_votes)
        if winner is None:
            winner = self.new_superpoint().id
        self.vote_log.append(
            VoteRecord(
                lifted.frame_index,
                votes,
                winner,
                association_threshold(lifted.pixel_count, self.theta_assoc, self.min_votes),
            )
        )
        if self.vote_history_cap and len(self.vote_log) > self.vote_history_cap:
            del self.vote_log[: len(self.vote_log) - self.vote_history_cap]
        return winner

    def integrate_frame(self, frame: Frame, assigned: list[tuple[LiftedSegment, int]]) -> None:
        """Fuse a frame's assigned segments, then restabilize touched labels."""
        for lifted, inst_id in assigned:
            self.superpoints[inst_id].expand_aabb(lifted.points)
        touched = integrate(frame, assigned, self.grid)
        stabilize_labels(self.grid, touched)

    # -- merging ---------------------------------------------------------------

    def merge_superpoints(self, theta_merge: int = 3) -> dict[int, int]:
        """Union super-points that repeatedly co-vote above the association threshold.

        Returns the mapping {merged-away id: surviving id}.
        """
        alive = {sp.id for sp in self.alive_superpoints()}
        spa: dict[tuple[int, int], int] = {}
        for rec in self.vote_log:
            above = sorted(k for k, v in rec.votes.items() if v > rec.threshold and k in alive)
            for i in range(len(above)):
                for j in range(i + 1, len(above)):
                    pair = (above[i], above[j])
                    spa[pair] = spa.get(pair, 0) + 1

        parent = {i: i for i in alive}

        def find(x: int) -> int:
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for (a, b), count in spa.items():
            if count > theta_merge:
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)

        mapping = {i: find(i) for i in alive if find(i) != i}
        for dead_id, surv_id in mapping.items():
            dead, surv = self.superpoints[dead_id], self.superpoints[surv_id]
            surv.aabb_min = np.minimum(surv.aabb_min, dead.aabb_min)
            surv.aabb_max = np.maximum(surv.aabb_max, dead.aabb_max)
            if surv.centroid is None and dead.centroid is not None:
                surv.centroid = dead.centroid
            if dead.coverage is not None:
                if surv.coverage is None:
                    surv.coverage = dead.coverage
                else:
                    surv.coverage |= dead.coverage
            surv.feature.absorb(dead.feature)
            surv.num_queries += dead.num_queries
            dead.alive = False
            dead.merged_into = surv_id
        self.grid.relabel(mapping)
        return mapping
