"""Per-instance semantic features: crop generation, fusion, and text queries.

A feature provider turns image regions and text into fixed-dimension
embeddings. Selected views contribute one unmasked crop per pad scale plus a
masked crop; their mean is folded into the instance's running feature, by
default weighted by the number of visible object pixels.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ProviderError

COLOR_LEXICON = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
    "purple": (0.5, 0.0, 1.0),
    "pink": (1.0, 0.5, 0.75),
    "gray": (0.5, 0.5, 0.5),
    "brown": (0.55, 0.27, 0.07),
}


@dataclass
class Embedding:
    values: np.ndarray
    weight: float = 1.0


def validate_embedding(emb: Embedding, dim: int) -> np.ndarray:
    v = np.asarray(emb.values, dtype=np.float64).ravel()
    if v.shape != (dim,):
        raise ProviderError(f"provider returned dimension {v.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(v)):
        raise ProviderError("provider returned non-finite embedding values")
    return v


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


# ---------------------------------------------------------------------------
# feature accumulators
# ---------------------------------------------------------------------------


class RunningFeature:
    """Visibility-weighted running mean of per-view means.

    With ``uniform=True`` every update counts as weight 1 (plain averaging).
    """

    def __init__(self, uniform: bool = False):
        self.mean: np.ndarray | None = None
        self.w_sum = 0.0
        self.uniform = uniform

    def update(self, view_mean: np.ndarray, w: float, seq: int = 0) -> None:
        if self.uniform:
            w = 1.0
        if self.mean is None:
            self.mean = np.zeros_like(view_mean)
        denom = w + self.w_sum
        self.mean = (self.w_sum / denom) * self.mean + (w / denom) * view_mean
        self.w_sum += w

    def read(self) -> np.ndarray | None:
        return None if self.w_sum == 0 else self.mean

    def absorb(self, other: "RunningFeature") -> None:
        if other.w_sum == 0:
            return
        if self.w_sum == 0:
            self.mean, self.w_sum = other.mean, other.w_sum
            return
        total = self.w_sum + other.w_sum
        self.mean = (self.w_sum * self.mean + other.w_sum * other.mean) / total
        self.w_sum = total


class ClusterFeature:
    """Keeps the most recent per-view means and reads back the most central one.

    ``mode`` is ``max_cos`` (maximum mean cosine similarity to the others) or
    ``min_l1`` (minimum mean L1 distance). Ties pick the earliest view.
    """

    def __init__(self, mode: str, capacity: int = 64):
        self.mode = mode
        self.capacity = capacity
        self.views: list[tuple[int, np.ndarray]] = []
        self.w_sum = 0.0
        self._seq = 0

    def update(self, view_mean: np.ndarray, w: float, seq: int | None = None) -> None:
        if seq is None:
            seq = self._seq
        self._seq = max(self._seq, seq) + 1
        self.views.append((seq, view_mean))
        self.views = sorted(self.views, key=lambda t: t[0])[-self.capacity :]
        self.w_sum += w

    def read(self) -> np.ndarray | None:
        if not self.views:
            return None
        if len(self.views) == 1:
            return self.views[0][1]
        best_key, best_vec = None, None
        for i, (seq, v) in enumerate(self.views):
            others = [u for j, (_, u) in enumerate(self.views) if j != i]
            if self.mode == "max_cos":
                score = -float(np.mean([cosine(v, u) for u in others]))
            else:
                score = float(np.mean([np.abs(v - u).sum() for u in others]))
            key = (score, seq)
            if best_key is None or key < best_key:
                best_key, best_vec = key, v
        return best_vec

    def absorb(self, other: "ClusterFeature") -> None:
        self.views = sorted(self.views + other.views, key=lambda t: t[0])[-self.capacity :]
        self.w_sum += other.w_sum
        self._seq = max(self._seq, other._seq)


FUSION_STRATEGIES = ("weighted", "averaging", "cluster_max_cos", "cluster_min_l1")


def make_feature_accumulator(strategy: str = "weighted", cluster_capacity: int = 64):
    if strategy == "weighted":
        return RunningFeature(uniform=False)
    if strategy == "averaging":
        return RunningFeature(uniform=True)
    if strategy == "cluster_max_cos":
        return ClusterFeature("max_cos", cluster_capacity)
    if strategy == "cluster_min_l1":
        return ClusterFeature("min_l1", cluster_capacity)
    raise ProviderError(f"unknown fusion strategy: {strategy}")


def fuse_update(sp, f1: Embedding, f2: Embedding, w_k: float, seq: int | None = None) -> None:
    """Fold one selected view's two embeddings into the instance feature."""
    v1 = np.asarray(f1.values, dtype=np.float64).ravel()
    v2 = validate_embedding(f2, len(v1))
    if not np.all(np.isfinite(v1)):
        raise ProviderError("provider returned non-finite embedding values")
    sp.feature.update(0.5 * (v1 + v2), float(w_k), seq if seq is not None else 0)


# ---------------------------------------------------------------------------
# crops
# ---------------------------------------------------------------------------


@dataclass
class CropJob:
    frame_index: int
    instance_id: int
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1 (half open)
    mask: np.ndarray  # bool raster local to bbox
    scale: float
    crop_type: int
    pixel_weight: int


def _scaled_bbox(x0, y0, x1, y1, scale, width, height):
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    hw, hh = 0.5 * (x1 - x0) * scale, 0.5 * (y1 - y0) * scale
    nx0 = max(0, int(np.floor(cx - hw)))
    ny0 = max(0, int(np.floor(cy - hh)))
    nx1 = min(width, int(np.ceil(cx + hw)))
    ny1 = min(height, int(np.ceil(cy + hh)))
    return nx0, ny0, max(nx1, nx0 + 1), max(ny1, ny0 + 1)


def make_crops(frame, obs, pad_scales=(1.0, 1.5)) -> list[CropJob]:
    """One padded crop per scale around the observation's mask bounding box."""
    ys, xs = np.nonzero(obs.mask)
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    h, w = obs.mask.shape
    jobs = []
    for i, scale in enumerate(pad_scales):
        bx0, by0, bx1, by1 = _scaled_bbox(x0, y0, x1, y1, scale, w, h)
        jobs.append(
            CropJob(
                frame_index=frame.index,
                instance_id=obs.instance_id,
                bbox=(bx0, by0, bx1, by1),
                mask=obs.mask[by0:by1, bx0:bx1].copy(),
                scale=float(scale),
                crop_type=i,
                pixel_weight=obs.pixel_count,
            )
        )
    return jobs


def extract_view_features(color: np.ndarray, jobs: list[CropJob], provider):
    """Run the provider on one selected view's crops.

    Returns (f1, f2, calls): f1 averages the unmasked crop embeddings over
    scales, f2 is the masked embedding at the first (unit) scale.
    """
    vecs = []
    calls = []
    for job in jobs:
        emb = provider.embed_image_region(
            color, job.bbox, key=(job.frame_index, job.instance_id, job.crop_type)
        )
        vecs.append(validate_embedding(emb, provider.dim))
        calls.append(job.instance_id)
    base = jobs[0]
    masked = provider.embed_masked_region(
        color, base.bbox, base.mask, key=(base.frame_index, base.instance_id, len(jobs))
    )
    calls.append(base.instance_id)
    f1 = Embedding(np.mean(vecs, axis=0))
    f2 = Embedding(validate_embedding(masked, provider.dim))
    return f1, f2, calls


# ---------------------------------------------------------------------------
# providers
# ---------------------------------------------------------------------------


class MockProvider:
    """Deterministic provider for model-free runs and tests.

    Image regions embed as their L2-normalized mean RGB lifted into dimension
    ``dim`` by a fixed orthonormal projection, so cosine similarity in
    embedding space equals cosine similarity of mean colors. Text maps color
    words to the matching canonical RGB axes.
    """

    def __init__(self, dim: int = 16, seed: int = 0):
        if dim < 3:
            raise ProviderError("mock provider needs dim >= 3")
        self.dim = dim
        rng = np.random.default_rng(seed)
        basis, _ = np.linalg.qr(rng.standard_normal((dim, 3)))
        self._basis = basis  # (dim, 3), orthonormal columns

    def _lift(self, rgb: np.ndarray) -> Embedding:
        v = np.asarray(rgb, dtype=np.float64)
        norm = np.linalg.norm(v)
        if norm > 0:
            v = v / norm
        return Embedding((self._basis @ v).astype(np.float64))

    def embed_image_region(self, image: np.ndarray, bbox, key=None) -> Embedding:
        x0, y0, x1, y1 = bbox
        region = image[y0:y1, x0:x1].reshape(-1, 3)
        if len(region) == 0:
            return self._lift(np.zeros(3))
        return self._lift(region.mean(axis=0) / 255.0)

    def embed_masked_region(self, image: np.ndarray, bbox, mask: np.ndarray, key=None) -> Embedding:
        x0, y0, x1, y1 = bbox
        region = image[y0:y1, x0:x1]
        sel = region[mask]
        if len(sel) == 0:
            return self._lift(np.zeros(3))
        return self._lift(sel.reshape(-1, 3).mean(axis=0) / 255.0)

    def embed_text(self, text: str) -> Embedding:
        words = [w.strip(".,!?").lower() for w in text.split()]
        hits = [COLOR_LEXICON[w] for w in words if w in COLOR_LEXICON]
        if hits:
            return self._lift(np.mean(hits, axis=0))
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        rgb = np.frombuffer(digest[:3], dtype=np.uint8) / 255.0
        return self._lift(rgb)


class PrecomputedProvider:
    """Reads per-crop embeddings from ``<root>/embeds/%06d_%04d_%d.f32`` files."""

    def __init__(self, root):
        from pathlib import Path

        self.embed_dir = Path(root) / "embeds"
        if not self.embed_dir.is_dir():
            raise ProviderError(f"no precomputed embeddings under {self.embed_dir}")
        files = sorted(self.embed_dir.glob("*.f32"))
        if not files:
            raise ProviderError(f"no .f32 files under {self.embed_dir}")
        self.dim = len(np.fromfile(files[0], dtype="<f4"))

    def _load(self, key) -> Embedding:
        if key is None:
            raise ProviderError("precomputed provider requires a (frame, instance, crop) key")
        frame, instance, crop_type = key
        path = self.embed_dir / f"{frame:06d}_{instance:04d}_{crop_type}.f32"
        if not path.is_file():
            raise ProviderError(f"missing precomputed embedding: {path}")
        v = np.fromfile(path, dtype="<f4").astype(np.float64)
        if len(v) != self.dim:
            raise ProviderError(f"{path}: dimension {len(v)} != {self.dim}")
        return Embedding(v)

    def embed_image_region(self, image, bbox, key=None) -> Embedding:
        return self._load(key)

    def embed_masked_region(self, image, bbox, mask, key=None) -> Embedding:
        return self._load(key)

    def embed_text(self, text: str) -> Embedding:
        raise ProviderError("precomputed provider cannot embed text; use mock or bridge")


# ---------------------------------------------------------------------------
# queries
# ---------------------------------------------------------------------------


def rank_by_similarity(features_by_id: dict[int, np.ndarray | None], text_vec: np.ndarray):
    """Descending (id, cosine) over featured instances; ties prefer smaller id."""
    scored = []
    for inst_id, feat in features_by_id.items():
        if feat is None:
            continue
        scored.append((inst_id, cosine(np.asarray(feat, np.float64), text_vec)))
    return sorted(scored, key=lambda t: (-t[1], t[0]))


def query(superpoints, text_embedding: Embedding):
    feats = {sp.id: sp.feature.read() for sp in superpoints if sp.alive}
    return rank_by_similarity(feats, np.asarray(text_embedding.values, np.float64))


def assign_labels_features(
    features_by_id: dict[int, np.ndarray | None], label_set: list[str], provider
) -> dict[int, int]:
    """Best label index per featured instance; ties prefer the smaller index."""
    if not label_set:
        raise ProviderError("label set is empty")
    label_vecs = [validate_embedding(provider.embed_text(t), provider.dim) for t in label_set]
    out = {}
    for inst_id in sorted(features_by_id):
        feat = features_by_id[inst_id]
        if feat is None:
            continue
        sims = [cosine(np.asarray(feat, np.float64), lv) for lv in label_vecs]
        out[inst_id] = int(np.argmax(sims))
    return out


def assign_labels(superpoints, label_set: list[str], provider) -> dict[int, int]:
    feats = {sp.id: sp.feature.read() for sp in superpoints if sp.alive}
    return assign_labels_features(feats, label_set, provider)


# ---------------------------------------------------------------------------
# heat maps
# ---------------------------------------------------------------------------


def colormap(t: float) -> tuple[int, int, int]:
    """Blue -> cyan -> green -> yellow -> red ramp over [0, 1]."""
    t = min(max(float(t), 0.0), 1.0)
    stops = [(0.0, 0.0, 1.0), (0.0, 1.0, 1.0), (0.0, 1.0, 0.0), (1.0, 1.0, 0.0), (1.0, 0.0, 0.0)]
    x = t * (len(stops) - 1)
    i = min(int(x), len(stops) - 2)
    f = x - i
    rgb = [(1 - f) * stops[i][c] + f * stops[i + 1][c] for c in range(3)]
    return tuple(int(round(255 * c)) for c in rgb)


def heatmap_point_colors(point_ids: np.ndarray, sims: dict[int, float | None]) -> np.ndarray:
    """Per-point colors from per-instance similarities (None/missing -> black)."""
    valued = [s for s in sims.values() if s is not None]
    lo = min(valued) if valued else 0.0
    hi = max(valued) if valued else 1.0
    span = hi - lo
    colors = np.zeros((len(point_ids), 3), np.uint8)
    for inst_id, s in sims.items():
        if s is None:
            continue
        t = 0.5 if span == 0 else (s - lo) / span
        colors[point_ids == inst_id] = colormap(t)
    return colors


def export_heatmap(points: np.ndarray, point_ids: np.ndarray, sims: dict[int, float | None], out_path) -> None:
    from .scene_io import write_ply

    colors = heatmap_point_colors(point_ids, sims)
    pts = np.asarray(points, np.float32)
    write_ply(
        out_path,
        [
            ("x", "float", pts[:, 0]),
            ("y", "float", pts[:, 1]),
            ("z", "float", pts[:, 2]),
            ("red", "uchar", colors[:, 0]),
            ("green", "uchar", colors[:, 1]),
            ("blue", "uchar", colors[:, 2]),
        ],
    )
