"""Dataset loading and map export.

Dataset layout (one directory per sequence):

    <root>/color/%06d.png        8-bit RGB
    <root>/depth/%06d.png        16-bit, depth_scale units per meter, 0 = invalid
    <root>/pose/%06d.txt         4x4 camera-to-world, row major
    <root>/intrinsics.txt        fx fy cx cy width height depth_scale
    <root>/masks/%06d.png        optional 16-bit id map, 0 = unlabeled
    <root>/gt/vertices.ply       optional ground-truth vertex positions
    <root>/gt/labels.json        optional per-vertex instance/semantic ids

Exports written by :func:`export_map`:

    map_instances.ply    x y z (float32), red green blue (uint8), instance_id (uint16)
    instances.json       [{id, centroid, aabb_min, aabb_max, num_queries, point_count}]
    features.bin         magic "OVIF", uint32 dim, uint32 count, count*dim float32 LE
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import DataError

FEATURES_MAGIC = b"OVIF"


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DataError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DataError(
                f"principal point ({self.cx},{self.cy}) outside {self.width}x{self.height}"
            )

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def inverse(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise DataError(f"pose shapes {r.shape}/{t.shape} invalid")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise DataError("rotation is not orthonormal within 1e-6")
        if np.linalg.det(r) < 0:
            raise DataError("rotation has negative determinant")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to an (N, 3) array of points."""
        return points @ self.rotation.T + self.translation


@dataclass(frozen=True)
class Frame:
    index: int
    color: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) float32 meters, 0 = invalid
    pose: Pose
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        h, w = self.intrinsics.height, self.intrinsics.width
        if self.color.shape[:2] != (h, w) or self.depth.shape != (h, w):
            raise DataError(
                f"frame {self.index}: raster shapes {self.color.shape}/{self.depth.shape} "
                f"do not match intrinsics {w}x{h}"
            )
        if not np.all(np.isfinite(self.depth)) or np.any(self.depth < 0):
            raise DataError(f"frame {self.index}: depth has negative or non-finite values")


@dataclass
class MaskSet:
    """Disjoint binary entity masks for one frame; ids are file-local."""

    frame_index: int
    ids: list[int] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.masks)


@dataclass
class GroundTruth:
    vertices: np.ndarray  # (N, 3) float64
    instance_ids: np.ndarray  # (N,) int
    semantic_ids: np.ndarray  # (N,) int
    label_names: list[str]

    def __post_init__(self):
        n = len(self.vertices)
        if len(self.instance_ids) != n or len(self.semantic_ids) != n:
            raise DataError("ground truth per-vertex arrays have mismatched lengths")


# ---------------------------------------------------------------------------
# sequence reading
# ---------------------------------------------------------------------------


def _read_png(path: Path) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    try:
        return np.asarray(Image.open(path))
    except Exception as exc:  # corrupt file
        raise DataError(f"cannot read image {path}: {exc}") from exc


def _read_pose(path: Path) -> Pose:
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    try:
        m = np.loadtxt(path, dtype=np.float64).reshape(4, 4)
    except Exception as exc:
        raise DataError(f"cannot parse pose {path}: {exc}") from exc
    if not np.allclose(m[3], [0, 0, 0, 1], atol=1e-6):
        raise DataError(f"pose {path}: last row is not [0 0 0 1]")
    return Pose(m[:3, :3], m[:3, 3])


class SequenceReader:
    """Random access to one dataset directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        intr = self.root / "intrinsics.txt"
        if not intr.is_file():
            raise DataError(f"missing file: {intr}")
        vals = intr.read_text().split()
        if len(vals) != 7:
            raise DataError(f"{intr}: expected 7 values (fx fy cx cy width height depth_scale)")
        fx, fy, cx, cy, w, h, scale = (float(v) for v in vals)
        self.intrinsics = CameraIntrinsics(fx, fy, cx, cy, int(w), int(h))
        self.depth_scale = scale
        if self.depth_scale <= 0:
            raise DataError(f"{intr}: depth_scale must be positive")
        color_dir = self.root / "color"
        if not color_dir.is_dir():
            raise DataError(f"missing directory: {color_dir}")
        self.indices = sorted(int(p.stem) for p in color_dir.glob("*.png"))

    def __len__(self) -> int:
        return len(self.indices)

    def load_frame(self, index: int) -> Frame:
        color = _read_png(self.root / "color" / f"{index:06d}.png")
        if color.ndim != 3 or color.shape[2] < 3:
            raise DataError(f"frame {index}: color image is not RGB")
        color = np.ascontiguousarray(color[:, :, :3], dtype=np.uint8)
        raw = _read_png(self.root / "depth" / f"{index:06d}.png")
        if raw.ndim != 2:
            raise DataError(f"frame {index}: depth image is not single channel")
        depth = raw.astype(np.float32) / self.depth_scale
        pose = _read_pose(self.root / "pose" / f"{index:06d}.txt")
        if color.shape[:2] != depth.shape:
            raise DataError(
                f"frame {index}: color {color.shape[:2]} and depth {depth.shape} sizes differ"
            )
        return Frame(index, color, depth, pose, self.intrinsics)

    def has_mask_file(self, index: int) -> bool:
        return (self.root / "masks" / f"{index:06d}.png").is_file()

    def ground_truth_paths(self) -> tuple[Path, Path]:
        return self.root / "gt" / "vertices.ply", self.root / "gt" / "labels.json"


def load_sequence(root: str | Path, stride: int = 1) -> Iterator[Frame]:
    """Yield every stride-th frame of a sequence, in index order."""
    if stride < 1:
        raise DataError(f"stride must be >= 1, got {stride}")
    reader = SequenceReader(root)
    for idx in reader.indices[::stride]:
        yield reader.load_frame(idx)


def load_masks(root: str | Path, frame_index: int, bridge=None, color_path: Path | None = None) -> MaskSet:
    """Load the entity masks for one frame.

    Reads ``masks/%06d.png`` when present; otherwise asks the configured
    segmentation bridge to produce one, and fails if neither exists.
    Connected regions sharing an id form a single mask.
    """
    path = Path(root) / "masks" / f"{frame_index:06d}.png"
    if not path.is_file():
        if bridge is None:
            raise DataError(
                f"no mask source for frame {frame_index}: {path} is absent and no bridge configured"
            )
        img = color_path or Path(root) / "color" / f"{frame_index:06d}.png"
        path = Path(bridge.segment(img))
    idmap = _read_png(path)
    if idmap.ndim != 2:
        raise DataError(f"{path}: id map must be single channel")
    idmap = idmap.astype(np.int64)
    out = MaskSet(frame_index=frame_index)
    for seg_id in np.unique(idmap):
        if seg_id == 0:
            continue
        out.ids.append(int(seg_id))
        out.masks.append(idmap == seg_id)
    return out


def write_mask_image(path: str | Path, idmap: np.ndarray) -> None:
    """Write a 16-bit id-map PNG (0 = unlabeled)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(idmap.astype(np.uint16)).save(path)


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "float": ("<f4", 4),
    "float32": ("<f4", 4),
    "uchar": ("<u1", 1),
    "uint8": ("<u1", 1),
    "ushort": ("<u2", 2),
    "uint16": ("<u2", 2),
    "int": ("<i4", 4),
    "int32": ("<i4", 4),
    "double": ("<f8", 8),
    "float64": ("<f8", 8),
}


def write_ply(path: str | Path, columns: Sequence[tuple[str, str, np.ndarray]]) -> None:
    """Write a binary little-endian PLY with one vertex element.

    ``columns`` is a list of (name, ply_type, values) with equal lengths.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = len(columns[0][2]) if columns else 0
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {count}"]
    fields = []
    for name, ply_type, values in columns:
        if len(values) != count:
            raise ValueError("ply columns have unequal lengths")
        header.append(f"property {ply_type} {name}")
        fields.append((name, _PLY_TYPES[ply_type][0]))
    header.append("end_header")
    rec = np.zeros(count, dtype=fields)
    for name, _, values in columns:
        rec[name] = values
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


def read_ply(path: str | Path) -> dict[str, np.ndarray]:
    """Read a single-element PLY written by :func:`write_ply` (binary LE or ascii)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise DataError(f"{path}: not a PLY file")
        fmt = None
        count = 0
        props: list[tuple[str, str]] = []
        while True:
            line = fh.readline()
            if not line:
                raise DataError(f"{path}: truncated header")
            tokens = line.decode("ascii", "replace").split()
            if not tokens:
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                if tokens[1] != "vertex":
                    raise DataError(f"{path}: unsupported element {tokens[1]}")
                count = int(tokens[2])
            elif tokens[0] == "property":
                if tokens[1] == "list":
                    raise DataError(f"{path}: list properties unsupported")
                props.append((tokens[2], tokens[1]))
            elif tokens[0] == "end_header":
                break
        if fmt == "binary_little_endian":
            dtype = np.dtype([(name, _PLY_TYPES[t][0]) for name, t in props])
            rec = np.frombuffer(fh.read(dtype.itemsize * count), dtype=dtype, count=count)
        elif fmt == "ascii":
            raw = np.loadtxt(fh, ndmin=2) if count else np.zeros((0, len(props)))
            rec = {name: raw[:, i] for i, (name, _) in enumerate(props)}
            return {name: np.asarray(rec[name]) for name, _ in props}
        else:
            raise DataError(f"{path}: unsupported format {fmt}")
        return {name: np.array(rec[name]) for name, _ in props}


# ---------------------------------------------------------------------------
# features.bin
# ---------------------------------------------------------------------------


def write_features(path: str | Path, features: np.ndarray) -> None:
    """Write the per-instance feature matrix (count x dim float32)."""
    features = np.asarray(features, dtype="<f4")
    if features.ndim != 2:
        raise ValueError("features must be 2-D")
    count, dim = features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURES_MAGIC)
        fh.write(struct.pack("<II", dim, count))
        fh.write(features.tobytes())


def read_features(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    with open(path, "rb") as fh:
        if fh.read(4) != FEATURES_MAGIC:
            raise DataError(f"{path}: bad magic")
        dim, count = struct.unpack("<II", fh.read(8))
        body = fh.read(4 * dim * count)
    if len(body) != 4 * dim * count:
        raise DataError(f"{path}: truncated body")
    return np.frombuffer(body, dtype="<f4").reshape(count, dim).copy()


# ---------------------------------------------------------------------------
# map export / import
# ---------------------------------------------------------------------------


def instance_color(instance_id: int) -> tuple[int, int, int]:
    """Deterministic display color for an instance id (golden-ratio hue walk)."""
    hue = (instance_id * 0.61803398875) % 1.0
    i = int(hue * 6)
    f = hue * 6 - i
    v, p, q, t = 1.0, 0.15, 1.0 - 0.85 * f, 0.15 + 0.85 * f
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i % 6]
    return tuple(int(255 * c) for c in rgb)


def _round6(x) -> list[float]:
    return [round(float(v), 6) for v in np.asarray(x).ravel()]


def export_map(grid, superpoints, out_path: str | Path) -> dict:
    """Write the instance point cloud, metadata, and feature matrix.

    ``grid`` is a VoxelGrid, ``superpoints`` an iterable of SuperPoint. Only
    alive instances are exported; featureless instances get a zero feature
    row. Returns a manifest of written files and counts.
    """
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    points, labels = grid.surface_points()
    alive = sorted((sp for sp in superpoints if sp.alive), key=lambda sp: sp.id)
    keep = np.isin(labels, [sp.id for sp in alive]) if len(labels) else np.zeros(0, bool)
    points, labels = points[keep], labels[keep]

    colors = np.zeros((len(points), 3), dtype=np.uint8)
    for sp in alive:
        colors[labels == sp.id] = instance_color(sp.id)
    write_ply(
        out / "map_instances.ply",
        [
            ("x", "float", points[:, 0].astype(np.float32)),
            ("y", "float", points[:, 1].astype(np.float32)),
            ("z", "float", points[:, 2].astype(np.float32)),
            ("red", "uchar", colors[:, 0]),
            ("green", "uchar", colors[:, 1]),
            ("blue", "uchar", colors[:, 2]),
            ("instance_id", "ushort", labels.astype(np.uint16)),
        ],
    )

    meta = []
    dim = None
    rows = []
    for sp in alive:
        feat = sp.feature.read()
        if feat is not None:
            dim = len(feat)
    if dim is None:
        dim = 0
    for sp in alive:
        feat = sp.feature.read()
        rows.append(np.zeros(dim, np.float32) if feat is None else np.asarray(feat, np.float32))
        meta.append(
            {
                "id": sp.id,
                "centroid": _round6(sp.centroid) if sp.centroid is not None else None,
                "aabb_min": _round6(sp.aabb_min),
                "aabb_max": _round6(sp.aabb_max),
                "num_queries": sp.num_queries,
                "point_count": int(np.count_nonzero(labels == sp.id)),
            }
        )
    with open(out / "instances.json", "w") as fh:
        json.dump(meta, fh, indent=1)
        fh.write("\n")
    write_features(out / "features.bin", np.vstack(rows) if rows else np.zeros((0, dim), np.float32))
    return {
        "files": ["map_instances.ply", "instances.json", "features.bin"],
        "num_points": int(len(points)),
        "num_instances": len(alive),
        "feature_dim": dim,
    }


@dataclass
class MapExport:
    """An exported map read back from disk."""

    points: np.ndarray  # (N, 3)
    point_instance_ids: np.ndarray  # (N,)
    instances: list[dict]
    features: np.ndarray  # (num_instances, dim)

    def featured_ids(self) -> list[int]:
        return [m["id"] for m in self.instances if m["num_queries"] > 0]


def load_map(map_dir: str | Path) -> MapExport:
    map_dir = Path(map_dir)
    ply = read_ply(map_dir / "map_instances.ply")
    inst_path = map_dir / "instances.json"
    if not inst_path.is_file():
        raise DataError(f"missing file: {inst_path}")
    instances = json.loads(inst_path.read_text())
    features = read_features(map_dir / "features.bin")
    if len(features) != len(instances):
        raise DataError(f"{map_dir}: features.bin rows != instances.json entries")
    points = np.stack([ply["x"], ply["y"], ply["z"]], axis=1).astype(np.float64)
    return MapExport(points, ply["instance_id"].astype(np.int64), instances, features)


# ---------------------------------------------------------------------------
# ground truth
# ---------------------------------------------------------------------------


def write_ground_truth(root: str | Path, gt: GroundTruth) -> None:
    gt_dir = Path(root) / "gt"
    gt_dir.mkdir(parents=True, exist_ok=True)
    v = np.asarray(gt.vertices, dtype=np.float32)
    write_ply(
        gt_dir / "vertices.ply",
        [("x", "float", v[:, 0]), ("y", "float", v[:, 1]), ("z", "float", v[:, 2])],
    )
    with open(gt_dir / "labels.json", "w") as fh:
        json.dump(
            {
                "instance_ids": [int(i) for i in gt.instance_ids],
                "semantic_ids": [int(i) for i in gt.semantic_ids],
                "label_names": list(gt.label_names),
            },
            fh,
        )


def load_ground_truth(root: str | Path) -> GroundTruth:
    gt_dir = Path(root) / "gt"
    ply = read_ply(gt_dir / "vertices.ply")
    labels_path = gt_dir / "labels.json"
    if not labels_path.is_file():
        raise DataError(f"missing file: {labels_path}")
    raw = json.loads(labels_path.read_text())
    vertices = np.stack([ply["x"], ply["y"], ply["z"]], axis=1).astype(np.float64)
    return GroundTruth(
        vertices,
        np.asarray(raw["instance_ids"], dtype=np.int64),
        np.asarray(raw["semantic_ids"], dtype=np.int64),
        list(raw["label_names"]),
    )
