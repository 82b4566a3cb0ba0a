"""Analytic synthetic scenes: colored boxes/spheres rendered along camera orbits.

Depth comes from exact ray-primitive intersections (no rasterizer), colors are
flat per object, and per-frame instance masks plus per-vertex ground truth are
written in the standard dataset layout. These scenes back the test and
acceptance suites.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError
from .scene_io import CameraIntrinsics, GroundTruth, Pose, write_ground_truth, write_mask_image

COLOR_VALUES = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
    "magenta": (255, 0, 255),
    "cyan": (0, 255, 255),
}


@dataclass
class SceneObject:
    kind: str  # "box" | "sphere"
    center: np.ndarray
    size: float | np.ndarray  # sphere radius, or box full extents (3,)
    color_name: str

    @property
    def color(self) -> tuple[int, int, int]:
        return COLOR_VALUES[self.color_name]


@dataclass
class SyntheticScene:
    name: str
    objects: list[SceneObject]
    trajectory: list[Pose]
    intrinsics: CameraIntrinsics
    label_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.label_names:
            self.label_names = [o.color_name for o in self.objects]


def look_at_pose(camera_pos, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose with +z forward, +x right, +y down."""
    cam = np.asarray(camera_pos, np.float64)
    fwd = np.asarray(target, np.float64) - cam
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, np.float64))
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=1)
    return Pose(rot, cam)


def orbit_trajectory(target, radius, height, num, span_deg=360.0, start_deg=0.0) -> list[Pose]:
    poses = []
    target = np.asarray(target, np.float64)
    for i in range(num):
        if num > 1 and abs(span_deg - 360.0) > 1e-9:
            ang = np.deg2rad(start_deg + span_deg * i / (num - 1))
        else:
            ang = np.deg2rad(start_deg + span_deg * i / num)
        cam = target + np.array([radius * np.cos(ang), radius * np.sin(ang), height])
        poses.append(look_at_pose(cam, target))
    return poses


# ---------------------------------------------------------------------------
# ray casting
# ---------------------------------------------------------------------------


def _ray_sphere(origin, dirs, center, radius):
    oc = origin - center
    b = dirs @ oc
    c0 = oc @ oc - radius * radius
    disc = b * b - c0
    t = np.full(len(dirs), np.inf)
    ok = disc >= 0
    root = np.sqrt(np.maximum(disc, 0.0))
    near = -b - root
    far = -b + root
    tt = np.where(near > 1e-9, near, far)
    t[ok & (tt > 1e-9)] = tt[ok & (tt > 1e-9)]
    return t


def _ray_box(origin, dirs, center, extents):
    bmin = center - extents / 2.0
    bmax = center + extents / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (bmin - origin) * inv
        t2 = (bmax - origin) * inv
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    t = np.full(len(dirs), np.inf)
    hit = (tmax >= np.maximum(tmin, 1e-9)) & np.isfinite(tmin)
    tt = np.where(tmin > 1e-9, tmin, tmax)
    t[hit & (tt > 1e-9)] = tt[hit & (tt > 1e-9)]
    return t


def render_frame(scene: SyntheticScene, pose: Pose):
    """Exact (color, depth, idmap) rasters for one camera pose."""
    k = scene.intrinsics
    h, w = k.height, k.width
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    rays_cam = np.stack(
        [((us - k.cx) / k.fx).ravel(), ((vs - k.cy) / k.fy).ravel(), np.ones(h * w)], axis=1
    )
    norm = np.linalg.norm(rays_cam, axis=1)
    dirs_world = (rays_cam / norm[:, None]) @ pose.rotation.T
    origin = pose.translation

    best_t = np.full(h * w, np.inf)
    best_id = np.zeros(h * w, np.int32)
    for i, obj in enumerate(scene.objects, start=1):
        if obj.kind == "sphere":
            t = _ray_sphere(origin, dirs_world, obj.center, float(obj.size))
        elif obj.kind == "box":
            t = _ray_box(origin, dirs_world, obj.center, np.asarray(obj.size, np.float64))
        else:
            raise ConfigError(f"unknown object kind: {obj.kind}")
        closer = t < best_t
        best_t[closer] = t[closer]
        best_id[closer] = i

    depth = np.where(np.isfinite(best_t), best_t / norm, 0.0).reshape(h, w)
    idmap = best_id.reshape(h, w)
    color = np.zeros((h, w, 3), np.uint8)
    for i, obj in enumerate(scene.objects, start=1):
        color[idmap == i] = obj.color
    return color, depth.astype(np.float64), idmap.astype(np.uint16)


# ---------------------------------------------------------------------------
# ground truth sampling
# ---------------------------------------------------------------------------


def _sample_surface(obj: SceneObject, spacing: float) -> np.ndarray:
    if obj.kind == "sphere":
        r = float(obj.size)
        n = max(200, int(4 * np.pi * r * r / (spacing * spacing)))
        i = np.arange(n, dtype=np.float64)
        z = 1.0 - 2.0 * (i + 0.5) / n
        phi = i * np.pi * (3.0 - np.sqrt(5.0))
        rho = np.sqrt(np.maximum(0.0, 1.0 - z * z))
        pts = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1) * r
        return pts + obj.center
    ext = np.asarray(obj.size, np.float64)
    pts = []
    for axis in range(3):
        u_axis, v_axis = [a for a in range(3) if a != axis]
        nu = max(2, int(np.ceil(ext[u_axis] / spacing)) + 1)
        nv = max(2, int(np.ceil(ext[v_axis] / spacing)) + 1)
        uu, vv = np.meshgrid(np.linspace(0, ext[u_axis], nu), np.linspace(0, ext[v_axis], nv))
        for sign in (-0.5, 0.5):
            face = np.zeros((uu.size, 3))
            face[:, axis] = sign * ext[axis]
            face[:, u_axis] = uu.ravel() - ext[u_axis] / 2
            face[:, v_axis] = vv.ravel() - ext[v_axis] / 2
            pts.append(face + obj.center)
    return np.vstack(pts)


def scene_ground_truth(scene: SyntheticScene, spacing: float = 0.03) -> GroundTruth:
    verts, inst, sem = [], [], []
    for i, obj in enumerate(scene.objects):
        p = _sample_surface(obj, spacing)
        verts.append(p)
        inst.append(np.full(len(p), i + 1))
        sem.append(np.full(len(p), i))
    return GroundTruth(
        np.vstack(verts), np.concatenate(inst), np.concatenate(sem), list(scene.label_names)
    )


# ---------------------------------------------------------------------------
# scene catalog
# ---------------------------------------------------------------------------


def _intrinsics(width: int, height: int) -> CameraIntrinsics:
    f = 0.8 * width
    return CameraIntrinsics(f, f, width / 2.0, height / 2.0, width, height)


def make_scene(name: str, frames: int | None = None, width: int = 320, height: int = 240) -> SyntheticScene:
    intr = _intrinsics(width, height)
    if name == "boxes3":
        n = frames or 120
        objs = []
        for i, cname in enumerate(["red", "green", "blue"]):
            ang = 2 * np.pi * i / 3
            objs.append(
                SceneObject(
                    "box",
                    np.array([1.0 * np.cos(ang), 1.0 * np.sin(ang), 0.3]),
                    np.array([0.6, 0.6, 0.6]),
                    cname,
                )
            )
        traj = orbit_trajectory([0.0, 0.0, 0.3], radius=2.8, height=1.2, num=n)
        return SyntheticScene(name, objs, traj, intr)
    if name == "orbit-sphere":
        n = frames or 36
        objs = [SceneObject("sphere", np.array([0.0, 0.0, 0.0]), 0.5, "red")]
        traj = orbit_trajectory([0.0, 0.0, 0.0], radius=2.0, height=0.6, num=n)
        return SyntheticScene(name, objs, traj, intr)
    if name == "revisit":
        objs = []
        for i, cname in enumerate(["red", "green", "blue"]):
            ang = 2 * np.pi * i / 3 + np.pi / 6
            objs.append(
                SceneObject("sphere", np.array([0.55 * np.cos(ang), 0.55 * np.sin(ang), 0.3]), 0.22, cname)
            )
        traj = []
        for radius in (1.9, 1.7, 1.5, 1.3):
            traj += orbit_trajectory(
                [0.0, 0.0, 0.3], radius=radius, height=0.9, num=14, span_deg=110.0
            )
        return SyntheticScene(name, objs, traj, intr)
    raise ConfigError(f"unknown scene: {name} (expected boxes3 | orbit-sphere | revisit)")


# ---------------------------------------------------------------------------
# writing
# ---------------------------------------------------------------------------


def _split_mask_halves(idmap: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Split every instance mask into two halves along a random line."""
    out = np.zeros_like(idmap)
    for obj_id in np.unique(idmap):
        if obj_id == 0:
            continue
        ys, xs = np.nonzero(idmap == obj_id)
        cy, cx = ys.mean(), xs.mean()
        ang = rng.uniform(0, np.pi)
        side = (xs - cx) * np.cos(ang) + (ys - cy) * np.sin(ang) >= 0
        out[ys[side], xs[side]] = 2 * obj_id - 1
        out[ys[~side], xs[~side]] = 2 * obj_id
    return out


def render_synthetic(
    scene: SyntheticScene,
    out_dir: str | Path,
    depth_scale: float = 5000.0,
    write_masks: bool = True,
    split_masks_seed: int | None = None,
    gt_spacing: float = 0.03,
) -> Path:
    """Write the scene as a dataset directory; returns the root path."""
    root = Path(out_dir)
    for sub in ("color", "depth", "pose"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    k = scene.intrinsics
    (root / "intrinsics.txt").write_text(
        f"{k.fx} {k.fy} {k.cx} {k.cy} {k.width} {k.height} {depth_scale}\n"
    )
    rng = np.random.default_rng(split_masks_seed) if split_masks_seed is not None else None
    for idx, pose in enumerate(scene.trajectory):
        color, depth, idmap = render_frame(scene, pose)
        Image.fromarray(color).save(root / "color" / f"{idx:06d}.png")
        Image.fromarray(np.round(depth * depth_scale).astype(np.uint16)).save(
            root / "depth" / f"{idx:06d}.png"
        )
        np.savetxt(root / "pose" / f"{idx:06d}.txt", pose.matrix(), fmt="%.17g")
        if write_masks:
            masks = _split_mask_halves(idmap, rng) if rng is not None else idmap
            write_mask_image(root / "masks" / f"{idx:06d}.png", masks)
    write_ground_truth(root, scene_ground_truth(scene, gt_spacing))
    return root
