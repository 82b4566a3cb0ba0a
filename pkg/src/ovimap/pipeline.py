"""Three-stage run orchestration.

Stage A segments keyframes (geometric depth segmentation + entity masks),
Stage B owns the voxel grid and super-points (lift, vote, associate,
integrate, stabilize, project, view-select, periodic merging), Stage C runs
the feature provider on selected crops. Stages talk through bounded queues of
immutable messages; feature results are applied in selection order, so the
concurrent pipeline and the forced-sequential mode produce identical maps.
"""

from __future__ import annotations

import json
import queue
import threading
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, EmptySegmentError, OvimapError
from .evaluation import EvalReport, instance_ap, project_to_gt, query_stats, semantic_miou
from .geom_seg import RefinedSegment, depth_segment, mask_fusion
from .instance_map import InstanceMap, lift
from .projection import project_instances
from .scene_io import (
    Frame,
    GroundTruth,
    MapExport,
    SequenceReader,
    export_map,
    load_ground_truth,
    load_map,
    load_masks,
)
from .semantics import (
    CropJob,
    MockProvider,
    PrecomputedProvider,
    extract_view_features,
    fuse_update,
    make_crops,
    assign_labels_features,
)
from .view_select import STRATEGIES, ViewSelector

PROVIDERS = ("mock", "precomputed", "bridge")


@dataclass
class PipelineConfig:
    dataset: str = ""
    out_dir: str = "ovimap_out"
    stride: int = 1
    n_seg: int = 1
    n_sem: int = 1
    voxel_size: float = 0.1
    truncation: float | None = None  # default 4 * voxel_size
    max_depth: float = 5.0
    theta_assoc: float = 0.25
    min_votes: int = 50
    theta_merge: int = 3
    merge_every: int = 20
    theta_novel: float = 0.2
    min_init_area: int = 400  # pixels at 640x480, scaled by actual resolution
    pad_scales: tuple = (1.0, 1.5)
    strategy: str = "coverage"
    view_budget: int = 8
    random_accept: float = 0.5
    provider: str = "mock"
    provider_dim: int = 16
    bridge_cmd: list | None = None
    seed: int = 0
    normal_angle_thresh: float = 30.0
    depth_step_thresh: float = 0.05
    min_mask_area: int = 50
    depth_band_voxels: float = 2.0
    fusion: str = "weighted"
    vote_history_cap: int = 0
    cluster_capacity: int = 64
    max_dist: float = 0.05
    queue_depth: int = 4
    sequential: bool = False
    save_crops: bool = False
    run_eval: bool = False

    def validate(self) -> None:
        checks = [
            (self.stride >= 1, "stride must be >= 1"),
            (self.n_seg >= 1 and self.n_sem >= 1, "keyframe intervals must be >= 1"),
            (self.voxel_size > 0, "voxel_size must be positive"),
            (0 < self.theta_assoc <= 1, "theta_assoc must be in (0, 1]"),
            (self.min_votes >= 0, "min_votes must be >= 0"),
            (0 <= self.theta_novel <= 1, "theta_novel must be in [0, 1]"),
            (self.theta_merge >= 0, "theta_merge must be >= 0"),
            (self.max_depth > 0, "max_depth must be positive"),
            (len(self.pad_scales) >= 1, "pad_scales must be nonempty"),
            (all(s > 0 for s in self.pad_scales), "pad scales must be positive"),
            (self.strategy in STRATEGIES, f"strategy must be one of {STRATEGIES}"),
            (self.provider in PROVIDERS, f"provider must be one of {PROVIDERS}"),
            (self.view_budget >= 1, "view_budget must be >= 1"),
            (0 < self.random_accept <= 1, "random_accept must be in (0, 1]"),
            (self.max_dist > 0, "max_dist must be positive"),
            (self.queue_depth >= 1, "queue_depth must be >= 1"),
            (self.provider_dim >= 3, "provider_dim must be >= 3"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.truncation is not None and self.truncation < self.voxel_size:
            raise ConfigError("truncation must be >= voxel_size")
        if self.strategy == "random" and self.seed is None:
            raise ConfigError("random strategy needs an explicit seed")

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        if isinstance(cfg.pad_scales, list):
            cfg.pad_scales = tuple(cfg.pad_scales)
        return cfg

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            return cls.from_dict(json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pad_scales"] = list(self.pad_scales)
        return d


class PipelineError(OvimapError):
    def __init__(self, stage: str, frame_index: int | None, cause: BaseException):
        super().__init__(f"stage {stage} failed at frame {frame_index}: {cause}")
        self.stage = stage
        self.frame_index = frame_index
        self.cause = cause


# ---------------------------------------------------------------------------
# messages
# ---------------------------------------------------------------------------


@dataclass
class WorkItem:
    frame: Frame
    do_seg: bool
    do_sem: bool
    segments: list[RefinedSegment] | None = None


@dataclass
class CropTask:
    seq: int
    color: np.ndarray
    jobs: list[CropJob]
    instance_id: int
    weight: int


@dataclass
class FeatureResult:
    seq: int
    instance_id: int
    f1: object
    f2: object
    weight: int
    calls: list[int]


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def iter_work(reader: SequenceReader, cfg: PipelineConfig, mask_bridge=None):
    """Stage A: load scheduled frames and segment the mapping keyframes."""
    strided = reader.indices[:: cfg.stride]
    for pos, idx in enumerate(strided):
        do_seg = pos % cfg.n_seg == 0
        do_sem = pos % cfg.n_sem == 0
        if not (do_seg or do_sem):
            continue
        frame = reader.load_frame(idx)
        segments = None
        if do_seg:
            geo = depth_segment(frame, cfg.normal_angle_thresh, cfg.depth_step_thresh)
            entities = load_masks(reader.root, idx, bridge=mask_bridge)
            segments = mask_fusion(entities, geo, cfg.min_mask_area)
        yield WorkItem(frame, do_seg, do_sem, segments)


class Mapper:
    """Stage B: owns the instance map and all selection state."""

    def __init__(self, cfg: PipelineConfig, scaled_init_area: int):
        self.cfg = cfg
        self.imap = InstanceMap(
            voxel_size=cfg.voxel_size,
            truncation=cfg.truncation,
            theta_assoc=cfg.theta_assoc,
            min_votes=cfg.min_votes,
            feature_strategy=cfg.fusion,
            vote_history_cap=cfg.vote_history_cap,
            cluster_capacity=cfg.cluster_capacity,
        )
        self.selector = ViewSelector(
            strategy=cfg.strategy,
            theta_novel=cfg.theta_novel,
            budget=cfg.view_budget,
            min_init_area=scaled_init_area,
            seed=cfg.seed,
            random_accept=cfg.random_accept,
        )
        self.call_log: list[int] = []
        self.seg_frames = 0
        self.next_seq = 0
        self.applied_seq = 0
        self._pending: dict[int, FeatureResult] = {}

    def process(self, item: WorkItem) -> list[CropTask]:
        cfg = self.cfg
        if item.do_seg:
            self.seg_frames += 1
            assigned = []
            for seg in item.segments:
                try:
                    lifted = lift(seg, item.frame, cfg.max_depth)
                except EmptySegmentError:
                    continue
                assigned.append((lifted, self.imap.associate(lifted)))
            self.imap.integrate_frame(item.frame, assigned)
            if cfg.merge_every and self.seg_frames % cfg.merge_every == 0:
                self.selector.on_merge(self.imap.merge_superpoints(cfg.theta_merge))
        tasks: list[CropTask] = []
        if item.do_sem:
            band = cfg.depth_band_voxels * cfg.voxel_size
            observations = project_instances(self.imap.grid, item.frame, band)
            for obs in sorted(observations, key=lambda o: o.instance_id):
                sp = self.imap.superpoints.get(obs.instance_id)
                if sp is None or not sp.alive:
                    continue
                decision = self.selector.decide(sp, obs)
                if decision.selected:
                    jobs = make_crops(item.frame, obs, cfg.pad_scales)
                    tasks.append(
                        CropTask(self.next_seq, item.frame.color, jobs, obs.instance_id, obs.pixel_count)
                    )
                    self.next_seq += 1
        return tasks

    def apply_result(self, result: FeatureResult) -> None:
        """Fold feature results in selection order, redirecting merged ids."""
        self._pending[result.seq] = result
        while self.applied_seq in self._pending:
            res = self._pending.pop(self.applied_seq)
            sp = self.imap.superpoints[self.imap.resolve_id(res.instance_id)]
            fuse_update(sp, res.f1, res.f2, res.weight, seq=res.seq)
            sp.num_queries += len(res.calls)
            self.call_log.extend(res.calls)
            self.applied_seq += 1

    def finish(self) -> None:
        if self._pending or self.applied_seq != self.next_seq:
            raise RuntimeError("feature results missing at shutdown")
        mapping = self.imap.merge_superpoints(self.cfg.theta_merge)
        self.selector.on_merge(mapping)

    def resolved_call_log(self) -> list[int]:
        return [self.imap.resolve_id(i) for i in self.call_log]


class Extractor:
    """Stage C: run the provider on crop jobs, optionally saving crop files."""

    def __init__(self, provider, crops_dir: Path | None):
        self.provider = provider
        self.crops_dir = crops_dir
        self.manifest: list[dict] = []

    def _save_crops(self, color: np.ndarray, jobs: list[CropJob]) -> None:
        n_scales = len(jobs)
        for job in jobs:
            x0, y0, x1, y1 = job.bbox
            stem = f"{job.frame_index:06d}_{job.instance_id:04d}_{job.crop_type}"
            Image.fromarray(color[y0:y1, x0:x1]).save(self.crops_dir / f"{stem}.png")
            self.manifest.append(
                {
                    "frame": job.frame_index,
                    "instance": job.instance_id,
                    "crop_type": job.crop_type,
                    "image": f"crops/{stem}.png",
                    "mask": None,
                }
            )
        base = jobs[0]
        x0, y0, x1, y1 = base.bbox
        stem = f"{base.frame_index:06d}_{base.instance_id:04d}_{n_scales}"
        Image.fromarray(color[y0:y1, x0:x1]).save(self.crops_dir / f"{stem}.png")
        Image.fromarray((base.mask * np.uint8(255))).save(self.crops_dir / f"{stem}_mask.png")
        self.manifest.append(
            {
                "frame": base.frame_index,
                "instance": base.instance_id,
                "crop_type": n_scales,
                "image": f"crops/{stem}.png",
                "mask": f"crops/{stem}_mask.png",
            }
        )

    def extract(self, task: CropTask) -> FeatureResult:
        if self.crops_dir is not None:
            self._save_crops(task.color, task.jobs)
        f1, f2, calls = extract_view_features(task.color, task.jobs, self.provider)
        return FeatureResult(task.seq, task.instance_id, f1, f2, task.weight, calls)


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    out_dir: Path
    config: PipelineConfig
    mapper: Mapper
    manifest: dict
    aq: float
    report: EvalReport | None
    num_frames: int
    elapsed: float

    @property
    def fps(self) -> float:
        return self.num_frames / self.elapsed if self.elapsed > 0 else 0.0


def make_provider(cfg: PipelineConfig, crops_dir: Path | None):
    if cfg.provider == "mock":
        return MockProvider(cfg.provider_dim, cfg.seed)
    if cfg.provider == "precomputed":
        return PrecomputedProvider(cfg.dataset)
    from .bridge_client import BridgeProvider

    return BridgeProvider(cfg.bridge_cmd, crops_dir)


class _Abort(Exception):
    pass


class _StageRunner:
    """Shared stop flag + queue helpers with abort checks."""

    def __init__(self):
        self.stop = threading.Event()
        self.failures: list[PipelineError] = []
        self.lock = threading.Lock()

    def put(self, q: queue.Queue, item) -> None:
        while True:
            if self.stop.is_set():
                raise _Abort()
            try:
                q.put(item, timeout=0.05)
                return
            except queue.Full:
                continue

    def get(self, q: queue.Queue):
        while True:
            if self.stop.is_set():
                raise _Abort()
            try:
                return q.get(timeout=0.05)
            except queue.Empty:
                continue

    def fail(self, stage: str, frame_index: int | None, exc: BaseException) -> None:
        with self.lock:
            self.failures.append(PipelineError(stage, frame_index, exc))
        self.stop.set()


def run(cfg: PipelineConfig) -> RunResult:
    """Execute the full pipeline on a dataset and export the map."""
    cfg.validate()
    if not cfg.dataset:
        raise ConfigError("no dataset configured")
    reader = SequenceReader(cfg.dataset)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    crops_dir = None
    if cfg.save_crops or cfg.provider == "bridge":
        crops_dir = out_dir / "crops"
        crops_dir.mkdir(exist_ok=True)
    provider = make_provider(cfg, crops_dir)
    try:
        intr = reader.intrinsics
        scaled_area = max(1, round(cfg.min_init_area * (intr.width * intr.height) / (640 * 480)))
        mapper = Mapper(cfg, scaled_area)
        extractor = Extractor(provider, crops_dir)
        mask_bridge = provider if cfg.provider == "bridge" else None

        start = time.perf_counter()
        if cfg.sequential:
            for item in iter_work(reader, cfg, mask_bridge):
                for task in mapper.process(item):
                    mapper.apply_result(extractor.extract(task))
        else:
            _run_threaded(cfg, reader, mapper, extractor, mask_bridge)
        mapper.finish()
        elapsed = time.perf_counter() - start

        manifest = export_map(mapper.imap.grid, mapper.imap.superpoints.values(), out_dir)
        if extractor.manifest:
            with open(out_dir / "crop_manifest.json", "w") as fh:
                json.dump(extractor.manifest, fh, indent=1)
        aq = query_stats(mapper.resolved_call_log())

        report = None
        gt_ply, _ = reader.ground_truth_paths()
        if cfg.run_eval:
            if not gt_ply.is_file():
                raise DataError(f"--eval requested but no ground truth at {gt_ply}")
            eval_provider = provider if cfg.provider != "precomputed" else MockProvider(cfg.provider_dim, cfg.seed)
            report = evaluate_export(load_map(out_dir), load_ground_truth(reader.root), eval_provider, cfg.max_dist)
            report.aq = aq
        _write_report(out_dir, cfg, manifest, aq, report)
        num_frames = len(reader.indices[:: cfg.stride])
        return RunResult(out_dir, cfg, mapper, manifest, aq, report, num_frames, elapsed)
    finally:
        close = getattr(provider, "close", None)
        if close:
            close()


def _run_threaded(cfg, reader, mapper, extractor, mask_bridge) -> None:
    runner = _StageRunner()
    q_work: queue.Queue = queue.Queue(cfg.queue_depth)
    q_crop: queue.Queue = queue.Queue(cfg.queue_depth)
    q_res: queue.Queue = queue.Queue()
    DONE = object()

    def stage_a():
        frame_idx = None
        try:
            for item in iter_work(reader, cfg, mask_bridge):
                frame_idx = item.frame.index
                runner.put(q_work, item)
            runner.put(q_work, DONE)
        except _Abort:
            pass
        except BaseException as exc:
            runner.fail("segmentation", frame_idx, exc)

    def stage_b():
        frame_idx = None
        try:
            while True:
                item = runner.get(q_work)
                if item is DONE:
                    break
                frame_idx = item.frame.index
                for task in mapper.process(item):
                    runner.put(q_crop, task)
                while True:  # apply any finished features without blocking
                    try:
                        mapper.apply_result(q_res.get_nowait())
                    except queue.Empty:
                        break
            runner.put(q_crop, DONE)
            while mapper.applied_seq < mapper.next_seq:
                mapper.apply_result(runner.get(q_res))
        except _Abort:
            pass
        except BaseException as exc:
            runner.fail("mapping", frame_idx, exc)

    def stage_c():
        frame_idx = None
        try:
            while True:
                task = runner.get(q_crop)
                if task is DONE:
                    break
                frame_idx = task.jobs[0].frame_index
                runner.put(q_res, extractor.extract(task))
        except _Abort:
            pass
        except BaseException as exc:
            runner.fail("extraction", frame_idx, exc)

    threads = [
        threading.Thread(target=stage_a, name="stage-a", daemon=True),
        threading.Thread(target=stage_b, name="stage-b", daemon=True),
        threading.Thread(target=stage_c, name="stage-c", daemon=True),
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if runner.failures:
        raise runner.failures[0]


def _write_report(out_dir: Path, cfg, manifest, aq, report: EvalReport | None) -> None:
    payload = {
        "config": cfg.to_dict(),
        "num_instances": manifest["num_instances"],
        "num_points": manifest["num_points"],
        "aq": round(float(aq), 6),
        "metrics": report.to_dict() if report is not None else None,
    }
    with open(out_dir / "report.json", "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# offline evaluation of an exported map
# ---------------------------------------------------------------------------


def evaluate_export(export: MapExport, gt: GroundTruth, provider, max_dist: float = 0.05) -> EvalReport:
    """Project an exported map onto GT vertices and compute all metrics."""
    pred_inst = project_to_gt(export.points, export.point_instance_ids, gt.vertices, max_dist)
    aps = instance_ap(pred_inst, gt.instance_ids)

    feats = {
        meta["id"]: (export.features[i] if meta["num_queries"] > 0 else None)
        for i, meta in enumerate(export.instances)
    }
    label_by_id = assign_labels_features(feats, gt.label_names, provider)
    sem_of_point = np.array(
        [label_by_id.get(int(i), -1) for i in export.point_instance_ids], dtype=np.int64
    )
    pred_sem = project_to_gt(export.points, sem_of_point, gt.vertices, max_dist, fill=-1)
    miou, macc, per_class = semantic_miou(pred_sem, gt.semantic_ids, len(gt.label_names), gt.label_names)

    queried = [m["num_queries"] for m in export.instances if m["num_queries"] > 0]
    aq = float(sum(queried) / len(queried)) if queried else 0.0
    return EvalReport(
        miou=miou,
        macc=macc,
        ap25=aps.get(0.25),
        ap50=aps.get(0.5),
        ap75=aps.get(0.75),
        ap_all=aps.get("all"),
        aq=aq,
        per_class=per_class,
    )
