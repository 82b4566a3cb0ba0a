"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s``. All scenes are synthetic
and the feature provider is the deterministic mock, so the suite needs no
model weights or datasets. The two bridge criteria need the compiled sidecar
(``npm run build`` under bridge/); without it they are skipped, and the
transcript-based half of the conformance criterion still runs.
"""

import json
import shutil
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from ovimap.bridge_client import TranscriptTransport, build_conformance_requests, run_conformance
from ovimap.evaluation import instance_ap, project_to_gt, semantic_miou
from ovimap.instance_map import InstanceMap, LiftedSegment, SuperPoint
from ovimap.pipeline import PipelineConfig, run
from ovimap.scene_io import load_ground_truth, load_map, read_ply
from ovimap.semantics import MockProvider, RunningFeature, assign_labels_features
from ovimap.synth import make_scene, render_synthetic
from ovimap.view_select import ViewSelector

from conftest import make_frame
from oracles import VoxelVoteReplay
from test_view_select import FakeObs, sphere_points, visible_from

BRIDGE_DIST = Path(__file__).resolve().parent.parent / "bridge" / "dist" / "main.js"
needs_bridge = pytest.mark.bridge


def _ok(name):
    print(f"\nACCEPTANCE {name}: PASS")


@pytest.fixture(scope="module")
def boxes120_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc_boxes") / "ds"
    render_synthetic(make_scene("boxes3", frames=120), root)
    return root


@pytest.fixture(scope="module")
def boxes120_run(tmp_path_factory, boxes120_root):
    out = tmp_path_factory.mktemp("acc_boxes_out")
    cfg = PipelineConfig(
        dataset=str(boxes120_root), out_dir=str(out), run_eval=True,
        normal_angle_thresh=181.0, max_dist=0.12, sequential=True,
    )
    return run(cfg)


def test_c01_fusion_formula_oracle():
    # 1000 random weighted update sequences vs the batch weighted mean
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n = int(rng.integers(1, 51))
        dim = int(rng.integers(8, 513))
        acc = RunningFeature()
        views = rng.normal(0.0, 1.0, (n, dim))
        weights = rng.uniform(0.5, 500.0, n)
        for v, w in zip(views, weights):
            acc.update(v, float(w))
        batch = np.average(views, axis=0, weights=weights)
        err = np.linalg.norm(acc.read() - batch) / max(np.linalg.norm(batch), 1e-12)
        assert err < 1e-6
    elapsed = time.perf_counter() - start
    assert elapsed < 5.0, f"fusion oracle took {elapsed:.1f}s"
    _ok("C1 fusion-formula oracle (1000 sequences, <5s)")


def test_c02_voting_association_oracle():
    # 200 randomized small scenes: engine state must equal the replayed log exactly
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    frame = make_frame(np.full((8, 8), 1.0))
    for _ in range(200):
        theta = float(rng.uniform(0.15, 0.4))
        min_votes = int(rng.integers(3, 12))
        imap = InstanceMap(voxel_size=0.1, theta_assoc=theta, min_votes=min_votes)
        ref = VoxelVoteReplay(0.1, theta, min_votes)
        for t in range(int(rng.integers(2, 6))):
            segments = []
            for _ in range(int(rng.integers(1, 4))):
                center = rng.uniform(0.2, 1.4, 3)
                pts = np.clip(center + rng.normal(0, 0.18, (int(rng.integers(10, 120)), 3)), 0, 1.599)
                segments.append(pts)
            pairs = []
            engine_ids = []
            for pts in segments:
                ls = LiftedSegment(t, pts, len(pts))
                inst = imap.associate(ls)
                engine_ids.append(inst)
                pairs.append((ls, inst))
            imap.integrate_frame(frame, pairs)
            assert ref.process_frame(segments) == engine_ids
        from ovimap.instance_map import pack_keys

        for vox, support in ref.support.items():
            key = int(pack_keys(np.array([vox], np.int64))[0])
            assert imap.grid.support.get(key) == support
            center = (np.array(vox) + 0.5) * 0.1
            assert int(imap.grid.lookup_labels(center[None])[0]) == ref.labels[vox]
    elapsed = time.perf_counter() - start
    assert elapsed < 30.0, f"voting oracle took {elapsed:.1f}s"
    _ok("C2 voting/association oracle (200 scenes, exact, <30s)")


def test_c03_tsdf_sphere_accuracy(tmp_path):
    start = time.perf_counter()
    root = render_synthetic(make_scene("orbit-sphere", frames=36), tmp_path / "ds")
    cfg = PipelineConfig(
        dataset=str(root), out_dir=str(tmp_path / "out"),
        voxel_size=0.02, max_depth=6.0, min_votes=20, sequential=True,
    )
    result = run(cfg)
    pts, _ = result.mapper.imap.grid.surface_points()
    assert len(pts) > 1000
    dist = np.abs(np.linalg.norm(pts, axis=1) - 0.5)
    elapsed = time.perf_counter() - start
    assert dist.mean() <= 0.02, f"mean surface error {dist.mean():.4f}"
    assert dist.max() <= 0.04, f"max surface error {dist.max():.4f}"
    assert elapsed < 60.0, f"sphere run took {elapsed:.1f}s"
    _ok(f"C3 TSDF sphere accuracy (mean {dist.mean():.4f} <= voxel, max {dist.max():.4f} <= 2x)")


def test_c04_instance_map_correctness(boxes120_run):
    assert boxes120_run.elapsed < 120.0
    assert boxes120_run.manifest["num_instances"] == 3
    rep = boxes120_run.report
    assert rep.ap50 == 1.0
    assert rep.ap75 >= 0.9
    _ok(f"C4 boxes3 instance map (3 instances, AP50={rep.ap50}, AP75={rep.ap75})")


def test_c05_oversegmentation_recovery(tmp_path, boxes120_root):
    split_root = tmp_path / "ds"
    render_synthetic(make_scene("boxes3", frames=120), split_root, split_masks_seed=11)
    cfg = PipelineConfig(
        dataset=str(split_root), out_dir=str(tmp_path / "out"),
        normal_angle_thresh=181.0, theta_merge=3, sequential=True,
    )
    result = run(cfg)
    assert result.manifest["num_instances"] == 3
    _ok("C5 over-segmentation recovery (split halves merge back to 3)")


def _label_correctness(out_dir, dataset_root, provider, max_dist=0.12):
    export = load_map(out_dir)
    gt = load_ground_truth(dataset_root)
    pred_inst = project_to_gt(export.points, export.point_instance_ids, gt.vertices, max_dist)
    feats = {
        m["id"]: (export.features[i] if m["num_queries"] > 0 else None)
        for i, m in enumerate(export.instances)
    }
    label_by_id = assign_labels_features(feats, gt.label_names, provider)
    correct = 0
    for meta in export.instances:
        iid = meta["id"]
        verts = pred_inst == iid
        if not verts.any() or iid not in label_by_id:
            continue
        true_sem = int(np.bincount(gt.semantic_ids[verts]).argmax())
        correct += int(label_by_id[iid] == true_sem)
    return correct


def test_c06_view_selection_efficiency(tmp_path):
    root = render_synthetic(make_scene("revisit"), tmp_path / "ds")
    provider = MockProvider(16, 0)
    aq = {}
    correct = {}
    for strategy in ("coverage", "pixel_count"):
        cfg = PipelineConfig(
            dataset=str(root), out_dir=str(tmp_path / strategy),
            strategy=strategy, theta_novel=0.2, sequential=True,
        )
        result = run(cfg)
        aq[strategy] = result.aq
        correct[strategy] = _label_correctness(result.out_dir, root, provider)
    assert aq["coverage"] <= 0.5 * aq["pixel_count"], aq
    assert correct["coverage"] >= correct["pixel_count"], correct
    assert 5.0 <= aq["coverage"] <= 12.0, aq
    _ok(
        f"C6 view-selection efficiency (AQ coverage={aq['coverage']:.1f} "
        f"vs pixel={aq['pixel_count']:.1f}, labels {correct['coverage']}/3)"
    )


def test_c07_selection_termination():
    pts = sphere_points()
    sp = SuperPoint(id=1)
    sp.aabb_min, sp.aabb_max = np.full(3, -0.5), np.full(3, 0.5)
    selector = ViewSelector("coverage", theta_novel=0.2, min_init_area=1)
    views = []
    for t in range(10):
        ang = 2 * np.pi * t / 10
        cam = np.array([2.0 * np.cos(ang), 2.0 * np.sin(ang), 0.4])
        views.append(visible_from(pts, np.zeros(3), 0.5, cam))
    first = sum(selector.decide(sp, FakeObs(v, t)).selected for t, v in enumerate(views))
    assert first >= 1
    later = 0
    for rep in range(100):
        for t, v in enumerate(views):
            later += selector.decide(sp, FakeObs(v, 10 * (rep + 1) + t)).selected
    assert later == 0
    _ok(f"C7 selection termination ({first} first-pass selections, 0 afterwards)")


def test_c08_zero_shot_query(boxes120_run, tmp_path):
    export = load_map(boxes120_run.out_dir)
    provider = MockProvider(16, boxes120_run.config.seed)
    from ovimap.semantics import export_heatmap, rank_by_similarity, validate_embedding

    text = validate_embedding(provider.embed_text("red"), provider.dim)
    feats = {
        m["id"]: (export.features[i] if m["num_queries"] > 0 else None)
        for i, m in enumerate(export.instances)
    }
    ranking = rank_by_similarity(feats, text)
    assert len(ranking) == 3
    # the red box is instance 1 by scene construction; verify against GT anyway
    gt = load_ground_truth(boxes120_run.config.dataset)
    pred_inst = project_to_gt(export.points, export.point_instance_ids, gt.vertices, 0.12)
    red_sem = gt.label_names.index("red")
    top_id, top_sim = ranking[0]
    verts = pred_inst == top_id
    assert int(np.bincount(gt.semantic_ids[verts]).argmax()) == red_sem
    assert top_sim - ranking[1][1] >= 0.2

    heat_path = tmp_path / "heat.ply"
    export_heatmap(export.points, export.point_instance_ids, dict(ranking), heat_path)
    ply = read_ply(heat_path)
    red_points = export.point_instance_ids == top_id
    assert np.all(ply["red"][red_points] == 255)
    assert np.all(ply["green"][red_points] == 0)
    assert np.all(ply["blue"][red_points] == 0)
    _ok(f"C8 zero-shot query (margin {top_sim - ranking[1][1]:.2f} >= 0.2, heatmap top color)")


def test_c09_pipeline_equivalence(tmp_path, boxes120_root):
    results = {}
    for mode, sequential in (("seq", True), ("thr", False)):
        cfg = PipelineConfig(
            dataset=str(boxes120_root), out_dir=str(tmp_path / mode),
            normal_angle_thresh=181.0, sequential=sequential, seed=3,
        )
        results[mode] = run(cfg)
    a, b = results["seq"], results["thr"]
    assert a.manifest["num_instances"] == b.manifest["num_instances"]
    ga, gb = a.mapper.imap.grid, b.mapper.imap.grid
    assert set(ga.blocks) == set(gb.blocks)
    for key in ga.blocks:
        assert np.array_equal(ga.blocks[key].label, gb.blocks[key].label)
    for sp_id, sp in a.mapper.imap.superpoints.items():
        fa = sp.feature.read()
        fb = b.mapper.imap.superpoints[sp_id].feature.read()
        if fa is None:
            assert fb is None
        else:
            assert np.max(np.abs(fa - fb)) <= 1e-6
    _ok("C9 pipeline equivalence (threaded == sequential)")


@pytest.mark.slow
def test_c10_throughput_floor(tmp_path):
    root = render_synthetic(make_scene("boxes3", frames=200, width=640, height=480), tmp_path / "ds")
    cfg = PipelineConfig(
        dataset=str(root), out_dir=str(tmp_path / "out"),
        n_seg=30, n_sem=10, normal_angle_thresh=181.0, sequential=False,
    )
    result = run(cfg)
    assert result.num_frames == 200
    assert result.fps >= 10.0, f"{result.fps:.1f} fps"
    _ok(f"C10 throughput floor ({result.fps:.1f} fps >= 10 on 640x480 x 200)")


def test_c11_metric_correctness():
    # five constructed cases, exact values
    gt2 = np.array([1] * 10 + [2] * 10)
    case1 = instance_ap(gt2.copy(), gt2)
    assert case1[0.25] == case1[0.5] == case1[0.75] == 1.0

    case2 = instance_ap(np.array([1] * 5 + [0] * 5), np.array([1] * 10), iou_thresholds=(0.5, 0.75))
    assert case2[0.5] == 1.0 and case2[0.75] == 0.0

    case3 = instance_ap(np.array([5] * 10 + [0] * 10), gt2, iou_thresholds=(0.5,))
    assert case3[0.5] == 0.5

    miou, macc, _ = semantic_miou(np.array([1, 1, 0, 0]), np.array([0, 0, 1, 1]), 2)
    assert miou == 0.0 and macc == 0.0

    gt3 = np.array([0] * 10 + [1] * 10 + [2] * 10)
    pred3 = np.concatenate([[0] * 7 + [1] * 2 + [2], [1] * 8 + [2] * 2, [2] * 6 + [0] * 3 + [-1]])
    miou, macc, per = semantic_miou(pred3, gt3, 3)
    assert per["0"] == pytest.approx(7 / 13) and per["1"] == pytest.approx(8 / 12)
    assert per["2"] == pytest.approx(6 / 13)
    assert macc == pytest.approx(np.mean([0.7, 0.8, 0.6]))

    # AP monotone in the IoU threshold across 100 random cases
    rng = np.random.default_rng(5)
    taus = (0.25, 0.5, 0.75, 0.9)
    for _ in range(100):
        gt = rng.integers(0, 4, 40)
        pred = rng.integers(0, 5, 40)
        aps = instance_ap(pred, gt, iou_thresholds=taus)
        vals = [aps[t] for t in taus]
        if vals[0] is None:
            continue
        assert all(x >= y - 1e-12 for x, y in zip(vals, vals[1:]))
    _ok("C11 metric correctness (5 exact cases + AP monotonicity)")


def test_c12_bridge_conformance_transcript(tmp_path):
    # [SECONDARY] engine-side half: the harness runs against a recorded transcript
    transcript_path = Path(__file__).parent / "data" / "bridge_transcript.json"
    assert transcript_path.is_file(), "recorded transcript missing"
    transcript = json.loads(transcript_path.read_text())
    requests = build_conformance_requests(tmp_path)
    report = run_conformance(TranscriptTransport(transcript), requests)
    assert report.ok, report.problems
    assert report.num_requests == 100
    assert report.dim == transcript["handshake"]["dim"]
    _ok(f"C12 bridge conformance vs transcript (100 requests, dim {report.dim})")


@needs_bridge
@pytest.mark.skipif(not BRIDGE_DIST.is_file(), reason="bridge not built")
def test_c12_bridge_conformance_live(tmp_path):
    from ovimap.bridge_client import BridgeTransport

    requests = build_conformance_requests(tmp_path)
    transport = BridgeTransport(["node", str(BRIDGE_DIST), "serve", "--model", "stub"])
    try:
        report = run_conformance(transport, requests)
    finally:
        transport.close()
    assert report.ok, report.problems
    _ok(f"C12 bridge conformance live (100 requests, dim {report.dim})")


@needs_bridge
@pytest.mark.skipif(not BRIDGE_DIST.is_file(), reason="bridge not built")
def test_c13_precompute_roundtrip(tmp_path):
    # [SECONDARY] stub-mode precompute must reproduce the live-bridge run exactly
    root = render_synthetic(make_scene("boxes3", frames=10), tmp_path / "ds", write_masks=False)
    node = shutil.which("node")
    bridge_cmd = [node, str(BRIDGE_DIST)]
    r = subprocess.run(
        bridge_cmd + ["precompute", "--root", str(root), "--stride", "1", "--model", "stub"],
        capture_output=True, text=True,
    )
    assert r.returncode == 0, r.stderr
    assert len(list((root / "masks").glob("*.png"))) == 10

    def run_with(provider, out):
        cfg = PipelineConfig(
            dataset=str(root), out_dir=str(out), provider=provider,
            bridge_cmd=bridge_cmd + ["serve", "--model", "stub"],
            normal_angle_thresh=181.0, sequential=True, save_crops=True,
        )
        return run(cfg)

    live = run_with("bridge", tmp_path / "live")
    r = subprocess.run(
        bridge_cmd
        + ["precompute", "--root", str(root), "--manifest", str(tmp_path / "live" / "crop_manifest.json"),
           "--crops-base", str(tmp_path / "live"), "--model", "stub"],
        capture_output=True, text=True,
    )
    assert r.returncode == 0, r.stderr
    pre = run_with("precomputed", tmp_path / "pre")

    exp_live = load_map(live.out_dir)
    exp_pre = load_map(pre.out_dir)
    assert [m["id"] for m in exp_live.instances] == [m["id"] for m in exp_pre.instances]
    assert np.array_equal(exp_live.features, exp_pre.features)
    assert np.array_equal(exp_live.point_instance_ids, exp_pre.point_instance_ids)
    _ok("C13 precompute round-trip (bridge == precomputed, bit-equal features)")
