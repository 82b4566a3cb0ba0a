"""Command-line interface.

    ovimap run --config cfg.json [--dataset DIR] [--strategy coverage|pixel|random]
               [--provider mock|precomputed|bridge] [--eval] [--out DIR]
    ovimap synth --scene boxes3|orbit-sphere|revisit --out DIR
    ovimap query --map DIR --text "..." [--heatmap out.ply] [--topk N]
    ovimap eval --map DIR --gt DIR

Exit codes: 0 success, 2 config error, 3 data error, 4 provider error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ProviderError
from .pipeline import PipelineConfig, PipelineError, evaluate_export, run
from .scene_io import load_ground_truth, load_map
from .semantics import (
    COLOR_LEXICON,
    MockProvider,
    assign_labels_features,
    export_heatmap,
    rank_by_similarity,
    validate_embedding,
)
from .synth import make_scene, render_synthetic

_STRATEGY_ALIASES = {"pixel": "pixel_count", "coverage": "coverage", "random": "random"}


def _parse_set(values: list[str]) -> dict:
    out = {}
    for item in values:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _make_query_provider(name: str, dim: int, seed: int):
    if name == "mock":
        return MockProvider(dim, seed)
    if name == "bridge":
        from .bridge_client import BridgeProvider

        return BridgeProvider(None, None)
    raise ConfigError(f"provider {name} cannot answer text queries")


def _cmd_run(args) -> int:
    data = {}
    if args.config:
        data = PipelineConfig.from_file(args.config).to_dict()
    if args.dataset:
        data["dataset"] = args.dataset
    if args.strategy:
        data["strategy"] = _STRATEGY_ALIASES[args.strategy]
    if args.provider:
        data["provider"] = args.provider
    if args.out:
        data["out_dir"] = args.out
    if args.eval:
        data["run_eval"] = True
    if args.sequential:
        data["sequential"] = True
    if args.seed is not None:
        data["seed"] = args.seed
    data.update(_parse_set(args.set or []))
    cfg = PipelineConfig.from_dict(data)
    result = run(cfg)
    print(
        f"processed {result.num_frames} frames in {result.elapsed:.2f}s "
        f"({result.fps:.1f} fps), {result.manifest['num_instances']} instances, "
        f"aq={result.aq:.2f} -> {result.out_dir}"
    )
    if result.report is not None:
        m = result.report
        print(
            f"eval: miou={m.miou:.3f} macc={m.macc:.3f} "
            f"ap25={m.ap25} ap50={m.ap50} ap75={m.ap75}"
        )
    return 0


def _cmd_synth(args) -> int:
    scene = make_scene(args.scene, frames=args.frames, width=args.width, height=args.height)
    root = render_synthetic(
        scene,
        args.out,
        depth_scale=args.depth_scale,
        write_masks=not args.no_masks,
        split_masks_seed=args.split_halves,
    )
    print(f"wrote {len(scene.trajectory)} frames of scene {args.scene} to {root}")
    return 0


def _cmd_query(args) -> int:
    export = load_map(args.map)
    if not export.featured_ids():
        print("no featured instances")
        return 0
    provider = _make_query_provider(args.provider, args.dim, args.seed)
    text_vec = validate_embedding(provider.embed_text(args.text), provider.dim)
    feats = {
        meta["id"]: (export.features[i] if meta["num_queries"] > 0 else None)
        for i, meta in enumerate(export.instances)
    }
    ranking = rank_by_similarity(feats, text_vec)
    labels = args.labels.split(",") if args.labels else sorted(COLOR_LEXICON)
    label_by_id = assign_labels_features(feats, labels, provider)
    for inst_id, sim in ranking[: args.topk]:
        print(f"id={inst_id} similarity={sim:.4f} label={labels[label_by_id[inst_id]]}")
    if args.heatmap:
        sims = dict(ranking)
        all_sims = {m["id"]: sims.get(m["id"]) for m in export.instances}
        export_heatmap(export.points, export.point_instance_ids, all_sims, args.heatmap)
        print(f"heatmap written to {args.heatmap}")
    return 0


def _cmd_eval(args) -> int:
    export = load_map(args.map)
    gt = load_ground_truth(args.gt)
    provider = _make_query_provider(args.provider, args.dim, args.seed)
    report = evaluate_export(export, gt, provider, max_dist=args.max_dist)
    out = Path(args.map) / "report.json"
    with open(out, "w") as fh:
        json.dump({"metrics": report.to_dict()}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    for key, value in report.to_dict().items():
        if key != "per_class":
            print(f"{key}: {value}")
    print(f"report written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ovimap", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("run", help="map a sequence and export the instance map")
    pr.add_argument("--config", help="JSON config file")
    pr.add_argument("--dataset", help="dataset directory")
    pr.add_argument("--strategy", choices=sorted(_STRATEGY_ALIASES))
    pr.add_argument("--provider", choices=["mock", "precomputed", "bridge"])
    pr.add_argument("--eval", action="store_true", help="evaluate against gt/ after the run")
    pr.add_argument("--out", help="output directory")
    pr.add_argument("--sequential", action="store_true", help="single-threaded stage order")
    pr.add_argument("--seed", type=int)
    pr.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    pr.set_defaults(func=_cmd_run)

    ps = sub.add_parser("synth", help="render a synthetic dataset")
    ps.add_argument("--scene", required=True, choices=["boxes3", "orbit-sphere", "revisit"])
    ps.add_argument("--out", required=True)
    ps.add_argument("--frames", type=int)
    ps.add_argument("--width", type=int, default=320)
    ps.add_argument("--height", type=int, default=240)
    ps.add_argument("--depth-scale", type=float, default=5000.0)
    ps.add_argument("--no-masks", action="store_true", help="omit masks/ (use a bridge segmenter)")
    ps.add_argument("--split-halves", type=int, metavar="SEED", help="split each mask in two")
    ps.set_defaults(func=_cmd_synth)

    pq = sub.add_parser("query", help="rank instances of an exported map by a text query")
    pq.add_argument("--map", required=True)
    pq.add_argument("--text", required=True)
    pq.add_argument("--heatmap", help="write a similarity-colored PLY here")
    pq.add_argument("--topk", type=int, default=10)
    pq.add_argument("--provider", default="mock", choices=["mock", "bridge"])
    pq.add_argument("--labels", help="comma-separated label set for the printed labels")
    pq.add_argument("--dim", type=int, default=16)
    pq.add_argument("--seed", type=int, default=0)
    pq.set_defaults(func=_cmd_query)

    pe = sub.add_parser("eval", help="evaluate an exported map against ground truth")
    pe.add_argument("--map", required=True)
    pe.add_argument("--gt", required=True, help="dataset root containing gt/")
    pe.add_argument("--max-dist", type=float, default=0.05)
    pe.add_argument("--provider", default="mock", choices=["mock", "bridge"])
    pe.add_argument("--dim", type=int, default=16)
    pe.add_argument("--seed", type=int, default=0)
    pe.set_defaults(func=_cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        cause = exc.cause
        if isinstance(cause, ConfigError):
            return 2
        if isinstance(cause, ProviderError):
            return 4
        return 3
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except ProviderError as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
