#!/usr/bin/env python3
"""Compare the three view-selection strategies on the revisit sequence.

Prints per-strategy query cost (AQ = provider calls per featured instance)
and map quality after projecting onto the synthetic ground truth.

    python scripts/ablate_view_selection.py --workdir /tmp/ovimap_ablation
"""

import argparse
from pathlib import Path

from ovimap.pipeline import PipelineConfig, evaluate_export, run
from ovimap.scene_io import load_ground_truth, load_map
from ovimap.semantics import MockProvider
from ovimap.synth import make_scene, render_synthetic


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="ovimap_ablation")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    work = Path(args.workdir)
    dataset = work / "dataset"
    render_synthetic(make_scene("revisit"), dataset)
    provider = MockProvider(16, args.seed)

    print(f"{'strategy':<12} {'AQ':>6} {'mIoU':>6} {'mAcc':>6} {'AP50':>6}")
    for strategy in ("coverage", "pixel_count", "random"):
        cfg = PipelineConfig(
            dataset=str(dataset),
            out_dir=str(work / strategy),
            strategy=strategy,
            seed=args.seed,
            max_dist=0.12,
        )
        result = run(cfg)
        report = evaluate_export(
            load_map(result.out_dir), load_ground_truth(dataset), provider, cfg.max_dist
        )
        print(
            f"{strategy:<12} {result.aq:>6.1f} {report.miou:>6.3f} "
            f"{report.macc:>6.3f} {report.ap50 or 0:>6.2f}"
        )


if __name__ == "__main__":
    main()
