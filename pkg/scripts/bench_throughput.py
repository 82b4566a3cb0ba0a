#!/usr/bin/env python3
"""Wall-clock throughput of the threaded pipeline at VGA resolution.

Renders a 200-frame 640x480 orbit once, then times runs at several keyframe
cadences (n_seg = mapping interval, n_sem = selection interval).

    python scripts/bench_throughput.py --workdir /tmp/ovimap_bench
"""

import argparse
from pathlib import Path

from ovimap.pipeline import PipelineConfig, run
from ovimap.synth import make_scene, render_synthetic


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="ovimap_bench")
    ap.add_argument("--frames", type=int, default=200)
    args = ap.parse_args()

    work = Path(args.workdir)
    dataset = work / "dataset"
    if not (dataset / "intrinsics.txt").exists():
        print(f"rendering {args.frames} frames at 640x480 (one-time)")
        render_synthetic(make_scene("boxes3", frames=args.frames, width=640, height=480), dataset)

    print(f"{'n_seg':>6} {'n_sem':>6} {'mode':>10} {'fps':>8}")
    for n_seg, n_sem in ((30, 10), (10, 5), (5, 5), (1, 1)):
        for sequential in (False, True):
            cfg = PipelineConfig(
                dataset=str(dataset),
                out_dir=str(work / f"out_{n_seg}_{n_sem}_{int(sequential)}"),
                n_seg=n_seg,
                n_sem=n_sem,
                normal_angle_thresh=181.0,
                sequential=sequential,
            )
            result = run(cfg)
            mode = "sequential" if sequential else "threaded"
            print(f"{n_seg:>6} {n_sem:>6} {mode:>10} {result.fps:>8.1f}")


if __name__ == "__main__":
    main()
