"""Runs the burn-in + timed protocol for each backbone at 360x640 and 1024x2048."""
import argparse

from liteseg import build_liteseg
from liteseg.metrics import benchmark_csv, benchmark_fps, format_benchmark
from liteseg.model import init_liteseg_weights
from liteseg.reference import REFERENCE_FPS, reference_config

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--backbones", nargs="+", default=["shufflenet", "mobilenetv2", "darknet19"])
    ap.add_argument("--burn-in", type=int, default=200)
    ap.add_argument("--runs", type=int, default=200)
    ap.add_argument("--csv")
    args = ap.parse_args()

    reports = []
    for bb in args.backbones:
        g = build_liteseg(reference_config(bb))
        w = init_liteseg_weights(g, 0)
        for hw in ((360, 640), (1024, 2048)):
            reports.append(benchmark_fps(g, w, (1, 3) + hw, args.burn_in, args.runs, label=bb))
    print(format_benchmark(reports))
    print("\npublished GPU figures (FPS 360x640, 1024x2048):", REFERENCE_FPS)
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(benchmark_csv(reports))
