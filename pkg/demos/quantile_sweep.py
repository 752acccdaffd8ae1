"""Sweep one quantile over 0.05..0.95 on a synthetic pair and print the table.

    python demos/quantile_sweep.py --axis color_quantile
"""

import argparse

from splatdiff.evaluation import SWEEP_AXES, quantile_sweep, sweep_to_csv
from splatdiff.pipeline import PipelineConfig, detect
from splatdiff.synth import SynthSpec, generate_pair


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--axis", default="geo_quantile", choices=SWEEP_AXES)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--change", default="recolor")
    ap.add_argument("--out", default=None, help="optional CSV path")
    args = ap.parse_args()

    s1, s2, truth = generate_pair(SynthSpec.moderate(args.seed, args.change))
    base = PipelineConfig()

    def run(override):
        r = detect(s1, s2, cfg=base.replace(**override))
        return {vid: m.M for vid, m in r.maps.items()}

    rows = quantile_sweep(run, truth.gt_binary, args.axis)
    print(f"{'q':>5} {'fixed':>7} {'oracle':>7} {'t*':>6}")
    for r in rows:
        mark = "  <- default" if r.is_default else ""
        print(f"{r.quantile:5.2f} {r.fixed_miou:7.4f} {r.oracle_miou:7.4f} {r.oracle_threshold:6.3f}{mark}")
    if args.out:
        sweep_to_csv(rows, args.out)


if __name__ == "__main__":
    main()
