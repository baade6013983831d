#!/usr/bin/env python3
"""Train the golden benchmark cells and print tissue AUC-ROC per cell.

    python scripts/run_benchmark.py --out runs/golden
"""

import argparse
import dataclasses
import time

from mmfuse import report
from mmfuse.config import ExperimentConfig, load_config
from mmfuse.trainer import run_matrix

CELLS = ["SS@tissue", "MM", "MM-text", "MM-structured", "MM-patch"]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="JSON config; defaults to the built-in benchmark")
    ap.add_argument("--out", default="runs/golden")
    ap.add_argument("--cells", default=",".join(CELLS))
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed, synth=dataclasses.replace(cfg.synth, seed=args.seed))
    t0 = time.perf_counter()
    recs = run_matrix(cfg, args.cells.split(","), out_dir=args.out, progress=print)
    print(f"\n{'cell':<16}{'tissue AUC-ROC':>16}{'95% CI':>18}")
    for r in recs:
        row = next(x for x in r.eval_rows if x.dataset == "test" and x.task == "tissue" and x.metric == "auc_roc")
        print(f"{r.cell:<16}{row.point:>16.3f}   ({row.ci_lo:.3f}, {row.ci_hi:.3f})")
    report.write_merged_eval(recs, f"{args.out}/eval_report.csv")
    report.write_comparison_csv(report.comparison_rows(recs), f"{args.out}/comparison.csv")
    print(f"\n{time.perf_counter() - t0:.0f}s, reports in {args.out}")


if __name__ == "__main__":
    main()
