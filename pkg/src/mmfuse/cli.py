"""``mmfuse`` command line.

Exit codes: 0 success, 2 configuration error, 3 missing or invalid artifact,
4 pairing violation (runs scored on different test sets).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from . import report
from .checkpoint import load_checkpoint
from .config import ExperimentConfig, dumps_config, load_config
from .data import (
    SplitAssignment,
    generate_synthetic,
    iterative_stratified_split,
    label_table,
    load_manifest,
    save_manifest,
)
from .errors import ConfigError, DataError
from .metrics import write_eval_csv
from .trainer import (
    evaluate_model,
    expand_cells,
    load_run_dir,
    parse_cell,
    run_cell,
    run_experiment,
    run_matrix,
)

log = logging.getLogger("mmfuse")

EXIT_CONFIG = 2
EXIT_ARTIFACT = 3
EXIT_PAIRING = 4


class ArtifactError(Exception):
    pass


def _seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("MMFUSE_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"MMFUSE_SEED must be an integer, got {env!r}") from None
    return None


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    seed = _seed(args)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed, synth=dataclasses.replace(cfg.synth, seed=seed))
    return cfg


def _say(args, msg):
    if not args.quiet:
        print(msg)


def _manifest_path(args):
    return args.manifest or os.path.join(args.out, "manifest.jsonl")


def _split_path(args):
    return args.split or os.path.join(args.out, "split.json")


def _load_data(args):
    mpath, spath = _manifest_path(args), _split_path(args)
    if not os.path.exists(mpath):
        raise ArtifactError(f"manifest not found: {mpath}")
    if not os.path.exists(spath):
        raise ArtifactError(f"split not found: {spath} (run `mmfuse split` first)")
    try:
        return load_manifest(mpath), SplitAssignment.load(spath)
    except (DataError, ValueError, KeyError) as exc:
        raise ArtifactError(f"invalid data artifact: {exc}") from None


def cmd_synth(args):
    cfg = _config(args)
    records = generate_synthetic(cfg.synth)
    path = os.path.join(args.out, "manifest.jsonl")
    save_manifest(records, path)
    _say(args, label_table(records))
    _say(args, f"wrote {len(records)} slides / {cfg.synth.n_cases} cases to {path}")


def cmd_split(args):
    cfg = _config(args)
    mpath = _manifest_path(args)
    if not os.path.exists(mpath):
        raise ArtifactError(f"manifest not found: {mpath}")
    try:
        records = load_manifest(mpath)
    except DataError as exc:
        raise ArtifactError(str(exc)) from None
    split = iterative_stratified_split(records, cfg.split_fractions, seed=cfg.seed)
    path = os.path.join(args.out, "split.json")
    split.save(path)
    _say(args, label_table(records, split))
    _say(args, f"wrote {path}")


def cmd_train(args):
    cfg = _config(args)
    records, split = _load_data(args)
    progress = None if args.quiet else print
    if args.cell:
        rec = run_cell(args.cell, cfg, records, split, args.out, progress)
    else:
        rec = run_experiment(cfg, records, split, args.out, cell=args.name, progress=progress)
    for row in rec.eval_rows:
        _say(args, f"{row.dataset:<5} {row.task:<10} {row.metric:<8} {row.point:.4f} ({row.ci_lo:.4f}, {row.ci_hi:.4f})")


def cmd_eval(args):
    cfg = _config(args)
    records, split = _load_data(args)
    if not os.path.exists(args.checkpoint):
        raise ArtifactError(f"checkpoint not found: {args.checkpoint}")
    try:
        model, _, meta = load_checkpoint(args.checkpoint)
    except (DataError, ValueError, KeyError) as exc:
        raise ArtifactError(f"invalid checkpoint {args.checkpoint}: {exc}") from None
    rows = []
    for ds in args.datasets.split(","):
        part = split.select(records, ds)
        if part:
            rows.extend(evaluate_model(model, part, meta.get("cell", "run"), ds,
                                       cfg.eval_resamples, cfg.eval_level, seed=cfg.seed))
    path = os.path.join(args.out, "eval.csv")
    write_eval_csv(rows, path)
    _say(args, f"wrote {path}")


def _write_reports(records, out, plot=True):
    report.write_merged_eval(records, os.path.join(out, "eval_report.csv"))
    report.write_comparison_csv(report.comparison_rows(records), os.path.join(out, "comparison.csv"))
    if plot:
        report.bar_chart_svg(records, os.path.join(out, "auc_roc.svg"))


def cmd_matrix(args):
    cfg = _config(args)
    if args.fusion:
        cfg = dataclasses.replace(cfg, fusion=dataclasses.replace(cfg.fusion, strategy=args.fusion))
    ablate = [a for a in (args.ablate or "").split(",") if a]
    cells = expand_cells([c for c in args.cells.split(",") if c], ablate)
    for c in cells:
        parse_cell(c, cfg)
    records, split = _load_data(args)
    progress = None if args.quiet else print
    recs = run_matrix(cfg, cells, records, split, args.out, progress, reuse=not args.force)
    report.check_pairing(recs)
    _write_reports(recs, args.out, plot=not args.no_plot)
    for row in report.comparison_rows(recs):
        _say(args, f"delta({row['cell_a']}, {row['cell_b']}) {row['task']:<10} "
                   f"AUC-ROC {100 * row['delta_roc']:+.2f}%")


def cmd_report(args):
    recs = []
    for d in args.run_dirs:
        try:
            recs.append(load_run_dir(d))
        except DataError as exc:
            raise ArtifactError(str(exc)) from None
    report.check_pairing(recs)
    _write_reports(recs, args.out, plot=not args.no_plot)
    _say(args, f"wrote reports for {len(recs)} run(s) to {args.out}")


def cmd_config(args):
    if args.action == "print-defaults":
        sys.stdout.write(dumps_config(ExperimentConfig()))


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON); defaults if omitted")
    common.add_argument("--out", default=".", help="output directory (created if absent)")
    common.add_argument("--seed", type=int, default=None, help="seed override (env MMFUSE_SEED)")
    common.add_argument("--quiet", action="store_true")
    common.add_argument("-v", "--verbose", action="count", default=0)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--manifest", help="manifest path (default: OUT/manifest.jsonl)")
    data.add_argument("--split", help="split path (default: OUT/split.json)")

    p = argparse.ArgumentParser(prog="mmfuse", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", parents=[common], help="generate a synthetic manifest")
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("split", parents=[common, data], help="case-level stratified split")
    sp.set_defaults(fn=cmd_split)

    sp = sub.add_parser("train", parents=[common, data], help="train and evaluate one configuration")
    sp.add_argument("--cell", help="matrix cell to train instead of the config's modalities/tasks")
    sp.add_argument("--name", default="run", help="label used in the eval report")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", parents=[common, data], help="evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--datasets", default="test", help="comma list of val,test,train")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("matrix", parents=[common, data], help="run the experiment matrix")
    sp.add_argument("--cells", default="SS,SM,MS,MM")
    sp.add_argument("--ablate", default="", help="comma list of text,structured,patch")
    sp.add_argument("--fusion", choices=("concat", "cbp"))
    sp.add_argument("--no-plot", action="store_true")
    sp.add_argument("--force", action="store_true", help="retrain cells even if stored results match")
    sp.set_defaults(fn=cmd_matrix)

    sp = sub.add_parser("report", parents=[common], help="merge stored runs into reports")
    sp.add_argument("run_dirs", nargs="+")
    sp.add_argument("--no-plot", action="store_true")
    sp.set_defaults(fn=cmd_report)

    sp = sub.add_parser("config", help="config helpers")
    sp.add_argument("action", choices=("print-defaults",))
    sp.set_defaults(fn=cmd_config, out=None, quiet=False, verbose=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else
                        logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.out:
            os.makedirs(args.out, exist_ok=True)
        args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except report.PairingError as exc:
        print(f"pairing violation: {exc}", file=sys.stderr)
        return EXIT_PAIRING
    except (ArtifactError, FileNotFoundError) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    return 0


if __name__ == "__main__":
    sys.exit(main())
