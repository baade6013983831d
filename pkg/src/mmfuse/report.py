"""Merged evaluation tables, relative-change comparisons and bar charts."""

from __future__ import annotations

import csv
import io
import re

from .errors import MMFuseError
from .metrics import write_eval_csv
from .nn import TASKS

COMPARISON_COLUMNS = ("cell_a", "cell_b", "task", "auc_roc_a", "auc_roc_b", "delta_roc",
                      "auc_pr_a", "auc_pr_b", "delta_pr")


class PairingError(MMFuseError):
    """Runs were evaluated on different test sets."""


def relative_delta(a: float, b: float) -> float:
    """Relative change of ``a`` over ``b``: 0.81 vs 0.60 gives 0.35."""
    return (a - b) / b


def check_pairing(records):
    prints = {r.test_fingerprint for r in records}
    if len(prints) > 1:
        names = ", ".join(f"{r.cell}={r.test_fingerprint[:8]}" for r in records)
        raise PairingError(f"runs were scored on different test sets: {names}")


def parent_cell(cell: str):
    m = re.match(r"^([SM]{2})((?:-\w+)+)(/\w+)?(@\w+)?$", cell)
    if not m:
        return None
    return m.group(1) + (m.group(3) or "") + (m.group(4) or "")


def comparison_pairs(cells):
    """Ablations compare against their parent cell when present; every other
    cell compares against the first one."""
    pairs = []
    for c in cells[1:]:
        p = parent_cell(c)
        ref = p if p in cells else cells[0]
        if ref != c:
            pairs.append((c, ref))
    return pairs


def _points(rec, dataset):
    return {(r.task, r.metric): r.point for r in rec.eval_rows if r.dataset == dataset}


def comparison_rows(records, dataset="test"):
    by_cell = {r.cell: r for r in records}
    rows = []
    for a, b in comparison_pairs([r.cell for r in records]):
        pa, pb = _points(by_cell[a], dataset), _points(by_cell[b], dataset)
        for t in TASKS:
            if (t, "auc_roc") not in pa or (t, "auc_roc") not in pb:
                continue
            row = {"cell_a": a, "cell_b": b, "task": t}
            for m, short in (("auc_roc", "roc"), ("auc_pr", "pr")):
                row[f"{m}_a"] = pa[(t, m)]
                row[f"{m}_b"] = pb[(t, m)]
                row[f"delta_{short}"] = relative_delta(pa[(t, m)], pb[(t, m)])
            rows.append(row)
    return rows


def write_comparison_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARISON_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def write_merged_eval(records, path):
    rows = [row for rec in records for row in rec.eval_rows]
    write_eval_csv(rows, path)


def bar_chart_svg(records, path, metric="auc_roc", dataset="test"):
    """Grouped bars of one metric per task per cell; output bytes depend only on the data."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "mmfuse", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(7, 3.5))
        width = 0.8 / max(1, len(records))
        for i, rec in enumerate(records):
            pts = _points(rec, dataset)
            xs = [k + i * width for k, t in enumerate(TASKS) if (t, metric) in pts]
            ys = [pts[(t, metric)] for t in TASKS if (t, metric) in pts]
            ax.bar(xs, ys, width=width, label=rec.cell)
        ax.set_xticks([k + 0.4 - width / 2 for k in range(len(TASKS))])
        ax.set_xticklabels(TASKS)
        ax.set_ylim(0.0, 1.0)
        ax.set_ylabel(f"macro {metric.replace('_', '-').upper()}")
        ax.legend(fontsize=7, ncol=2)
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())

