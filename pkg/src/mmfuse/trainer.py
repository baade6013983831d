"""Training loop and the SS / SM / MS / MM experiment matrix.

Cell names: ``SS`` (image only, one task), ``SM`` (image only, all tasks),
``MS`` (all modalities, one task), ``MM`` (all modalities, all tasks).
Modifiers: ``-text`` / ``-structured`` / ``-patch`` drop a modality,
``/cbp`` or ``/concat`` set the image-vs-language fusion, ``@task`` restricts a
single-task cell to one task. Single-task cells train one model per task.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .checkpoint import save_checkpoint
from .config import ExperimentConfig, dumps_config
from .data import (
    SPLITS,
    SlideRecord,
    SplitAssignment,
    generate_synthetic,
    iterative_stratified_split,
    load_manifest,
    records_labels,
    records_to_batch,
    resample_combinations,
    split_fingerprint,
    VOCAB,
)
from .errors import ConfigError, DataError
from .losses import combined_loss_and_grad
from .metrics import EvalRow, ScoredLabels, bootstrap_ci, read_eval_csv, write_eval_csv
from .nn import MODALITIES, TASKS, Batch, OptimizerState, SharedModel, adam_step
from .numerics import RngStream, softmax

log = logging.getLogger(__name__)

IMAGE_MODALITIES = ("slide", "patch")
METRICS = {"auc_roc": "roc", "auc_pr": "pr"}


@dataclass
class RunRecord:
    cell: str
    config_hash: str
    train_log: list = field(default_factory=list)
    eval_rows: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    test_fingerprint: str = ""
    n_parameters: dict = field(default_factory=dict)
    out_dir: Optional[str] = None
    data_fingerprint: str = ""
    model: Optional[SharedModel] = field(default=None, repr=False, compare=False)

    def metric(self, task, metric="auc_roc", dataset="test") -> float:
        for r in self.eval_rows:
            if (r.task, r.metric, r.dataset) == (task, metric, dataset):
                return r.point
        raise KeyError((task, metric, dataset))


# -- datasets ---------------------------------------------------------------

def load_dataset(cfg: ExperimentConfig):
    """``(records, split)`` from files when configured, else synthetic."""
    if cfg.manifest:
        records = load_manifest(cfg.manifest)
    else:
        records = generate_synthetic(cfg.synth)
    if cfg.split:
        split = SplitAssignment.load(cfg.split)
    else:
        split = iterative_stratified_split(records, cfg.split_fractions, seed=cfg.seed)
    return records, split


def data_fingerprint(records, split) -> str:
    """Hash of every record and its split assignment."""
    h = hashlib.sha256(split_fingerprint(records).encode())
    h.update(json.dumps(split.to_json(), sort_keys=True).encode())
    return h.hexdigest()


def _check_split_covers(records, split):
    missing = {r.case_id for r in records} - set(split.assignment)
    if missing:
        raise DataError(f"{len(missing)} case(s) have no split assignment, e.g. {sorted(missing)[0]}")


# -- training -----------------------------------------------------------------

def _drop_absent(batch: Batch, modalities) -> Batch:
    return Batch(
        slide=batch.slide if "slide" in modalities else None,
        patches=batch.patches if "patch" in modalities else None,
        tokens=batch.tokens if "text" in modalities else None,
        mask=batch.mask if "text" in modalities else None,
        structured=batch.structured if "structured" in modalities else None,
    )


def dataset_loss(model, batch, labels, loss_cfg, batch_size):
    """Mean over fixed consecutive batches of the per-batch loss breakdown."""
    n = len(batch)
    rows = []
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(n, start + batch_size))
        probs = model.forward(batch.take(idx))
        bd = combined_loss_and_grad(probs, {t: labels[t][idx] for t in probs}, loss_cfg, want_grad=False)
        rows.append(bd)
    out = {"total": float(np.mean([r.total for r in rows]))}
    out["multi"] = float(np.mean([r.multi for r in rows])) if rows[0].multi is not None else ""
    for t in model.config.tasks:
        out[f"focal_{t}"] = float(np.mean([r.focal[t] for r in rows]))
        out[f"sigma_sq_{t}"] = float(np.mean([r.sigma_sq[t] for r in rows]))
    return out


def predict(model: SharedModel, batch: Batch, batch_size=512) -> dict:
    outs = {t: [] for t in model.config.tasks}
    for start in range(0, len(batch), batch_size):
        probs = model.forward(batch.take(np.arange(start, min(len(batch), start + batch_size))))
        for t, p in probs.items():
            outs[t].append(p)
    return {t: np.concatenate(v) for t, v in outs.items()}


def evaluate_model(model: SharedModel, records, cell: str, dataset: str, n_resamples=1000,
                   level=0.95, seed=0, tasks=None) -> list:
    batch = _drop_absent(records_to_batch(records), model.config.modalities)
    probs = predict(model, batch)
    labels = records_labels(records)
    groups = np.array([r.case_id for r in records])
    rows = []
    for t in (tasks or model.config.tasks):
        sc = ScoredLabels(probs[t], labels[t], groups)
        for mname, kind in METRICS.items():
            ci = bootstrap_ci(sc, kind, n_resamples=n_resamples, level=level, seed=seed)
            skipped = ";".join(VOCAB[t][k] for k in ci.skipped_classes)
            rows.append(EvalRow(dataset, cell, t, mname, ci.point, ci.lo, ci.hi, n_resamples, skipped))
    return rows


def train_model(cfg: ExperimentConfig, train_records, audit_exclude=frozenset(), progress=None):
    """Train one model; returns ``(model, opt_state, log_rows)``.

    ``audit_exclude`` holds case ids that must never reach a training batch.
    """
    cfg.validate()
    if not train_records:
        raise DataError("empty training split")
    rng = RngStream(cfg.seed).child("train")
    resampled = resample_combinations(train_records, cfg.up_target, cfg.down_cap,
                                      seed=RngStream(cfg.seed).child("resample").stream_id)
    leaked = {r.case_id for r in resampled} & set(audit_exclude)
    if leaked:
        raise DataError(f"held-out case(s) in the training set, e.g. {sorted(leaked)[0]}")
    sample = resampled[0]
    mcfg = cfg.model_config(sample.slide_features.shape[0], sample.patch_features.shape[1])
    model = SharedModel(mcfg)
    state = OptimizerState.zeros_like(model.params)
    loss_cfg = cfg.effective_loss()

    full = _drop_absent(records_to_batch(resampled, mcfg.text.max_seq_len), mcfg.modalities)
    labels = records_labels(resampled)
    # epoch-0 / end-of-epoch losses use the original (unresampled) train split
    eval_batch = _drop_absent(records_to_batch(train_records, mcfg.text.max_seq_len), mcfg.modalities)
    eval_labels = records_labels(train_records)

    log_rows = [dict(epoch=0, step=0, lr=float(cfg.optim.lr0),
                     **dataset_loss(model, eval_batch, eval_labels, loss_cfg, cfg.batch_size))]
    n = len(full)
    for epoch in range(1, cfg.epochs + 1):
        g = rng.child(epoch).generator()
        order = g.permutation(n)
        epoch_batch = full
        if cfg.resample_patches and full.patches is not None:
            perm = np.argsort(g.random((n, 3)), axis=1)
            epoch_batch = dataclasses.replace(full, patches=np.take_along_axis(full.patches, perm[:, :, None], axis=1))
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grads = model.backward(epoch_batch.take(idx), {t: labels[t][idx] for t in mcfg.tasks}, loss_cfg)
            adam_step(state, model.params, grads, cfg.optim)
        row = dict(epoch=epoch, step=state.step,
                   lr=float(cfg.optim.lr0 * cfg.optim.decay_rate ** (state.step / cfg.optim.decay_steps)),
                   **dataset_loss(model, eval_batch, eval_labels, loss_cfg, cfg.batch_size))
        log_rows.append(row)
        if progress:
            progress(f"epoch {epoch}/{cfg.epochs}: loss {row['total']:.4f}")
    return model, state, log_rows


def run_experiment(cfg: ExperimentConfig, records=None, split=None, out_dir=None,
                   cell: str = "run", progress=None) -> RunRecord:
    """Train on the (resampled) train split, evaluate val/test without resampling."""
    cfg.validate()
    if records is None:
        records, split = load_dataset(cfg)
    _check_split_covers(records, split)
    parts = {s: split.select(records, s) for s in SPLITS}
    held_out = split.cases("val") | split.cases("test")
    model, state, log_rows = train_model(cfg, parts["train"], held_out, progress)
    rows = []
    for ds in cfg.eval_splits:
        if parts[ds]:
            rows.extend(evaluate_model(model, parts[ds], cell, ds, cfg.eval_resamples,
                                       cfg.eval_level, seed=cfg.seed))
    rec = RunRecord(cell, cfg.hash(), log_rows, rows, [], split_fingerprint(parts["test"]),
                    {"+".join(cfg.tasks): model.n_parameters()},
                    data_fingerprint=data_fingerprint(records, split))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ck = os.path.join(out_dir, "checkpoint.ckpt")
        save_checkpoint(ck, model, state, meta={"cell": cell, "config_hash": rec.config_hash})
        rec.checkpoints.append(ck)
        _persist(rec, cfg, out_dir)
    rec.model = model
    return rec


# -- matrix -------------------------------------------------------------------

_CELL_RE = re.compile(r"^(SS|SM|MS|MM)((?:-(?:text|structured|patch))*)(?:/(concat|cbp))?(?:@(\w+))?$")


def parse_cell(name: str, base: ExperimentConfig):
    """Returns ``(canonical_name, [(task_label, ExperimentConfig), ...])``."""
    m = _CELL_RE.match(name.strip())
    if not m:
        raise ConfigError(f"bad cell name {name!r}")
    kind, removed, fusion, only = m.groups()
    removed = [r for r in removed.split("-") if r]
    multimodal = kind[0] == "M"
    multitask = kind[1] == "M"
    mods = list(MODALITIES) if multimodal else list(IMAGE_MODALITIES)
    for r in removed:
        if r not in mods:
            raise ConfigError(f"cell {name!r}: modality {r!r} is not part of {kind}")
        mods.remove(r)
    if only is not None and (multitask or only not in TASKS):
        raise ConfigError(f"cell {name!r}: '@task' needs a single-task cell and a known task")
    fz = dataclasses.replace(base.fusion, strategy=fusion) if fusion else base.fusion
    common = dict(modalities=mods, fusion=fz)
    if multitask:
        runs = [("+".join(TASKS), dataclasses.replace(base, tasks=list(TASKS), **common))]
    else:
        tasks = [only] if only else list(TASKS)
        runs = [(t, dataclasses.replace(base, tasks=[t], **common)) for t in tasks]
    return name.strip(), runs


def run_cell(name, base: ExperimentConfig, records, split, out_dir=None, progress=None) -> RunRecord:
    cell, runs = parse_cell(name, base)
    log_rows, eval_rows, ckpts, nparams = [], [], [], {}
    fingerprint = split_fingerprint(split.select(records, "test"))
    for label, cfg in runs:
        sub = None if out_dir is None else os.path.join(out_dir, f"task-{label}")
        if progress:
            progress(f"[{cell}] training {label}")
        rr = run_experiment(cfg, records, split, sub, cell=cell, progress=progress)
        for row in rr.train_log:
            log_rows.append({"task_run": label, **row})
        eval_rows.extend(rr.eval_rows)
        ckpts.extend(rr.checkpoints)
        nparams.update(rr.n_parameters)
    hashes = "".join(cfg.hash() for _, cfg in runs)
    rec = RunRecord(cell, hashlib.sha256(hashes.encode()).hexdigest()[:16], log_rows, eval_rows,
                    ckpts, fingerprint, nparams, out_dir, data_fingerprint(records, split))
    if out_dir is not None:
        _persist(rec, runs[0][1], out_dir)
    return rec


def expand_cells(cells, ablate=(), fusion=None):
    """Cell list from ``--cells`` / ``--ablate`` / ``--fusion``: ablations drop
    one modality from ``MM`` each."""
    out = list(cells)
    for a in ablate:
        if a not in ("text", "structured", "patch"):
            raise ConfigError(f"unknown ablation {a!r}")
        out.append(f"MM-{a}")
    if fusion:
        out = [c if "/" in c else re.sub(r"^([SM]{2}(?:-\w+)*)", rf"\1/{fusion}", c) for c in out]
    seen = []
    for c in out:
        if c not in seen:
            seen.append(c)
    return seen


def run_matrix(base_cfg: ExperimentConfig, cells, records=None, split=None, out_dir=None,
               progress=None, reuse=True) -> list:
    """One RunRecord per cell, all on the same split and evaluation seed.

    With ``reuse`` a cell directory whose stored config hash matches is read
    back instead of retrained.
    """
    if records is None:
        records, split = load_dataset(base_cfg)
    for c in cells:
        parse_cell(c, base_cfg)
    data_key = data_fingerprint(records, split)
    out = []
    for c in cells:
        cdir = None if out_dir is None else os.path.join(out_dir, "cells", cell_dirname(c))
        if reuse and cdir is not None:
            cached = load_run_dir(cdir, missing_ok=True)
            expected = _cell_hash(c, base_cfg)
            if (cached is not None and cached.config_hash == expected
                    and cached.data_fingerprint == data_key):
                out.append(cached)
                continue
        out.append(run_cell(c, base_cfg, records, split, cdir, progress))
    return out


def _cell_hash(name, base):
    _, runs = parse_cell(name, base)
    return hashlib.sha256("".join(cfg.hash() for _, cfg in runs).encode()).hexdigest()[:16]


def cell_dirname(cell: str) -> str:
    return cell.replace("/", "_").replace("@", "_at_")


# -- persistence ----------------------------------------------------------------

def _persist(rec: RunRecord, cfg: ExperimentConfig, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        fh.write(dumps_config(cfg))
    write_train_log(rec.train_log, os.path.join(out_dir, "train_log.csv"))
    write_eval_csv(rec.eval_rows, os.path.join(out_dir, "eval.csv"))
    meta = {"cell": rec.cell, "config_hash": rec.config_hash, "test_fingerprint": rec.test_fingerprint,
            "n_parameters": rec.n_parameters, "data_fingerprint": rec.data_fingerprint,
            "checkpoints": [os.path.relpath(c, out_dir) for c in rec.checkpoints]}
    with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_train_log(rows, path):
    cols = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n", restval="")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def load_run_dir(path, missing_ok=False) -> Optional[RunRecord]:
    meta_path = os.path.join(path, "run.json")
    if not os.path.exists(meta_path):
        if missing_ok:
            return None
        raise DataError(f"{path}: not a run directory (run.json missing)")
    try:
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
        rows = read_eval_csv(os.path.join(path, "eval.csv"))
        with open(os.path.join(path, "train_log.csv"), newline="", encoding="utf-8") as fh:
            tl = list(csv.DictReader(fh))
        return RunRecord(meta["cell"], meta["config_hash"], tl, rows,
                         [os.path.join(path, c) for c in meta.get("checkpoints", [])],
                         meta["test_fingerprint"], meta.get("n_parameters", {}), path,
                         meta.get("data_fingerprint", ""))
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        if missing_ok:
            return None
        raise DataError(f"{path}: malformed run directory ({exc})") from None
