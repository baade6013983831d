"""Synthetic multimodal slide data, JSON-lines manifests, case-level
iterative stratified splitting and label-combination resampling.

Label vocabularies follow the pathology metadata tables: 2 fixation types,
14 tissue types, 2 procedures and 2 stains, i.e. 112 label combinations.
Tissue and procedure are case-level in the generator (a case's report
describes them); fixation and staining vary per slide.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, ParseError
from .nn import PAD_ID, TASKS, Batch
from .numerics import RngStream

log = logging.getLogger(__name__)

FIXATION = ("FFPE", "Frozen")
TISSUE = ("LN", "Uterus/cervix", "Breast", "Other", "Skin", "Prostate", "Colorectal",
          "H&N", "Thyroid", "UGI", "Ovary", "Kidney", "Lung", "Unlisted")
PROCEDURE = ("Surgical", "Biopsy")
STAINING = ("H&E", "IHC")
VOCAB = {"fixation": FIXATION, "tissue": TISSUE, "procedure": PROCEDURE, "staining": STAINING}
N_SITES = len(TISSUE)
N_COMBINATIONS = len(FIXATION) * len(TISSUE) * len(PROCEDURE) * len(STAINING)
MAX_SEQ_LEN = 64

CASE_TASKS = ("tissue", "procedure")
SLIDE_TASKS = ("fixation", "staining")


@dataclass(frozen=True)
class LabelSet:
    fixation: int
    tissue: int
    procedure: int
    staining: int

    def __post_init__(self):
        for t in TASKS:
            v = getattr(self, t)
            if not 0 <= v < len(VOCAB[t]):
                raise DataError(f"{t} label {v} out of range")

    def as_tuple(self):
        return (self.fixation, self.tissue, self.procedure, self.staining)

    def names(self) -> dict:
        return {t: VOCAB[t][getattr(self, t)] for t in TASKS}

    @classmethod
    def from_names(cls, names: dict) -> LabelSet:
        return cls(**{t: VOCAB[t].index(names[t]) for t in TASKS})


@dataclass(eq=False)
class SlideRecord:
    case_id: str
    slide_id: str
    labels: LabelSet
    slide_features: np.ndarray
    patch_features: np.ndarray  # (3, patch_dim)
    text_tokens: tuple
    primary_site: int

    def to_json(self) -> dict:
        obj = {"case_id": self.case_id, "slide_id": self.slide_id}
        obj.update(self.labels.names())
        obj["slide_features"] = [float(x) for x in self.slide_features]
        obj["patch_features"] = [[float(x) for x in p] for p in self.patch_features]
        obj["text_tokens"] = [int(t) for t in self.text_tokens]
        obj["primary_site"] = TISSUE[self.primary_site]
        return obj


def _default_informativeness():
    return {
        "slide": {"fixation": 1.5, "staining": 1.5, "tissue": 0.6, "procedure": 0.4},
        "patch": {"fixation": 0.6, "tissue": 0.8},
        "text": {"tissue": 0.06, "procedure": 0.06},
    }


@dataclass
class SynthConfig:
    """Generator parameters.

    ``imbalance_exponent`` shapes every task's class prior as
    ``rank ** -exponent`` (rank in vocabulary order), so a label
    combination's probability is a power law in the product of its ranks.
    ``informativeness`` maps modality -> task -> weight. For slide and patch
    the weight scales a class prototype added to the features; for text it
    is the probability that a token is drawn from the task-class block.
    """

    n_cases: int = 2000
    slides_per_case: list = field(default_factory=lambda: [0.4, 0.35, 0.25])
    imbalance_exponent: float = 1.0
    slide_dim: int = 32
    patch_dim: int = 16
    vocab_size: int = 256
    tokens_per_class: int = 8
    text_len_range: list = field(default_factory=lambda: [12, 120])
    informativeness: dict = field(default_factory=_default_informativeness)
    slide_noise: float = 1.0
    patch_noise: float = 1.0
    patch_confounder_prob: float = 0.4
    n_backgrounds: int = 3
    site_corruption_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n_cases < 1:
            raise ConfigError("synth.n_cases must be >= 1")
        p = np.asarray(self.slides_per_case, dtype=float)
        if p.size == 0 or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
            raise ConfigError("synth.slides_per_case must be probabilities summing to 1")
        if not (np.isfinite(self.imbalance_exponent) and self.imbalance_exponent >= 0):
            raise ConfigError("synth.imbalance_exponent must be a finite value >= 0")
        for name in ("slide_dim", "patch_dim", "tokens_per_class", "n_backgrounds"):
            if getattr(self, name) < 1:
                raise ConfigError(f"synth.{name} must be >= 1")
        for name in ("patch_confounder_prob", "site_corruption_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"synth.{name} must lie in [0, 1]")
        for name in ("slide_noise", "patch_noise"):
            if not (np.isfinite(getattr(self, name)) and getattr(self, name) >= 0):
                raise ConfigError(f"synth.{name} must be >= 0")
        lo, hi = self.text_len_range
        if not 1 <= lo <= hi:
            raise ConfigError("synth.text_len_range must satisfy 1 <= lo <= hi")
        allowed = {"slide": TASKS, "patch": TASKS, "text": CASE_TASKS}
        for mod, weights in self.informativeness.items():
            if mod not in allowed:
                raise ConfigError(f"synth.informativeness.{mod}: unknown modality")
            for task, w in weights.items():
                if task not in allowed[mod]:
                    raise ConfigError(f"synth.informativeness.{mod}.{task}: not allowed")
                if not (np.isfinite(w) and w >= 0):
                    raise ConfigError(f"synth.informativeness.{mod}.{task} must be finite and >= 0")
        text_w = self.informativeness.get("text", {})
        if sum(text_w.values()) > 1.0:
            raise ConfigError("synth.informativeness.text weights are probabilities; their sum must be <= 1")
        if self.vocab_size <= self.first_generic_token():
            raise ConfigError("synth.vocab_size too small for the class token blocks")

    def weight(self, modality, task) -> float:
        return float(self.informativeness.get(modality, {}).get(task, 0.0))

    def first_generic_token(self) -> int:
        return 1 + sum(len(VOCAB[t]) for t in CASE_TASKS) * self.tokens_per_class

    def token_block(self, task, cls) -> np.ndarray:
        start = 1
        for t in CASE_TASKS:
            if t == task:
                a = start + cls * self.tokens_per_class
                return np.arange(a, a + self.tokens_per_class)
            start += len(VOCAB[t]) * self.tokens_per_class
        raise KeyError(task)

    def class_prior(self, task) -> np.ndarray:
        ranks = np.arange(1, len(VOCAB[task]) + 1, dtype=float)
        w = ranks ** -self.imbalance_exponent
        return w / w.sum()


def _unit_rows(g, n, d):
    x = g.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate_synthetic(cfg: SynthConfig) -> list:
    """Deterministic synthetic dataset; see :class:`SynthConfig`."""
    cfg.validate()
    root = RngStream(cfg.seed)
    gp = root.child("prototypes").generator()
    slide_proto = {t: _unit_rows(gp, len(VOCAB[t]), cfg.slide_dim) for t in TASKS}
    patch_proto = {t: _unit_rows(gp, len(VOCAB[t]), cfg.patch_dim) for t in TASKS}
    backgrounds = _unit_rows(gp, cfg.n_backgrounds, cfg.patch_dim)
    priors = {t: cfg.class_prior(t) for t in TASKS}
    generic = np.arange(cfg.first_generic_token(), cfg.vocab_size)
    n_slide_choices = np.arange(1, len(cfg.slides_per_case) + 1)

    g = root.child("records").generator()
    records = []
    for c in range(cfg.n_cases):
        case_id = f"case{c:05d}"
        tissue = int(g.choice(len(TISSUE), p=priors["tissue"]))
        procedure = int(g.choice(len(PROCEDURE), p=priors["procedure"]))
        site = tissue
        if g.random() < cfg.site_corruption_prob:
            site = int((tissue + g.integers(1, N_SITES)) % N_SITES)

        length = int(g.integers(cfg.text_len_range[0], cfg.text_len_range[1] + 1))
        u = g.random(length)
        tokens = g.choice(generic, size=length)
        lo = 0.0
        for task, cls in (("tissue", tissue), ("procedure", procedure)):
            w = cfg.weight("text", task)
            sel = (u >= lo) & (u < lo + w)
            tokens[sel] = g.choice(cfg.token_block(task, cls), size=int(sel.sum()))
            lo += w
        tokens = tuple(int(t) for t in tokens[:MAX_SEQ_LEN])

        n_slides = int(g.choice(n_slide_choices, p=cfg.slides_per_case))
        for k in range(n_slides):
            labels = LabelSet(
                fixation=int(g.choice(len(FIXATION), p=priors["fixation"])),
                tissue=tissue,
                procedure=procedure,
                staining=int(g.choice(len(STAINING), p=priors["staining"])),
            )
            lab = dict(zip(TASKS, labels.as_tuple()))
            slide = cfg.slide_noise * g.normal(size=cfg.slide_dim)
            for t in TASKS:
                slide += cfg.weight("slide", t) * slide_proto[t][lab[t]]
            patches = cfg.patch_noise * g.normal(size=(3, cfg.patch_dim))
            confounded = g.random(3) < cfg.patch_confounder_prob
            bg = g.integers(0, cfg.n_backgrounds, size=3)
            for j in range(3):
                if confounded[j]:
                    # generic fat / connective-tissue look: no tissue signal
                    patches[j] += backgrounds[bg[j]]
                    patches[j] += cfg.weight("patch", "fixation") * patch_proto["fixation"][lab["fixation"]]
                else:
                    for t in TASKS:
                        patches[j] += cfg.weight("patch", t) * patch_proto[t][lab[t]]
            records.append(SlideRecord(case_id, f"{case_id}-s{k}", labels, slide, patches, tokens, site))
    return records


# -- manifests ------------------------------------------------------------

_FIELDS = ("case_id", "slide_id", "fixation", "tissue", "procedure", "staining",
           "slide_features", "patch_features", "text_tokens", "primary_site")


def record_from_json(obj, line=None) -> SlideRecord:
    if not isinstance(obj, dict):
        raise ParseError("record must be a JSON object", line)
    for f in _FIELDS:
        if f not in obj:
            raise ParseError(f"missing field {f!r}", line, f)
    extra = set(obj) - set(_FIELDS)
    if extra:
        raise ParseError(f"unknown field(s) {sorted(extra)}", line, sorted(extra)[0])
    for f in ("case_id", "slide_id"):
        if not isinstance(obj[f], str) or not obj[f]:
            raise ParseError(f"{f} must be a non-empty string", line, f)
    names = {}
    for t in TASKS:
        if obj[t] not in VOCAB[t]:
            raise ParseError(f"{t} must be one of {list(VOCAB[t])}, got {obj[t]!r}", line, t)
        names[t] = obj[t]
    if obj["primary_site"] not in TISSUE:
        raise ParseError(f"primary_site must be one of {list(TISSUE)}", line, "primary_site")
    try:
        slide = np.asarray(obj["slide_features"], dtype=np.float64)
        patches = np.asarray(obj["patch_features"], dtype=np.float64)
    except (TypeError, ValueError):
        raise ParseError("feature arrays must contain numbers", line, "slide_features") from None
    if slide.ndim != 1 or slide.size == 0 or not np.all(np.isfinite(slide)):
        raise ParseError("slide_features must be a non-empty array of finite numbers", line, "slide_features")
    if patches.ndim != 2 or patches.shape[0] != 3 or not np.all(np.isfinite(patches)):
        raise ParseError("patch_features must be exactly 3 equal-length arrays", line, "patch_features")
    toks = obj["text_tokens"]
    if not isinstance(toks, list) or not all(isinstance(t, int) and not isinstance(t, bool) and t >= 0 for t in toks):
        raise ParseError("text_tokens must be an array of non-negative integers", line, "text_tokens")
    return SlideRecord(obj["case_id"], obj["slide_id"], LabelSet.from_names(names), slide, patches,
                       tuple(toks), TISSUE.index(obj["primary_site"]))


def load_manifest(path) -> list:
    records = []
    seen = set()
    dims = None
    case_info = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
            rec = record_from_json(obj, lineno)
            if rec.slide_id in seen:
                raise DataError(f"line {lineno}: duplicate slide_id {rec.slide_id!r}")
            seen.add(rec.slide_id)
            d = (rec.slide_features.shape, rec.patch_features.shape)
            if dims is None:
                dims = d
            elif d != dims:
                raise ParseError(f"feature dimensions {d} differ from earlier records {dims}", lineno, "slide_features")
            info = (rec.text_tokens, rec.primary_site)
            if case_info.setdefault(rec.case_id, info) != info:
                raise DataError(f"line {lineno}: slides of case {rec.case_id!r} disagree on case-level data")
            records.append(rec)
    return records


def dumps_record(rec: SlideRecord) -> str:
    return json.dumps(rec.to_json(), ensure_ascii=False)


def save_manifest(records, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(dumps_record(rec) + "\n")


# -- featurisation --------------------------------------------------------

def encode_structured(primary_site: int) -> np.ndarray:
    if not 0 <= int(primary_site) < N_SITES:
        raise DataError(f"primary site index {primary_site} out of range")
    v = np.zeros(N_SITES)
    v[int(primary_site)] = 1.0
    return v


def truncate_pad_text(tokens, max_len: int = MAX_SEQ_LEN, pad_id: int = PAD_ID):
    """Keep the first ``max_len`` tokens, right-pad with ``pad_id``."""
    toks = np.asarray(list(tokens)[:max_len], dtype=np.int64)
    out = np.full(max_len, pad_id, dtype=np.int64)
    out[: toks.size] = toks
    mask = np.zeros(max_len, dtype=bool)
    mask[: toks.size] = True
    return out, mask


def records_to_batch(records, max_len: int = MAX_SEQ_LEN) -> Batch:
    if not records:
        raise DataError("no records")
    text = [truncate_pad_text(r.text_tokens, max_len) for r in records]
    return Batch(
        slide=np.stack([r.slide_features for r in records]),
        patches=np.stack([r.patch_features for r in records]),
        tokens=np.stack([t for t, _ in text]),
        mask=np.stack([m for _, m in text]),
        structured=np.stack([encode_structured(r.primary_site) for r in records]),
    )


def records_labels(records) -> dict:
    arr = np.array([r.labels.as_tuple() for r in records], dtype=np.int64).reshape(-1, len(TASKS))
    return {t: arr[:, i] for i, t in enumerate(TASKS)}


# -- splitting ------------------------------------------------------------

SPLITS = ("train", "val", "test")


@dataclass
class SplitAssignment:
    assignment: dict  # case_id -> split name

    def split_of(self, case_id) -> str:
        return self.assignment[case_id]

    def cases(self, name) -> set:
        return {c for c, s in self.assignment.items() if s == name}

    def select(self, records, name) -> list:
        return [r for r in records if self.assignment.get(r.case_id) == name]

    def to_json(self) -> dict:
        return {"assignment": dict(sorted(self.assignment.items()))}

    @classmethod
    def from_json(cls, obj) -> SplitAssignment:
        a = obj["assignment"]
        bad = {v for v in a.values() if v not in SPLITS}
        if bad:
            raise ParseError(f"unknown split name(s) {sorted(bad)}")
        return cls(dict(a))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> SplitAssignment:
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def case_label_flags(records):
    """``(case_ids, flags)`` with one boolean column per (task, class)."""
    offsets = {}
    off = 0
    for t in TASKS:
        offsets[t] = off
        off += len(VOCAB[t])
    cases = sorted({r.case_id for r in records})
    row = {c: i for i, c in enumerate(cases)}
    flags = np.zeros((len(cases), off), dtype=bool)
    for r in records:
        for t, v in zip(TASKS, r.labels.as_tuple()):
            flags[row[r.case_id], offsets[t] + v] = True
    return cases, flags


def iterative_stratified_split(records, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> SplitAssignment:
    """Case-level iterative stratification over the 20 class flags.

    Repeatedly take the label with the fewest unassigned cases and hand its
    cases to the split with the largest remaining demand for that label;
    ties go to the split with more remaining capacity, then to a seeded draw.
    """
    if not records:
        raise DataError("cannot split an empty dataset")
    fr = np.asarray(fractions, dtype=float)
    if fr.size != len(SPLITS) or np.any(fr < 0) or not np.isclose(fr.sum(), 1.0):
        raise ConfigError("split fractions must be 3 non-negative numbers summing to 1")
    cases, flags = case_label_flags(records)
    g = RngStream(seed).child("split").generator()
    n = len(cases)
    capacity = fr * n
    demand = fr[:, None] * flags.sum(axis=0)[None, :]
    unassigned = np.ones(n, dtype=bool)
    out = np.full(n, -1)
    while unassigned.any():
        counts = flags[unassigned].sum(axis=0)
        live = np.flatnonzero(counts > 0)
        if live.size == 0:
            idx = np.flatnonzero(unassigned)
            label = None
        else:
            label = live[np.argmin(counts[live])]
            idx = np.flatnonzero(unassigned & flags[:, label])
        for i in g.permutation(idx):
            if label is None:
                cand = np.flatnonzero(capacity == capacity.max())
            else:
                d = demand[:, label]
                cand = np.flatnonzero(d == d.max())
                if cand.size > 1:
                    cap = capacity[cand]
                    cand = cand[cap == cap.max()]
            j = int(cand[0] if cand.size == 1 else g.choice(cand))
            out[i] = j
            unassigned[i] = False
            capacity[j] -= 1
            demand[j, flags[i]] -= 1
    return SplitAssignment({c: SPLITS[j] for c, j in zip(cases, out)})


# -- resampling -----------------------------------------------------------

def combination_counts(records) -> Counter:
    return Counter(r.labels.as_tuple() for r in records)


def resample_combinations(train_records, up_target: int = 50, down_cap: int = 100, seed: int = 0) -> list:
    """Per label combination: upsample below ``up_target`` with replacement,
    downsample above ``down_cap`` without replacement, leave the band alone.

    Upsampling keeps every original record and adds draws from them.
    Output is grouped by combination in sorted order.
    """
    if up_target < 0 or down_cap < 1 or up_target > down_cap:
        raise ConfigError(f"need 0 <= up_target <= down_cap, got {up_target}, {down_cap}")
    groups = defaultdict(list)
    for r in train_records:
        groups[r.labels.as_tuple()].append(r)
    root = RngStream(seed).child("resample")
    out = []
    for combo in sorted(groups):
        recs = groups[combo]
        g = root.child(int("".join(f"{v:02d}" for v in combo))).generator()
        if len(recs) < up_target:
            extra = g.integers(0, len(recs), size=up_target - len(recs))
            out.extend(recs + [recs[i] for i in extra])
        elif len(recs) > down_cap:
            keep = np.sort(g.choice(len(recs), size=down_cap, replace=False))
            out.extend(recs[i] for i in keep)
        else:
            out.extend(recs)
    return out


# -- summaries ------------------------------------------------------------

def label_table(records, split: Optional[SplitAssignment] = None) -> str:
    """Plain-text per-class slide counts, optionally per split."""
    groups = {"all": list(records)} if split is None else {s: split.select(records, s) for s in SPLITS}
    lines = []
    head = f"{'task':<10} {'class':<14}" + "".join(f"{g:>10} {'%':>6}" for g in groups)
    lines.append(head)
    lines.append(f"{'':<10} {'#case':<14}" + "".join(f"{len({r.case_id for r in rs}):>10} {'':>6}" for rs in groups.values()))
    lines.append(f"{'':<10} {'#slide':<14}" + "".join(f"{len(rs):>10} {'':>6}" for rs in groups.values()))
    for t in TASKS:
        for ci, name in enumerate(VOCAB[t]):
            cells = ""
            for rs in groups.values():
                k = sum(1 for r in rs if getattr(r.labels, t) == ci)
                pct = 100.0 * k / len(rs) if rs else 0.0
                cells += f"{k:>10} {pct:>6.1f}"
            lines.append(f"{t if ci == 0 else '':<10} {name:<14}" + cells)
    counts = combination_counts(records)
    lines.append(f"present combinations: {len(counts)} / {N_COMBINATIONS}; "
                 f"max/min slides per combination: {max(counts.values())}/{min(counts.values())}")
    return "\n".join(lines)


def split_fingerprint(records: Sequence) -> str:
    h = hashlib.sha256()
    for line in sorted(dumps_record(r) for r in records):
        h.update(line.encode())
        h.update(b"\n")
    return h.hexdigest()
