"""Hard-parameter-sharing multitask network with hand-written backprop.

Per-modality encoders feed one fused representation; each task owns a
linear head on top of it. Parameters live in a flat ``dict`` of float64
arrays so gradients, optimizer moments and checkpoints share one layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import fusion as fz
from .errors import ConfigError, DataError, DimensionError
from .losses import LossConfig, combined_loss_and_grad
from .numerics import RngStream, softmax

MODALITIES = ("slide", "patch", "text", "structured")
TASK_CLASSES = {"fixation": 2, "tissue": 14, "procedure": 2, "staining": 2}
TASKS = tuple(TASK_CLASSES)
PAD_ID = 0


@dataclass
class EncoderSpec:
    kind: str = "dense"
    input_dim: int = 0
    hidden_dims: list = field(default_factory=list)
    output_dim: int = 16
    activation: str = "relu"
    vocab_size: int = 0
    embed_dim: int = 16
    max_seq_len: int = 64

    def __post_init__(self):
        if self.kind not in ("dense", "embedding"):
            raise ConfigError(f"encoder kind must be dense or embedding, got {self.kind!r}")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError(f"activation must be relu or tanh, got {self.activation!r}")
        if self.output_dim < 1:
            raise ConfigError("encoder output_dim must be >= 1")
        if self.kind == "embedding" and self.max_seq_len < 1:
            raise ConfigError("embedding encoder needs max_seq_len >= 1")

    def layer_dims(self):
        first = self.embed_dim if self.kind == "embedding" else self.input_dim
        dims = [first] + list(self.hidden_dims) + [self.output_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class ModelConfig:
    """Architecture. Input dims are filled from the data by the trainer."""

    modalities: tuple = MODALITIES
    tasks: tuple = TASKS
    slide: EncoderSpec = field(default_factory=lambda: EncoderSpec(hidden_dims=[32], output_dim=16))
    patch: EncoderSpec = field(default_factory=lambda: EncoderSpec(hidden_dims=[16], output_dim=8))
    text: EncoderSpec = field(default_factory=lambda: EncoderSpec(
        kind="embedding", vocab_size=256, embed_dim=16, output_dim=16))
    structured: EncoderSpec = field(default_factory=lambda: EncoderSpec(input_dim=14, output_dim=8))
    fusion: fz.FusionConfig = field(default_factory=fz.FusionConfig)
    init_seed: int = 0

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        self.tasks = tuple(self.tasks)
        if not self.modalities or any(m not in MODALITIES for m in self.modalities):
            raise ConfigError(f"modalities must be a non-empty subset of {MODALITIES}, got {self.modalities}")
        if not self.tasks or any(t not in TASK_CLASSES for t in self.tasks):
            raise ConfigError(f"tasks must be a non-empty subset of {TASKS}, got {self.tasks}")
        if "patch" in self.modalities and "slide" not in self.modalities:
            raise ConfigError("the patch modality requires the slide modality")


@dataclass
class Batch:
    """Model inputs for ``B`` samples; absent modalities are ``None``."""

    slide: Optional[np.ndarray] = None       # (B, slide_dim)
    patches: Optional[np.ndarray] = None     # (B, 3, patch_dim)
    tokens: Optional[np.ndarray] = None      # (B, L) int, PAD_ID padded
    mask: Optional[np.ndarray] = None        # (B, L) bool
    structured: Optional[np.ndarray] = None  # (B, n_sites)

    def __len__(self):
        for v in (self.slide, self.tokens, self.structured):
            if v is not None:
                return v.shape[0]
        return 0

    def take(self, idx) -> Batch:
        def pick(a):
            return None if a is None else a[idx]
        return Batch(pick(self.slide), pick(self.patches), pick(self.tokens),
                     pick(self.mask), pick(self.structured))


def _act(name, z):
    return np.maximum(z, 0.0) if name == "relu" else np.tanh(z)


def _act_grad(name, z, a):
    return (z > 0).astype(np.float64) if name == "relu" else 1.0 - a * a


class SharedModel:
    """Encoders + fusion + one linear head per task.

    The three patch vectors go through one shared patch encoder.
    """

    def __init__(self, config: ModelConfig, params=None):
        self.config = config
        self.sketches = {}
        if params is None:
            params = self._init_params()
        self.params = params
        self._validate_params()

    # -- construction -------------------------------------------------
    def _encoder_specs(self):
        cfg = self.config
        names = [m for m in MODALITIES if m in cfg.modalities]
        return {m: getattr(cfg, m) for m in names}

    def _init_params(self):
        rng = RngStream(self.config.init_seed)
        params = {}
        for mod, spec in self._encoder_specs().items():
            if spec.kind == "embedding":
                g = rng.child(f"{mod}.embed").generator()
                params[f"{mod}.embed"] = g.normal(0.0, 0.02, size=(spec.vocab_size, spec.embed_dim))
            for i, (fi, fo) in enumerate(spec.layer_dims()):
                params[f"{mod}.l{i}.W"] = _glorot(rng.child(f"{mod}.l{i}.W"), fi, fo)
                params[f"{mod}.l{i}.b"] = np.zeros(fo)
        dim = self.shared_dim()
        for t in self.config.tasks:
            params[f"head.{t}.W"] = _glorot(rng.child(f"head.{t}.W"), dim, TASK_CLASSES[t])
            params[f"head.{t}.b"] = np.zeros(TASK_CLASSES[t])
        return params

    def _validate_params(self):
        expected = self._init_shapes()
        if set(expected) != set(self.params):
            raise DimensionError("parameter names do not match the model config")
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise DimensionError(f"parameter {k} has shape {self.params[k].shape}, expected {shape}")

    def _init_shapes(self):
        shapes = {}
        for mod, spec in self._encoder_specs().items():
            if spec.kind == "embedding":
                shapes[f"{mod}.embed"] = (spec.vocab_size, spec.embed_dim)
            for i, (fi, fo) in enumerate(spec.layer_dims()):
                shapes[f"{mod}.l{i}.W"] = (fi, fo)
                shapes[f"{mod}.l{i}.b"] = (fo,)
        dim = self.shared_dim()
        for t in self.config.tasks:
            shapes[f"head.{t}.W"] = (dim, TASK_CLASSES[t])
            shapes[f"head.{t}.b"] = (TASK_CLASSES[t],)
        return shapes

    def _sketch_pair(self, role, nx, ny):
        key = (role, nx, ny)
        if key not in self.sketches:
            self.sketches[key] = fz.make_sketch_pair(self.config.fusion, role, nx, ny)
        return self.sketches[key]

    def image_dim(self):
        cfg = self.config
        if "slide" not in cfg.modalities:
            return 0
        ds = cfg.slide.output_dim
        if "patch" not in cfg.modalities:
            return ds
        if cfg.fusion.image_scale_strategy == "cbp":
            return cfg.fusion.cbp_dim
        return ds + 3 * cfg.patch.output_dim

    def lang_dim(self):
        cfg = self.config
        return sum(getattr(cfg, m).output_dim for m in ("text", "structured") if m in cfg.modalities)

    def shared_dim(self):
        img, lang = self.image_dim(), self.lang_dim()
        if self.config.fusion.strategy == "cbp" and img and lang:
            return self.config.fusion.cbp_dim
        return img + lang

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def all_sketches(self):
        """Materialise every sketch the forward pass uses (for checkpoints)."""
        cfg = self.config
        if "patch" in cfg.modalities and cfg.fusion.image_scale_strategy == "cbp":
            self._sketch_pair("image", cfg.slide.output_dim, 3 * cfg.patch.output_dim)
        if cfg.fusion.strategy == "cbp" and self.image_dim() and self.lang_dim():
            self._sketch_pair("shared", self.image_dim(), self.lang_dim())
        return dict(self.sketches)

    # -- forward / backward ----------------------------------------------
    def _check_batch(self, batch: Batch):
        cfg = self.config
        n = len(batch)
        if n == 0:
            raise DimensionError("empty batch")
        need = {"slide": batch.slide, "patch": batch.patches, "text": batch.tokens,
                "structured": batch.structured}
        for m in cfg.modalities:
            if need[m] is None:
                raise DimensionError(f"batch lacks the {m} modality")
            if need[m].shape[0] != n:
                raise DimensionError(f"{m} batch size mismatch")
        if "slide" in cfg.modalities and batch.slide.shape[1] != cfg.slide.input_dim:
            raise DimensionError(f"slide dim {batch.slide.shape[1]} != {cfg.slide.input_dim}")
        if "patch" in cfg.modalities and batch.patches.shape[1:] != (3, cfg.patch.input_dim):
            raise DimensionError(f"patches shape {batch.patches.shape[1:]} != (3, {cfg.patch.input_dim})")
        if "structured" in cfg.modalities and batch.structured.shape[1] != cfg.structured.input_dim:
            raise DimensionError("structured dim mismatch")
        if "text" in cfg.modalities:
            if batch.mask is None or batch.mask.shape != batch.tokens.shape:
                raise DimensionError("text tokens need a same-shape mask")
            if batch.tokens.size and (batch.tokens.min() < 0 or batch.tokens.max() >= cfg.text.vocab_size):
                raise DataError("token id outside the vocabulary")

    def _dense_stack(self, prefix, spec, x, cache):
        layers = []
        for i in range(len(spec.layer_dims())):
            W, b = self.params[f"{prefix}.l{i}.W"], self.params[f"{prefix}.l{i}.b"]
            z = x @ W + b
            a = _act(spec.activation, z)
            layers.append((x, z, a))
            x = a
        cache[prefix] = layers
        return x

    def _dense_stack_back(self, prefix, spec, g, grads, cache):
        for i in reversed(range(len(spec.layer_dims()))):
            x, z, a = cache[prefix][i]
            dz = g * _act_grad(spec.activation, z, a)
            grads[f"{prefix}.l{i}.W"] = x.T @ dz
            grads[f"{prefix}.l{i}.b"] = dz.sum(axis=0)
            g = dz @ self.params[f"{prefix}.l{i}.W"].T
        return g

    def _forward(self, batch: Batch):
        self._check_batch(batch)
        cfg = self.config
        mods = cfg.modalities
        n = len(batch)
        cache = {}
        reps = {}
        if "slide" in mods:
            reps["slide"] = self._dense_stack("slide", cfg.slide, batch.slide, cache)
        if "patch" in mods:
            flat = batch.patches.reshape(n * 3, -1)
            reps["patch"] = self._dense_stack("patch", cfg.patch, flat, cache).reshape(n, -1)
        if "text" in mods:
            emb = self.params["text.embed"][batch.tokens]
            m = batch.mask.astype(np.float64)
            count = np.maximum(m.sum(axis=1, keepdims=True), 1.0)
            pooled = (emb * m[..., None]).sum(axis=1) / count
            cache["text.pool"] = (m, count)
            reps["text"] = self._dense_stack("text", cfg.text, pooled, cache)
        if "structured" in mods:
            reps["structured"] = self._dense_stack("structured", cfg.structured, batch.structured, cache)

        image = None
        if "slide" in mods:
            if "patch" not in mods:
                image = reps["slide"]
            elif cfg.fusion.image_scale_strategy == "concat":
                image = np.concatenate([reps["slide"], reps["patch"]], axis=1)
            else:
                px, py = self._sketch_pair("image", reps["slide"].shape[1], reps["patch"].shape[1])
                image = fz.cbp_fuse(reps["slide"], reps["patch"], px, py)
        lang_parts = [reps[m] for m in ("text", "structured") if m in mods]
        lang = np.concatenate(lang_parts, axis=1) if lang_parts else None
        if cfg.fusion.strategy == "cbp" and image is not None and lang is not None:
            px, py = self._sketch_pair("shared", image.shape[1], lang.shape[1])
            shared = fz.cbp_fuse(image, lang, px, py)
        else:
            shared = np.concatenate([v for v in (image, lang) if v is not None], axis=1)
        logits = {t: shared @ self.params[f"head.{t}.W"] + self.params[f"head.{t}.b"]
                  for t in cfg.tasks}
        cache.update(reps=reps, image=image, lang=lang, shared=shared)
        return logits, cache

    def logits(self, batch: Batch) -> dict:
        return self._forward(batch)[0]

    def forward(self, batch: Batch) -> dict:
        """Per-task ``(B, C_t)`` class probabilities."""
        return {t: softmax(z, axis=1) for t, z in self.logits(batch).items()}

    def backward(self, batch: Batch, labels: dict, loss_cfg: LossConfig, tasks=None):
        """Loss breakdown and gradients of the total loss for every parameter.

        ``tasks`` restricts the loss to a subset of the model's heads; heads
        outside it receive zero gradient.
        """
        logits, cache = self._forward(batch)
        active = tuple(self.config.tasks if tasks is None else tasks)
        probs = {t: softmax(logits[t], axis=1) for t in active}
        for t in active:
            if t not in labels:
                raise DataError(f"missing labels for task {t}")
        breakdown, dlogits = combined_loss_and_grad(probs, {t: labels[t] for t in active}, loss_cfg)
        grads = self._backprop(batch, cache, dlogits)
        return breakdown, grads

    def _backprop(self, batch, cache, dlogits):
        cfg = self.config
        mods = cfg.modalities
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        shared = cache["shared"]
        g_shared = np.zeros_like(shared)
        for t, dz in dlogits.items():
            grads[f"head.{t}.W"] = shared.T @ dz
            grads[f"head.{t}.b"] = dz.sum(axis=0)
            g_shared += dz @ self.params[f"head.{t}.W"].T

        image, lang = cache["image"], cache["lang"]
        if cfg.fusion.strategy == "cbp" and image is not None and lang is not None:
            px, py = self._sketch_pair("shared", image.shape[1], lang.shape[1])
            g_image, g_lang = fz.cbp_backward(g_shared, image, lang, px, py)
        else:
            split = image.shape[1] if image is not None else 0
            g_image = g_shared[:, :split] if image is not None else None
            g_lang = g_shared[:, split:] if lang is not None else None

        reps = cache["reps"]
        g_reps = {}
        if g_lang is not None:
            off = 0
            for m in ("text", "structured"):
                if m in mods:
                    w = reps[m].shape[1]
                    g_reps[m] = g_lang[:, off:off + w]
                    off += w
        if g_image is not None:
            if "patch" not in mods:
                g_reps["slide"] = g_image
            elif cfg.fusion.image_scale_strategy == "concat":
                w = reps["slide"].shape[1]
                g_reps["slide"], g_reps["patch"] = g_image[:, :w], g_image[:, w:]
            else:
                px, py = self._sketch_pair("image", reps["slide"].shape[1], reps["patch"].shape[1])
                g_reps["slide"], g_reps["patch"] = fz.cbp_backward(g_image, reps["slide"], reps["patch"], px, py)

        n = shared.shape[0]
        for m, g in g_reps.items():
            spec = getattr(cfg, m)
            if m == "patch":
                g = g.reshape(n * 3, -1)
            gin = self._dense_stack_back(m, spec, g, grads, cache)
            if m == "text":
                mask, count = cache["text.pool"]
                g_emb = (gin / count)[:, None, :] * mask[..., None]
                e = np.zeros_like(self.params["text.embed"])
                np.add.at(e, batch.tokens, g_emb)
                grads["text.embed"] = e
        return grads


def _glorot(rng: RngStream, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.generator().uniform(-a, a, size=(fan_in, fan_out))


# -- optimisation -------------------------------------------------------

@dataclass
class OptimConfig:
    lr0: float = 1e-3
    decay_rate: float = 0.9
    decay_steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: Optional[float] = 0.5

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ConfigError("optim.lr0 must be > 0")
        if not 0 < self.decay_rate <= 1:
            raise ConfigError("optim.decay_rate must lie in (0, 1]")
        if self.decay_steps < 1:
            raise ConfigError("optim.decay_steps must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("optim betas must lie in [0, 1)")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("optim.clip_norm must be > 0 or null")


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> OptimizerState:
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def scheduled_lr(step: int, cfg: OptimConfig = OptimConfig()) -> float:
    """Continuous exponential decay: ``lr0 * rate ** (step / decay_steps)``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return cfg.lr0 * cfg.decay_rate ** (step / cfg.decay_steps)


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads, clip_norm):
    if clip_norm is None:
        return grads
    norm = global_norm(grads)
    if norm <= clip_norm:
        return grads
    scale = clip_norm / norm
    return {k: g * scale for k, g in grads.items()}


def adam_step(state: OptimizerState, params: dict, grads: dict, cfg: OptimConfig = OptimConfig()):
    """One clipped, bias-corrected Adam update; mutates and returns ``(params, state)``.

    The learning rate is ``scheduled_lr(state.step)`` evaluated before the
    step counter advances.
    """
    if set(grads) != set(params) or set(state.m) != set(params):
        raise DimensionError("gradient / parameter / moment names differ")
    for k, p in params.items():
        if grads[k].shape != p.shape or state.m[k].shape != p.shape:
            raise DimensionError(f"shape mismatch for {k}")
    lr = scheduled_lr(state.step, cfg)
    grads = clip_by_global_norm(grads, cfg.clip_norm)
    t = state.step + 1
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    state.step = t
    return params, state
