"""Representation fusion: count sketch, compact bilinear pooling (CBP),
concatenation, and the multiscale image / multimodal merges.

All vector functions accept batches shaped ``(..., n)``. Backward helpers
(``*_backward``) return gradients with respect to the inputs and are used by
:mod:`mmfuse.nn`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import (
    RngStream,
    circular_convolve,
    circular_correlate,
    is_power_of_two,
    rng_uniform_sign,
)

STRATEGIES = ("concat", "cbp")


@dataclass(frozen=True, eq=False)
class SketchParams:
    """Count-sketch projection ``R^n -> R^d``.

    ``h`` holds 0-based bucket indices, ``s`` the +-1 signs.
    """

    n: int
    d: int
    s: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        if not is_power_of_two(self.d):
            raise ConfigError(f"sketch output dim must be a power of two, got {self.d}")
        if self.s.shape != (self.n,) or self.h.shape != (self.n,):
            raise DimensionError("s and h must both have length n")
        if self.n and (self.h.min() < 0 or self.h.max() >= self.d):
            raise DimensionError("bucket index out of range")
        if not np.all(np.abs(self.s) == 1):
            raise DimensionError("signs must be +-1")

    def matrix(self) -> np.ndarray:
        """Dense ``(n, d)`` matrix ``M`` with ``sketch_apply(p, v) == v @ M``."""
        m = np.zeros((self.n, self.d))
        m[np.arange(self.n), self.h] = self.s
        return m

    def prefix(self, n: int) -> SketchParams:
        return SketchParams(n, self.d, self.s[:n].copy(), self.h[:n].copy())

    def to_dict(self) -> dict:
        return {"n": self.n, "d": self.d, "s": self.s.astype(int).tolist(), "h": self.h.tolist()}

    @classmethod
    def from_dict(cls, obj) -> SketchParams:
        return cls(int(obj["n"]), int(obj["d"]),
                   np.asarray(obj["s"], dtype=np.float64), np.asarray(obj["h"], dtype=np.int64))

    def __eq__(self, other):
        return (isinstance(other, SketchParams) and self.n == other.n and self.d == other.d
                and np.array_equal(self.s, other.s) and np.array_equal(self.h, other.h))


def sketch_new(rng: RngStream, n: int, d: int) -> SketchParams:
    if not is_power_of_two(d):
        raise ConfigError(f"sketch output dim must be a power of two, got {d}")
    if n < 1:
        raise DimensionError("sketch input dim must be >= 1")
    s = rng_uniform_sign(rng.child("signs"), n)
    h = rng.child("buckets").generator().integers(0, d, size=n)
    return SketchParams(n, d, s, h.astype(np.int64))


def _check_len(p: SketchParams, v):
    if v.shape[-1] != p.n:
        raise DimensionError(f"sketch expects length {p.n}, got {v.shape[-1]}")


def sketch_apply(p: SketchParams, v) -> np.ndarray:
    """``out[j] = sum_{i: h_i = j} s_i v_i``."""
    v = np.asarray(v, dtype=np.float64)
    _check_len(p, v)
    out = np.zeros(v.shape[:-1] + (p.d,))
    np.add.at(out.T, p.h, (v * p.s).T)
    return out


def sketch_backward(p: SketchParams, grad_out) -> np.ndarray:
    grad_out = np.asarray(grad_out, dtype=np.float64)
    return grad_out[..., p.h] * p.s


def cbp_fuse(x, y, px: SketchParams, py: SketchParams) -> np.ndarray:
    """Compact bilinear pooling: circular convolution of the two sketches.

    Equals the count sketch of ``outer(x, y)`` under signs ``s_x[i] s_y[j]``
    and buckets ``(h_x[i] + h_y[j]) mod d``.
    """
    if px.d != py.d:
        raise ConfigError(f"CBP sketches disagree on output dim: {px.d} vs {py.d}")
    return circular_convolve(sketch_apply(px, x), sketch_apply(py, y))


def cbp_backward(grad_out, x, y, px: SketchParams, py: SketchParams):
    """Gradients of ``<grad_out, cbp_fuse(x, y)>`` with respect to ``x`` and ``y``."""
    sx = sketch_apply(px, x)
    sy = sketch_apply(py, y)
    gx = sketch_backward(px, circular_correlate(grad_out, sy))
    gy = sketch_backward(py, circular_correlate(grad_out, sx))
    return gx, gy


def concat_fuse(parts: Sequence) -> np.ndarray:
    if len(parts) == 0:
        raise DimensionError("nothing to concatenate")
    arrs = [np.asarray(p, dtype=np.float64) for p in parts]
    if any(a.shape[-1] == 0 for a in arrs):
        raise DimensionError("cannot concatenate an empty part")
    return np.concatenate(arrs, axis=-1)


@dataclass
class FusionConfig:
    """How modality vectors are merged.

    ``strategy`` merges image against language (text + structured);
    ``image_scale_strategy`` merges the slide vector with the three patches.
    ``cbp_dim`` must be a power of two. ``shared_sketch`` reuses one
    ``(s, h)`` pair for both CBP inputs (prefix of a sketch sized to the
    wider input) instead of drawing independent sketches.
    """

    strategy: str = "concat"
    image_scale_strategy: str = "concat"
    cbp_dim: int = 256
    sketch_seed: int = 1234
    shared_sketch: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("strategy", "image_scale_strategy"):
            if getattr(self, name) not in STRATEGIES:
                raise ConfigError(f"fusion.{name} must be one of {STRATEGIES}, got {getattr(self, name)!r}")
        if not is_power_of_two(int(self.cbp_dim)):
            raise ConfigError(f"fusion.cbp_dim must be a power of two, got {self.cbp_dim}")


def make_sketch_pair(cfg: FusionConfig, role: str, nx: int, ny: int):
    """The two sketches for one CBP site, fixed by ``(sketch_seed, role, dims)``."""
    base = RngStream(cfg.sketch_seed).child(role)
    if cfg.shared_sketch:
        big = sketch_new(base.child("shared"), max(nx, ny), cfg.cbp_dim)
        return big.prefix(nx), big.prefix(ny)
    return sketch_new(base.child("x"), nx, cfg.cbp_dim), sketch_new(base.child("y"), ny, cfg.cbp_dim)


@dataclass
class ModalityBundle:
    """Per-sample modality vectors; ``None`` marks an absent modality."""

    slide: Optional[np.ndarray] = None
    patches: Optional[list] = None
    text: Optional[np.ndarray] = None
    structured: Optional[np.ndarray] = None
    sketches: dict = field(default_factory=dict, repr=False)

    def present(self) -> dict:
        return {name: getattr(self, name) is not None
                for name in ("slide", "patches", "text", "structured")}


def _sketches(bundle: ModalityBundle, cfg: FusionConfig, role, nx, ny):
    key = (role, nx, ny)
    if key not in bundle.sketches:
        bundle.sketches[key] = make_sketch_pair(cfg, role, nx, ny)
    return bundle.sketches[key]


def fuse_image(bundle: ModalityBundle, cfg: FusionConfig) -> np.ndarray:
    if bundle.slide is None:
        raise ConfigError("image fusion requires the slide vector")
    slide = np.asarray(bundle.slide, dtype=np.float64)
    if bundle.patches is None:
        return slide
    if len(bundle.patches) != 3:
        raise DimensionError(f"expected exactly 3 patch vectors, got {len(bundle.patches)}")
    patches = concat_fuse(bundle.patches)
    if cfg.image_scale_strategy == "concat":
        return concat_fuse([slide, patches])
    px, py = _sketches(bundle, cfg, "image", slide.shape[-1], patches.shape[-1])
    return cbp_fuse(slide, patches, px, py)


def fuse_all(bundle: ModalityBundle, cfg: FusionConfig) -> np.ndarray:
    """Shared representation from all present modalities.

    Concat order is image, text, structured. Under ``cbp`` the image side is
    pooled against ``[text; structured]``; with one side missing the present
    side is returned as is.
    """
    image = fuse_image(bundle, cfg) if bundle.slide is not None else None
    if bundle.slide is None and bundle.patches is not None:
        raise ConfigError("patches require the slide modality")
    lang = [v for v in (bundle.text, bundle.structured) if v is not None]
    if image is None and not lang:
        raise ConfigError("no modality present")
    if cfg.strategy == "concat" or image is None or not lang:
        return concat_fuse(([image] if image is not None else []) + lang)
    lang_vec = concat_fuse(lang)
    px, py = _sketches(bundle, cfg, "shared", image.shape[-1], lang_vec.shape[-1])
    return cbp_fuse(image, lang_vec, px, py)
