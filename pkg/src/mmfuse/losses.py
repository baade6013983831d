"""Classification losses and the geometric-average multitask objective.

``probs_correct`` arguments are the probabilities a model assigns to each
sample's true class. Sums run over samples (no batch-mean); the multitask
term is ``sum_t log(sum_i ||onehot(y_it) - q_it||^2 + eps)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .errors import ConfigError, DataError
from .numerics import softmax

PROB_FLOOR = 1e-12
MULTI_EPS = 1e-12
ALPHA_RULES = ("prediction", "uniform")


@dataclass
class FocalConfig:
    gamma: float = 2.0
    alpha: float = 0.5

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ConfigError(f"focal gamma must be >= 0, got {self.gamma}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"focal alpha must lie in [0, 1], got {self.alpha}")


@dataclass
class LossConfig:
    """Objective used for training.

    ``alpha_rule="prediction"`` weights a sample by ``alpha`` when the
    arg-max prediction is correct and ``1 - alpha`` otherwise;
    ``"uniform"`` weights every sample by ``alpha``. The two agree at the
    default ``alpha = 0.5``. ``use_multi`` toggles the multitask term.
    """

    gamma: float = 2.0
    alpha: float = 0.5
    alpha_rule: str = "prediction"
    use_multi: bool = True
    multi_eps: float = MULTI_EPS
    task_alpha: dict = field(default_factory=dict)

    def __post_init__(self):
        FocalConfig(self.gamma, self.alpha)
        for v in self.task_alpha.values():
            FocalConfig(self.gamma, v)
        if self.alpha_rule not in ALPHA_RULES:
            raise ConfigError(f"loss.alpha_rule must be one of {ALPHA_RULES}, got {self.alpha_rule!r}")
        if not self.multi_eps > 0:
            raise ConfigError("loss.multi_eps must be > 0")

    def focal(self, task) -> FocalConfig:
        return FocalConfig(self.gamma, self.task_alpha.get(task, self.alpha))


@dataclass
class LossBreakdown:
    focal: dict
    multi: Optional[float]
    total: float
    residual_sums: dict
    sigma_sq: dict
    n_samples: int = 0

    def as_row(self, tasks) -> dict:
        row = {"total": self.total, "multi": self.multi if self.multi is not None else ""}
        for t in tasks:
            row[f"focal_{t}"] = self.focal.get(t, "")
            row[f"sigma_sq_{t}"] = self.sigma_sq.get(t, "")
        return row


def _check_probs(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise DataError("probabilities must lie in [0, 1]")
    return p


def _log_clamped(p):
    return np.log(np.clip(p, PROB_FLOOR, 1.0))


def ce_loss(probs_correct) -> float:
    p = _check_probs(probs_correct)
    return float(-np.sum(_log_clamped(p)))


def alpha_ce_loss(probs_correct, alphas) -> float:
    p = _check_probs(probs_correct)
    a = np.broadcast_to(np.asarray(alphas, dtype=np.float64), p.shape)
    return float(-np.sum(a * _log_clamped(p)))


def per_sample_alphas(correct, alpha: float, rule: str = "prediction") -> np.ndarray:
    correct = np.asarray(correct, dtype=bool)
    if rule == "uniform":
        return np.full(correct.shape, float(alpha))
    return np.where(correct, alpha, 1.0 - alpha)


def focal_terms(p, gamma, alphas) -> np.ndarray:
    p = _check_probs(p)
    a = np.broadcast_to(np.asarray(alphas, dtype=np.float64), p.shape)
    if gamma == 0:
        mod = np.ones_like(p)
    else:
        mod = (1.0 - p) ** gamma
    return -a * mod * _log_clamped(p)


def focal_loss(probs_correct, cfg: FocalConfig, per_sample_alphas=None) -> float:
    """``-sum_i alpha_i (1 - p_i)^gamma log p_i``; ``alpha_i`` defaults to ``cfg.alpha``."""
    p = _check_probs(probs_correct)
    alphas = cfg.alpha if per_sample_alphas is None else per_sample_alphas
    return float(np.sum(focal_terms(p, cfg.gamma, alphas)))


def _focal_dp(p, gamma, alphas):
    """Derivative of each focal term with respect to its own ``p``."""
    live = p >= PROB_FLOOR
    safe = np.clip(p, PROB_FLOOR, 1.0)
    if gamma == 0:
        d = -1.0 / safe
    else:
        one_m = 1.0 - p
        # gamma * (1-p)^(gamma-1) * log p, written to avoid 0 * inf at p == 1
        tail = np.where(one_m > 0, gamma * np.power(np.where(one_m > 0, one_m, 1.0), gamma - 1.0), 0.0)
        d = -(one_m ** gamma) / safe + tail * np.log(safe)
    return np.where(live, alphas * d, 0.0)


def multi_objective_loss(residual_sq_sums, eps: float = MULTI_EPS) -> float:
    """``sum_t log(S_t + eps)`` over per-task residual sums of squares."""
    s = np.asarray(residual_sq_sums, dtype=np.float64)
    if np.any(s < 0):
        raise DataError("residual sums of squares must be non-negative")
    return float(np.sum(np.log(s + eps)))


def sigma_sq_closed_form(residuals) -> float:
    """Maximum-likelihood noise variance: mean squared residual."""
    r = np.asarray(residuals, dtype=np.float64).ravel()
    if r.size == 0:
        raise DataError("need at least one residual")
    return float(np.sum(r * r) / r.size)


def gaussian_nll(residuals, sigma_sq) -> float:
    """Negative log-likelihood of zero-mean Gaussian residuals with variance ``sigma_sq``."""
    r = np.asarray(residuals, dtype=np.float64).ravel()
    return float(0.5 * r.size * np.log(2 * np.pi * sigma_sq) + np.sum(r * r) / (2 * sigma_sq))


def _onehot(labels, n_classes):
    labels = np.asarray(labels)
    if labels.ndim != 1 or np.any(labels < 0) or np.any(labels >= n_classes):
        raise DataError(f"labels must be class indices in [0, {n_classes})")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def combined_loss_and_grad(probs: Mapping, labels: Mapping, cfg: LossConfig, want_grad=True):
    """Loss breakdown and d(total)/d(logits) per task.

    ``probs[t]`` is the ``(B, C_t)`` softmax output, ``labels[t]`` the class
    indices. Tasks present in ``probs`` are the active ones.
    """
    tasks = list(probs)
    focal, res_sums, sig, grads = {}, {}, {}, {}
    multi = None
    n = None
    for t in tasks:
        q = np.asarray(probs[t], dtype=np.float64)
        y = _onehot(labels[t], q.shape[1])
        n = q.shape[0]
        p = q[np.arange(n), np.asarray(labels[t])]
        fc = cfg.focal(t)
        alphas = per_sample_alphas(np.argmax(q, axis=1) == np.asarray(labels[t]), fc.alpha, cfg.alpha_rule)
        focal[t] = float(np.sum(focal_terms(p, fc.gamma, alphas)))
        diff = q - y
        res_sums[t] = float(np.sum(diff * diff))
        sig[t] = res_sums[t] / n
        if want_grad:
            dp = _focal_dp(p, fc.gamma, alphas)
            grads[t] = (dp * p)[:, None] * (y - q)
    if cfg.use_multi:
        multi = multi_objective_loss([res_sums[t] for t in tasks], cfg.multi_eps)
        if want_grad:
            for t in tasks:
                q = np.asarray(probs[t], dtype=np.float64)
                y = _onehot(labels[t], q.shape[1])
                dq = 2.0 * (q - y) / (res_sums[t] + cfg.multi_eps)
                grads[t] = grads[t] + q * (dq - np.sum(q * dq, axis=1, keepdims=True))
    total = (multi or 0.0) + sum(focal.values())
    bd = LossBreakdown(focal, multi, float(total), res_sums, sig, n_samples=n or 0)
    return (bd, grads) if want_grad else bd


def combined_loss(per_task_probs: Mapping, labels: Mapping, cfg: LossConfig) -> LossBreakdown:
    return combined_loss_and_grad(per_task_probs, labels, cfg, want_grad=False)


def combined_loss_from_logits(logits: Mapping, labels: Mapping, cfg: LossConfig) -> LossBreakdown:
    return combined_loss({t: softmax(z, axis=1) for t, z in logits.items()}, labels, cfg)
