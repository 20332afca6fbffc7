"""Dice + evidential (Bayes-risk cross-entropy and KL) losses.

All inputs carry the class axis first; every remaining axis is treated as a
voxel axis, so a batch of slices ``(N, B, H, W)`` works the same as a single
voxel ``(N,)``.  Per-voxel terms are averaged, the Dice term is computed over
all voxels at once.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evidential import EvidenceField, expected_probabilities
from .special import digamma, log_gamma, trigamma
from .volume import DimensionError, Volume

_DIGAMMA_ONE = digamma(1.0)


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.7
    lam_kl: float = 0.4
    epsilon_dice: float = 1e-6

    def __post_init__(self):
        if self.lam < 0 or self.lam_kl < 0:
            raise ValueError("loss weights must be non-negative")
        if self.epsilon_dice <= 0:
            raise ValueError("epsilon_dice must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    dice: float
    rce: float
    kl: float
    edl: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("dice", "rce", "kl", "edl", "total")}


def _arr(x) -> np.ndarray:
    if isinstance(x, Volume):
        x = x.data
    elif isinstance(x, EvidenceField):
        x = x.evidence
    return np.asarray(x, dtype=np.float64)


def _flat(x) -> np.ndarray:
    x = _arr(x)
    return x.reshape(x.shape[0], -1)


def _check(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")


def softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def dice_loss(pred_probs, target, cfg: LossConfig = LossConfig()) -> float:
    p, y = _flat(pred_probs), _flat(target)
    _check(p, y)
    eps = cfg.epsilon_dice
    inter = (p * y).sum(axis=1)
    denom = p.sum(axis=1) + y.sum(axis=1) + eps
    return float(1.0 - np.mean((2.0 * inter + eps) / denom))


def rce_loss(alpha, target) -> float:
    """Mean over voxels of psi(S) - psi(alpha_gt)."""
    a, y = _flat(alpha), _flat(target)
    _check(a, y)
    s = a.sum(axis=0)
    per_voxel = (y * (digamma(s)[None] - digamma(a))).sum(axis=0)
    return float(per_voxel.mean())


def _alpha_tilde(a, y):
    return y + (1.0 - y) * a


def kl_loss(alpha, target) -> float:
    """KL(Dir(alpha_tilde) || Dir(1)) averaged over voxels.

    alpha_tilde keeps alpha on wrong classes and pins the true class to 1.
    """
    a, y = _flat(alpha), _flat(target)
    _check(a, y)
    at = _alpha_tilde(a, y)
    n = a.shape[0]
    st = at.sum(axis=0)
    per_voxel = (
        log_gamma(st)
        - log_gamma(float(n))
        - log_gamma(at).sum(axis=0)
        + ((at - 1.0) * (digamma(at) - digamma(st)[None])).sum(axis=0)
    )
    return float(per_voxel.mean())


def total_loss(evidence, target, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    e, y = _arr(evidence), _arr(target)
    _check(e, y)
    alpha = e + 1.0
    dice = dice_loss(expected_probabilities(alpha), y, cfg)
    rce = rce_loss(alpha, y)
    kl = kl_loss(alpha, y)
    edl = rce + cfg.lam_kl * kl
    return LossBreakdown(dice, rce, kl, edl, dice + cfg.lam * edl)


def loss_and_gradient(z, target, cfg: LossConfig = LossConfig()):
    """Loss breakdown and d(total)/dz, where evidence = softplus(z)."""
    z = np.asarray(z, dtype=np.float64)
    y = _arr(target)
    _check(z, y)
    shape = z.shape
    zf, yf = z.reshape(shape[0], -1), y.reshape(shape[0], -1)
    n, nvox = zf.shape
    alpha = softplus(zf) + 1.0
    s = alpha.sum(axis=0)
    prob = alpha / s

    # Dice term on the Dirichlet mean
    eps = cfg.epsilon_dice
    inter = (prob * yf).sum(axis=1)
    denom = prob.sum(axis=1) + yf.sum(axis=1) + eps
    num = 2.0 * inter + eps
    dice = float(1.0 - np.mean(num / denom))
    g_prob = -(2.0 * yf / denom[:, None] - (num / denom**2)[:, None]) / n
    g_alpha = (g_prob - (g_prob * prob).sum(axis=0)) / s

    # Bayes-risk cross-entropy
    dg_a, tg_a = digamma(alpha), trigamma(alpha)
    rce = float((yf * (digamma(s)[None] - dg_a)).sum(axis=0).mean())
    g_rce = (trigamma(s)[None] - yf * tg_a) / nvox

    # KL regulariser; alpha_tilde equals alpha off the true class and 1 on it
    off = 1.0 - yf
    at = yf + off * alpha
    st = at.sum(axis=0)
    dg_at = off * dg_a + yf * _DIGAMMA_ONE
    lg_at = off * log_gamma(alpha)
    kl_vox = (
        log_gamma(st)
        - log_gamma(float(n))
        - lg_at.sum(axis=0)
        + ((at - 1.0) * (dg_at - digamma(st)[None])).sum(axis=0)
    )
    kl = float(kl_vox.mean())
    g_kl = ((at - 1.0) * tg_a - ((st - n) * trigamma(st))[None]) * off / nvox

    g_alpha = g_alpha + cfg.lam * (g_rce + cfg.lam_kl * g_kl)
    grad = (g_alpha * sigmoid(zf)).reshape(shape)
    edl = rce + cfg.lam_kl * kl
    return LossBreakdown(dice, rce, kl, edl, dice + cfg.lam * edl), grad


def loss_gradient(z, target, cfg: LossConfig = LossConfig()) -> np.ndarray:
    return loss_and_gradient(z, target, cfg)[1]
