"""Generator and discriminator objectives.

Map losses take the ground-truth map ``x`` as a plain array and the predicted
map ``x_hat`` as a :class:`Tensor`; batched inputs (N x 1 x H x W) give the
mean of the per-map losses.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import as_tensor, make
from .ops import add

EPS = 1e-7
TERMS = ("CC", "KL", "S_MSE", "G_BCE")


class DegenerateInputError(ValueError):
    """Raised when a statistic is undefined for the given map (e.g. zero variance)."""


def _as_batch(x):
    """View a map (P, HxW, 1xHxW or Nx1xHxW) as N x P."""
    a = np.asarray(x)
    if a.ndim <= 2:
        return a.reshape(1, -1)
    if a.ndim == 3:
        return a.reshape(1, -1) if a.shape[0] == 1 else a.reshape(a.shape[0], -1)
    return a.reshape(a.shape[0], -1)


def pearson(a, b):
    """Row-wise Pearson correlation of two N x P arrays (float64)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da = a - a.mean(axis=-1, keepdims=True)
    db = b - b.mean(axis=-1, keepdims=True)
    na = np.sqrt((da * da).sum(axis=-1))
    nb = np.sqrt((db * db).sum(axis=-1))
    if (na == 0).any() or (nb == 0).any():
        raise DegenerateInputError("correlation undefined for a constant map")
    return (da * db).sum(axis=-1) / (na * nb), da, db, na, nb


def kl_divergence(p_raw, q_raw, eps=EPS):
    """Row-wise KL(P || Q) with P = p_raw / sum and Q = (q_raw + eps) / sum.

    Returns (kl, p, q_shifted_sum) where the last two feed the gradient.
    """
    p_raw = np.asarray(p_raw, dtype=np.float64)
    q_raw = np.asarray(q_raw, dtype=np.float64)
    if (p_raw < 0).any() or (q_raw < 0).any():
        raise ValueError("KL divergence needs non-negative maps")
    psum = p_raw.sum(axis=-1, keepdims=True)
    if (psum <= 0).any():
        raise DegenerateInputError("ground-truth map sums to zero")
    p = p_raw / psum
    qs = q_raw + eps
    qsum = qs.sum(axis=-1, keepdims=True)
    q = qs / qsum
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p / q), 0.0)
    return terms.sum(axis=-1), p, qs, qsum


def cc_loss(x, x_hat):
    """1 - Pearson correlation between ground truth and prediction."""
    x_hat = as_tensor(x_hat)
    xb, xhb = _as_batch(x), _as_batch(x_hat.data)
    n = xb.shape[0]
    cc, da, db, na, nb = pearson(xb, xhb)
    value = np.asarray((1.0 - cc).mean(), dtype=x_hat.data.dtype)

    def backward(g):
        dcc = da / (na * nb)[:, None] - cc[:, None] * db / (nb * nb)[:, None]
        return ((-float(g) / n * dcc).reshape(x_hat.data.shape).astype(x_hat.data.dtype),)

    return make(value, (x_hat,), backward, "cc_loss")


def kl_loss(x, x_hat, eps=EPS):
    """KL(ground truth || prediction) after normalizing both maps to distributions."""
    x_hat = as_tensor(x_hat)
    xb, xhb = _as_batch(x), _as_batch(x_hat.data)
    n = xb.shape[0]
    kl, p, qs, qsum = kl_divergence(xb, xhb, eps)
    value = np.asarray(kl.mean(), dtype=x_hat.data.dtype)

    def backward(g):
        dq = -p / qs + 1.0 / qsum
        return ((float(g) / n * dq).reshape(x_hat.data.shape).astype(x_hat.data.dtype),)

    return make(value, (x_hat,), backward, "kl_loss")


def smse_loss(x, x_hat, weights):
    """Mean over pixels of ``weights * (x - x_hat)**2`` (weights broadcast over the batch)."""
    x_hat = as_tensor(x_hat)
    xb, xhb = _as_batch(x), _as_batch(x_hat.data)
    w = np.asarray(weights, dtype=np.float64).reshape(1, -1)
    if w.shape[1] != xb.shape[1]:
        raise ValueError(f"weight map has {w.shape[1]} pixels, maps have {xb.shape[1]}")
    diff = xhb.astype(np.float64) - xb
    value = np.asarray((w * diff * diff).mean(), dtype=x_hat.data.dtype)
    size = diff.size

    def backward(g):
        return ((float(g) * 2.0 / size * w * diff).reshape(x_hat.data.shape).astype(x_hat.data.dtype),)

    return make(value, (x_hat,), backward, "smse_loss")


def _check_prob(d):
    # NaN passes through so a diverged run is reported by the loss it poisons
    a = np.asarray(d)
    if (a < 0).any() or (a > 1).any():
        raise ValueError(f"discriminator outputs must lie in [0, 1], got {a}")


def g_bce_loss(d_out, eps=EPS):
    """Adversarial generator term: BCE against real labels, -mean(log(d + eps))."""
    d_out = as_tensor(d_out)
    _check_prob(d_out.data)
    d = d_out.data.astype(np.float64)
    value = np.asarray(-np.log(d + eps).mean(), dtype=d_out.data.dtype)
    size = d.size

    def backward(g):
        return ((-float(g) / size / (d + eps)).astype(d_out.data.dtype),)

    return make(value, (d_out,), backward, "g_bce_loss")


def bce(y, d_out, eps=EPS):
    """Mean binary cross-entropy of predictions ``d_out`` against (soft) labels ``y``."""
    d_out = as_tensor(d_out)
    _check_prob(d_out.data)
    y = np.broadcast_to(np.asarray(y, dtype=np.float64), d_out.data.shape)
    d = d_out.data.astype(np.float64)
    value = np.asarray(-(y * np.log(d + eps) + (1 - y) * np.log(1 - d + eps)).mean(), dtype=d_out.data.dtype)
    size = d.size

    def backward(g):
        gd = -(y / (d + eps) - (1 - y) / (1 - d + eps)) / size
        return ((float(g) * gd).astype(d_out.data.dtype),)

    return make(value, (d_out,), backward, "bce")


def noisy_labels(n, rng):
    """Smoothed noisy real labels in [0.9, 1.0] and noisy fake labels in [0, 0.1]."""
    real = 0.9 + 0.1 * np.asarray(rng.random(n), dtype=np.float64)
    fake = 0.1 * np.asarray(rng.random(n), dtype=np.float64)
    return real, fake


def discriminator_loss(d_real, d_fake, rng, return_labels=False):
    """Half the sum of the BCE on ground-truth maps and on generated maps."""
    d_real, d_fake = as_tensor(d_real), as_tensor(d_fake)
    y_real, y_fake = noisy_labels(d_real.data.shape or (), rng)
    loss = add(bce(y_real, d_real), bce(y_fake, d_fake))
    half = make(loss.data * 0.5, (loss,), lambda g: (g * 0.5,), "disc_loss")
    if return_labels:
        return half, y_real, y_fake
    return half


@dataclass
class LossConfig:
    terms: tuple = TERMS
    coefficients: dict = field(default_factory=lambda: {t: 1.0 for t in TERMS})
    eps: float = EPS

    def validate(self):
        unknown = set(self.terms) - set(TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}")
        if "G_BCE" not in self.terms:
            raise ValueError("the adversarial G_BCE term cannot be disabled")


@dataclass
class LossBreakdown:
    cc_loss: float = 0.0
    kl_loss: float = 0.0
    smse_loss: float = 0.0
    g_bce_loss: float = 0.0
    total: float = 0.0

    def as_dict(self):
        return asdict(self)


_TERM_FIELDS = {"CC": "cc_loss", "KL": "kl_loss", "S_MSE": "smse_loss", "G_BCE": "g_bce_loss"}


def generator_loss(x, x_hat, d_out, weights, config: LossConfig | None = None):
    """Sum of the enabled generator terms; returns (total tensor, breakdown)."""
    config = config or LossConfig()
    config.validate()
    parts = {}
    if "CC" in config.terms:
        parts["CC"] = cc_loss(x, x_hat)
    if "KL" in config.terms:
        parts["KL"] = kl_loss(x, x_hat, config.eps)
    if "S_MSE" in config.terms:
        parts["S_MSE"] = smse_loss(x, x_hat, weights)
    parts["G_BCE"] = g_bce_loss(d_out, config.eps)

    scaled = []
    breakdown = LossBreakdown()
    for term, t in parts.items():
        c = float(config.coefficients.get(term, 1.0))
        setattr(breakdown, _TERM_FIELDS[term], float(t.data))
        scaled.append(t if c == 1.0 else make(t.data * c, (t,), lambda g, c=c: (g * c,)))
    total = add(*scaled)
    breakdown.total = float(sum(float(s.data) for s in scaled))
    return total, breakdown
