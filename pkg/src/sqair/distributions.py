"""Gaussian, Bernoulli and Categorical families on autodiff tensors.

Event dimensions are the trailing axis for Gaussians; everything else is
batch. Log-densities reduce over the event axis only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor

LOG_2PI = float(np.log(2.0 * np.pi))
STD_FLOOR = 1e-4
LOGIT_CLAMP = 15.0
_MASKED_LOGIT = -1e30


@dataclass
class DiagGaussian:
    mean: Tensor
    std: Tensor

    @classmethod
    def from_raw(cls, mean, raw_std) -> "DiagGaussian":
        """Positive std via softplus(raw) plus a small floor."""
        return cls(ad.as_tensor(mean), ad.softplus(raw_std) + STD_FLOOR)

    def log_prob(self, x) -> Tensor:
        return gaussian_logpdf(x, self)

    def rsample(self, eps) -> Tensor:
        return self.mean + self.std * ad.as_tensor(eps)

    def sample(self, rng: Rng) -> Tensor:
        return gaussian_reparam_sample(self, rng)


@dataclass
class BernoulliDist:
    logits: Tensor

    @classmethod
    def from_logits(cls, logits) -> "BernoulliDist":
        return cls(ad.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP))

    @property
    def probs(self) -> Tensor:
        return ad.sigmoid(self.logits)

    def log_prob(self, k) -> Tensor:
        return bernoulli_logpmf(k, self)

    def sample(self, u: np.ndarray) -> np.ndarray:
        """Presence draws from uniforms ``u`` shaped like the logits; not differentiable."""
        u = np.asarray(u, dtype=float)
        if u.shape != self.logits.shape:
            raise ad.ShapeError(f"uniforms {u.shape} do not match logits {self.logits.shape}")
        return (u < self.probs.data).astype(float)


@dataclass
class CategoricalDist:
    log_probs: Tensor

    @classmethod
    def from_probs(cls, probs) -> "CategoricalDist":
        probs = ad.as_tensor(probs)
        p = probs.data
        if (p < 0).any() or not np.allclose(p.sum(-1), 1.0, atol=1e-9, rtol=0):
            raise ValueError("categorical probabilities must be a simplex")
        return cls(ad.log(ad.clamp(probs, 1e-300, None)))

    @classmethod
    def from_logits(cls, logits, support: np.ndarray | None = None) -> "CategoricalDist":
        """Softmax over logits, optionally truncated to ``support`` (boolean mask) and renormalised."""
        logits = ad.as_tensor(logits)
        if support is not None:
            logits = ad.where(support, logits, _MASKED_LOGIT)
        return cls(ad.log_softmax(logits, axis=-1))

    @property
    def probs(self) -> Tensor:
        return ad.exp(self.log_probs)

    def log_prob(self, k) -> Tensor:
        return categorical_logpmf(k, self)


def gaussian_logpdf(x, d: DiagGaussian) -> Tensor:
    x = ad.as_tensor(x)
    if (d.std.data <= 0).any():
        raise ValueError("gaussian std must be strictly positive")
    z = (x - d.mean) / d.std
    per_dim = -ad.log(d.std) - 0.5 * LOG_2PI - 0.5 * ad.square(z)
    return per_dim.sum(axis=-1)


def gaussian_reparam_sample(d: DiagGaussian, rng: Rng | None = None, eps=None) -> Tensor:
    if eps is None:
        eps = rng.normal(d.mean.shape)
    return d.rsample(eps)


def bernoulli_logpmf(k, d: BernoulliDist) -> Tensor:
    k = np.asarray(k, dtype=float)
    if not np.isin(k, (0.0, 1.0)).all():
        raise ValueError("bernoulli outcome must be 0 or 1")
    l = d.logits
    return -(k * ad.softplus(-l) + (1.0 - k) * ad.softplus(l))


def categorical_logpmf(k, d: CategoricalDist) -> Tensor:
    k = np.asarray(k)
    M = d.log_probs.shape[-1]
    if (k < 0).any() or (k >= M).any():
        raise IndexError(f"category index out of range [0, {M - 1}]")
    if d.log_probs.ndim == 1:
        if k.ndim != 0:
            raise ValueError("scalar categorical expects a scalar index")
        return d.log_probs[int(k)]
    lp = d.log_probs
    idx = np.broadcast_to(k, lp.shape[:-1])[..., None].astype(np.int64)
    out = ad.gather(lp, idx, axis=-1)
    return out.reshape(out.shape[:-1])
