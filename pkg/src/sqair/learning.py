"""Importance-weighted objective, VIMCO surrogate, RMSprop and the length curriculum."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamRegistry, Rng, Tensor
from .inference import infer_sequence, make_sampler
from .model import SQAIR

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    K: int = 5
    batch: int = 32
    lr: float = 1e-5
    rms_decay: float = 0.9
    rms_eps: float = 1e-8
    # (step, lr) pairs applied in order; empty keeps lr constant
    lr_milestones: tuple = ()
    curriculum_start: int = 3
    curriculum_every: int = 100_000
    seed: int = 0
    mode: str = "sqair"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.mode not in ("sqair", "air"):
            raise ValueError(f"unknown mode {self.mode!r}")


# step decay for full-length runs starting from lr 1e-5
LONG_RUN_LR_MILESTONES = ((400_000, 1e-5 / 3), (1_000_000, 1e-6))


@dataclass
class OptState:
    nu: dict = field(default_factory=dict)
    step: int = 0
    lr: float = 1e-5


@dataclass
class ElboEstimate:
    log_w: np.ndarray
    bound: float
    log_lik: np.ndarray
    log_prior: np.ndarray
    log_q: np.ndarray


def iwae_bound(log_w, log_mass=None) -> Tensor:
    """log (1/K) sum_k exp(log_w_k) over the last axis.

    With ``log_mass`` (normalised log proposal masses of an enumerated particle
    set) the uniform average is replaced by the mass-weighted one.
    """
    log_w = ad.as_tensor(log_w)
    K = log_w.shape[-1]
    if K < 1:
        raise ValueError("need at least one particle")
    if np.isneginf(log_w.data).all(axis=-1).any():
        raise ad.NonFiniteError("all importance weights are zero")
    if log_mass is not None:
        log_mass = np.asarray(log_mass, dtype=float)
        if log_mass.shape[-1] != K:
            raise ad.ShapeError("one mass per particle required")
        if np.abs(np.logaddexp.reduce(log_mass, axis=-1)).max() > 1e-8:
            raise ValueError("proposal masses must sum to one")
        return ad.logsumexp(log_w + log_mass, axis=-1)
    return ad.logsumexp(log_w, axis=-1) - np.log(K)


def _log_mean_exp(a: np.ndarray, axis=-1) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).mean(axis=axis, keepdims=True))).squeeze(axis)


def vimco_signals(log_w: np.ndarray) -> np.ndarray:
    """Per-particle learning signals L - L_{-k}, where L_{-k} swaps log_w_k for the mean of the others."""
    log_w = np.asarray(log_w, dtype=float)
    K = log_w.shape[-1]
    if K < 2:
        raise ValueError("VIMCO needs K >= 2")
    others_mean = (log_w.sum(-1, keepdims=True) - log_w) / (K - 1)
    eye = np.eye(K, dtype=bool)
    swapped = np.where(eye, others_mean[..., :, None], log_w[..., None, :])
    return _log_mean_exp(log_w)[..., None] - _log_mean_exp(swapped)


def vimco_surrogate(log_w: Tensor, log_q_discrete: Tensor) -> Tensor:
    """Surrogate whose gradient is the VIMCO estimator: reparameterised through log_w,
    score-function with leave-one-out baselines through the discrete log q."""
    signals = vimco_signals(log_w.data)
    return iwae_bound(log_w) + (log_q_discrete * signals).sum(axis=-1)


def rmsprop_step(params: ParamRegistry, grads: dict, opt: OptState, lr: float,
                 decay: float = 0.9, eps: float = 1e-8) -> bool:
    """nu <- decay nu + (1 - decay) g^2;  theta <- theta - lr g / (sqrt(nu) + eps).

    Non-finite gradients reject the whole step and leave state untouched.
    """
    for g in grads.values():
        if not np.isfinite(g).all():
            log.warning("non-finite gradient; rmsprop step rejected")
            return False
    for name, t in params.items():
        g = grads[name]
        if g.shape != t.shape:
            raise ad.ShapeError(f"gradient shape mismatch for {name}")
        nu = opt.nu.get(name)
        nu = (1 - decay) * g * g if nu is None else decay * nu + (1 - decay) * g * g
        opt.nu[name] = nu
        t.data = t.data - lr * g / (np.sqrt(nu) + eps)
    opt.step += 1
    opt.lr = lr
    return True


def curriculum_length(step: int, T_max: int, start: int = 3, every: int = 100_000) -> int:
    if step < 0:
        raise ValueError("step must be non-negative")
    return min(start + step // every, T_max)


def lr_at(step: int, cfg: TrainConfig) -> float:
    lr = cfg.lr
    for at, value in cfg.lr_milestones:
        if step >= at:
            lr = value
    return lr


def particle_rngs(rng: Rng, B: int, K: int) -> list[Rng]:
    return [rng.child("seq", b, "particle", k) for b in range(B) for k in range(K)]


def _as_independent_frames(frames: np.ndarray, counts):
    T, B = frames.shape[:2]
    x = frames.reshape((1, T * B) + frames.shape[2:])
    c = None if counts is None else np.asarray(counts).reshape(1, T * B)
    return x, c


def estimate(model: SQAIR, frames: np.ndarray, K: int, rng: Rng, record: bool = False):
    """Run K particles per sequence; returns (trace, log_w Tensor (B, K))."""
    T, B = frames.shape[:2]
    x = np.repeat(frames, K, axis=1)
    sampler = make_sampler(model, T, rngs=particle_rngs(rng, B, K))
    trace = infer_sequence(model, x, sampler, record=record)
    return trace, trace.log_weight.reshape(B, K)


def train_step(model: SQAIR, frames: np.ndarray, opt: OptState, cfg: TrainConfig, rng: Rng,
               counts: np.ndarray | None = None) -> dict:
    """One optimisation step on a batch of sequences (T, B, H, W).

    ``rng`` should be the per-step stream; particle substreams are keyed by
    (sequence, particle) below it.
    """
    frames = np.asarray(frames, dtype=float)
    step = opt.step
    T_eff = curriculum_length(step, frames.shape[0], cfg.curriculum_start, cfg.curriculum_every)
    frames = frames[:T_eff]
    if counts is not None:
        counts = np.asarray(counts)[:T_eff]
    if cfg.mode == "air":
        frames, counts = _as_independent_frames(frames, counts)
    B, K = frames.shape[1], cfg.K
    lr = lr_at(step, cfg)
    model.params.zero_grad()
    metrics = dict(step=step, seq_len=T_eff, lr=lr)
    try:
        trace, log_w = estimate(model, frames, K, rng)
        if K >= 2:
            surrogate = vimco_surrogate(log_w, trace.log_q_pres.reshape(B, K))
        else:
            # single particle: plain ELBO, presence logits receive no score-function gradient
            surrogate = log_w[:, 0]
        loss = -surrogate.mean()
        loss.backward()
    except ad.NonFiniteError as exc:
        log.warning("step %d skipped: %s", step, exc)
        opt.step += 1
        metrics.update(skipped=True, iwae=float("nan"), recon_ll=float("nan"), kl=float("nan"),
                       count_acc=float("nan"))
        return metrics
    accepted = rmsprop_step(model.params, model.params.grads(), opt, lr, cfg.rms_decay, cfg.rms_eps)
    if not accepted:
        opt.step += 1
    bound = iwae_bound(log_w.data).data
    metrics.update(
        skipped=not accepted,
        loss=float(loss.data),
        iwae=float(bound.mean()),
        recon_ll=float(trace.log_lik.data.mean()),
        kl=float((trace.log_q.data - trace.log_prior.data).mean()),
        count_acc=float("nan"),
    )
    if counts is not None:
        inferred = trace.counts().reshape(frames.shape[0], B, K)
        metrics["count_acc"] = float((inferred == counts[:, :, None]).mean())
    return metrics
