"""Generative model: glimpse decoder, additive composition, discovery and
propagation priors, the joint log-density and ancestral sampling.

All computations are batched over a leading particle axis ``P``. Each frame
keeps N propagation slots (objects carried over from t-1, in discovery
order) and N discovery slots (one per discovery iteration).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .distributions import (BernoulliDist, CategoricalDist, DiagGaussian, LOG_2PI,
                            bernoulli_logpmf, categorical_logpmf, gaussian_logpdf)
from .model import SQAIR, WHERE_DIM
from .transformer import WhereParams, st_inverse_paste


@dataclass
class ObjectLatent:
    id: int
    z_what: np.ndarray
    where_raw: np.ndarray
    z_pres: int

    @property
    def z_where(self) -> WhereParams:
        return WhereParams.from_raw(self.where_raw)


@dataclass
class FrameState:
    propagated: list[ObjectLatent] = field(default_factory=list)
    discovered: list[ObjectLatent] = field(default_factory=list)

    @property
    def objects(self) -> list[ObjectLatent]:
        return self.propagated + self.discovered

    @property
    def present(self) -> list[ObjectLatent]:
        return [o for o in self.objects if o.z_pres]

    @property
    def count(self) -> int:
        return len(self.present)


@dataclass
class FrameBatch:
    """Latents of one time-step for P particles.

    ``prop_mask`` marks propagation slots holding an object that was present
    at t-1; ``disc_mask`` marks discovery iterations that were executed.
    """

    prop_what: np.ndarray
    prop_where: np.ndarray
    prop_pres: np.ndarray
    prop_mask: np.ndarray
    prop_ids: np.ndarray
    disc_what: np.ndarray
    disc_where: np.ndarray
    disc_pres: np.ndarray
    disc_mask: np.ndarray
    disc_ids: np.ndarray

    @property
    def n_particles(self) -> int:
        return self.prop_pres.shape[0]

    def counts(self) -> np.ndarray:
        return (self.prop_pres.sum(1) + self.disc_pres.sum(1)).astype(int)

    def n_propagated(self) -> np.ndarray:
        return self.prop_pres.sum(1).astype(int)

    def n_discovered(self) -> np.ndarray:
        return self.disc_pres.sum(1).astype(int)

    def frame_state(self, p: int) -> FrameState:
        prop = [ObjectLatent(int(self.prop_ids[p, i]), self.prop_what[p, i].copy(),
                             self.prop_where[p, i].copy(), int(self.prop_pres[p, i]))
                for i in range(self.prop_mask.shape[1]) if self.prop_mask[p, i]]
        disc = [ObjectLatent(int(self.disc_ids[p, i]), self.disc_what[p, i].copy(),
                             self.disc_where[p, i].copy(), 1)
                for i in range(self.disc_pres.shape[1]) if self.disc_pres[p, i]]
        return FrameState(prop, disc)

    def take(self, idx) -> "FrameBatch":
        return FrameBatch(**{k: v[idx] for k, v in self.__dict__.items()})

    @classmethod
    def empty(cls, P: int, N: int, A: int) -> "FrameBatch":
        z = lambda *s: np.zeros((P, N) + s)
        zi = lambda: np.full((P, N), -1, dtype=np.int64)
        return cls(z(A), z(WHERE_DIM), z(), z(), zi(), z(A), z(WHERE_DIM), z(), z(), zi())

    @classmethod
    def from_frame_states(cls, states: list[FrameState], N: int, A: int) -> "FrameBatch":
        fb = cls.empty(len(states), N, A)
        for p, st in enumerate(states):
            if len(st.propagated) > N or len(st.discovered) > N:
                raise ValueError("more objects than slots")
            for i, o in enumerate(st.propagated):
                fb.prop_what[p, i], fb.prop_where[p, i] = o.z_what, o.where_raw
                fb.prop_pres[p, i], fb.prop_mask[p, i], fb.prop_ids[p, i] = o.z_pres, 1, o.id
            P_t = sum(o.z_pres for o in st.propagated)
            for j, o in enumerate(st.discovered):
                if not o.z_pres:
                    raise ValueError("discovered objects are present by construction")
                fb.disc_what[p, j], fb.disc_where[p, j] = o.z_what, o.where_raw
                fb.disc_pres[p, j], fb.disc_mask[p, j], fb.disc_ids[p, j] = 1, 1, o.id
            D = len(st.discovered)
            if D < N - P_t:
                fb.disc_mask[p, D] = 1
        return fb


@dataclass
class Carry:
    """Objects O_t handed to the next time-step, compacted to N slots in discovery order."""

    what: Tensor
    where: Tensor
    pres: np.ndarray
    ids: np.ndarray
    h_prior: Tensor
    h_temporal: Tensor
    next_id: np.ndarray

    @classmethod
    def initial(cls, model: SQAIR, P: int) -> "Carry":
        N, A, R = model.N, model.A, model.cfg.rnn_hidden
        return cls(ad.zeros((P, N, A)), ad.zeros((P, N, WHERE_DIM)), np.zeros((P, N)),
                   np.full((P, N), -1, dtype=np.int64), ad.zeros((P, N, R)), ad.zeros((P, N, R)),
                   np.zeros(P, dtype=np.int64))

    def take(self, idx) -> "Carry":
        return Carry(self.what[idx], self.where[idx], self.pres[idx], self.ids[idx],
                     self.h_prior[idx], self.h_temporal[idx], self.next_id[idx])


@dataclass
class Canvas:
    pixels: Tensor
    pastes: Tensor | None = None
    owners: np.ndarray | None = None


@dataclass
class PropPrior:
    pres: BernoulliDist
    what: DiagGaussian
    where: DiagGaussian
    h: Tensor
    prev_pres: np.ndarray

    @property
    def pres_probs(self) -> np.ndarray:
        """Presence probability including the delta factor on the previous presence."""
        return self.pres.probs.data[..., 0] * self.prev_pres

    def log_prob(self, pres, what, where) -> Tensor:
        pres = np.asarray(pres, dtype=float)
        if ((pres > 0) & (self.prev_pres == 0)).any():
            raise ValueError("an object absent at t-1 cannot be propagated")
        lp = (bernoulli_logpmf(pres[..., None], self.pres)[..., 0]
              + self.what.log_prob(what) + self.where.log_prob(where))
        return lp * self.prev_pres


# ---------------------------------------------------------------- decoding

def decode_glimpse(model: SQAIR, what) -> Tensor:
    cfg = model.cfg
    what = ad.as_tensor(what)
    lead = what.shape[:-1]
    out = ad.sigmoid(model.decoder(what.reshape((-1, what.shape[-1]))))
    return out.reshape(lead + (cfg.glimpse_h, cfg.glimpse_w))


def compose_batch(model: SQAIR, what, where_raw, pres: np.ndarray) -> Canvas:
    """Sum of pasted decoded glimpses over objects with pres == 1.

    what (P, M, A), where_raw (P, M, 4), pres (P, M) -> pixels (P, H, W).
    """
    cfg = model.cfg
    pres = np.asarray(pres)
    P, M = pres.shape
    H, W = cfg.img_h, cfg.img_w
    sel = np.flatnonzero(pres.reshape(-1) > 0)
    if sel.size == 0:
        return Canvas(ad.zeros((P, H, W)), None, sel)
    what_f = ad.as_tensor(what).reshape(P * M, -1)[sel]
    where_f = ad.as_tensor(where_raw).reshape(P * M, WHERE_DIM)[sel]
    glimpses = decode_glimpse(model, what_f)
    pastes = st_inverse_paste(glimpses, WhereParams.from_raw(where_f), H, W)
    slots = ad.scatter_rows(pastes.reshape(sel.size, H * W), sel, P * M)
    pixels = slots.reshape(P, M, H * W).sum(axis=1).reshape(P, H, W)
    return Canvas(pixels, pastes, sel)


def compose_frame(model: SQAIR, objects: list[ObjectLatent]) -> Canvas:
    """Single-frame composition from an object list (absent objects are skipped)."""
    A = model.A
    if not objects:
        return Canvas(ad.zeros((model.cfg.img_h, model.cfg.img_w)))
    what = np.stack([o.z_what for o in objects])[None].reshape(1, len(objects), A)
    where = np.stack([o.where_raw for o in objects])[None]
    pres = np.array([[o.z_pres for o in objects]], dtype=float)
    c = compose_batch(model, what, where, pres)
    return Canvas(c.pixels[0], c.pastes, c.owners)


def frame_loglik(model: SQAIR, x, pixels) -> Tensor:
    """Gaussian log-likelihood summed over pixels, fixed std sigma_x; returns (P,) or scalar."""
    sigma = model.cfg.sigma_x
    x = ad.as_tensor(x)
    pixels = ad.as_tensor(pixels)
    if x.shape != pixels.shape:
        raise ad.ShapeError(f"frame {x.shape} vs canvas {pixels.shape}")
    lead = x.shape[:-2]
    n = x.shape[-2] * x.shape[-1]
    diff = (x - pixels).reshape(lead + (n,))
    const = n * (-np.log(sigma) - 0.5 * LOG_2PI)
    return ad.square(diff).sum(axis=-1) * (-0.5 / sigma ** 2) + const


# ---------------------------------------------------------------- priors

def discovery_count_dist(model: SQAIR, n_prop: np.ndarray) -> CategoricalDist:
    """Truncated categorical over D in {0..N-P_t}; one row of the logit table per P_t."""
    N = model.N
    n_prop = np.asarray(n_prop, dtype=np.int64)
    if (n_prop < 0).any() or (n_prop > N).any():
        raise ValueError("propagated count out of range")
    logits = model.disc_prior_logits[n_prop]
    support = np.arange(N + 1)[None, :] <= (N - n_prop)[:, None]
    return CategoricalDist.from_logits(logits, support)


def discovery_prior_logprob(model: SQAIR, n_disc, new_what, new_where, n_prop, pres=None) -> Tensor:
    """log p(D_t | P_t) + sum over discovered objects of the fixed Gaussian priors.

    n_disc, n_prop: (P,) counts; new_what (P, N, A); new_where (P, N, 4) raw;
    pres (P, N) marks which discovery slots hold objects (defaults to the first n_disc).
    """
    N = model.N
    n_disc = np.asarray(n_disc, dtype=np.int64)
    n_prop = np.asarray(n_prop, dtype=np.int64)
    if (n_disc < 0).any() or (n_disc > N - n_prop).any():
        raise ValueError("discovered count out of range [0, N - P_t]")
    if pres is None:
        pres = (np.arange(N)[None, :] < n_disc[:, None]).astype(float)
    lp = categorical_logpmf(n_disc, discovery_count_dist(model, n_prop))
    std = model.cfg.prior_std
    prior = lambda d: DiagGaussian(ad.zeros(d), ad.Tensor(np.full(d, std)))
    latent = (gaussian_logpdf(new_what, prior(model.A))
              + gaussian_logpdf(new_where, prior(WHERE_DIM)))
    return lp + (latent * pres).sum(axis=-1)


def propagation_prior_step(model: SQAIR, what_prev, where_prev, h_prior, prev_pres) -> PropPrior:
    """GRU update on the previous latents, then Bernoulli / Gaussian factors from the new state.

    Means are residual around the previous latents.
    """
    what_prev, where_prev = ad.as_tensor(what_prev), ad.as_tensor(where_prev)
    h = model.prior_rnn(ad.concat([what_prev, where_prev], axis=-1), ad.as_tensor(h_prior))
    A = model.A
    wo = model.prior_what(h)
    ro = model.prior_where(h)
    return PropPrior(
        pres=BernoulliDist.from_logits(model.prior_pres(h)),
        what=DiagGaussian.from_raw(what_prev + wo[..., :A], wo[..., A:]),
        where=DiagGaussian.from_raw(where_prev + ro[..., :WHERE_DIM], ro[..., WHERE_DIM:]),
        h=h,
        prev_pres=np.asarray(prev_pres, dtype=float),
    )


# ---------------------------------------------------------------- carry

def compact(model: SQAIR, carry: Carry, prop: dict, disc: dict) -> Carry:
    """Merge propagated and discovered objects into the next N-slot carry.

    ``prop``/``disc`` hold (P, N, ...) entries: what, where, pres, ids,
    h_prior, h_temporal. Present objects keep their relative order.
    """
    N = model.N
    pres_all = np.concatenate([prop["pres"], disc["pres"]], axis=1)
    if (pres_all.sum(1) > N).any():
        raise ValueError("more than N objects present")
    order = np.argsort(-pres_all, axis=1, kind="stable")[:, :N]

    def pick(key):
        both = ad.concat([ad.as_tensor(prop[key]), ad.as_tensor(disc[key])], axis=1)
        idx = np.broadcast_to(order[..., None], order.shape + both.shape[2:])
        return ad.gather(both, idx, axis=1)

    ids_all = np.concatenate([prop["ids"], disc["ids"]], axis=1)
    return Carry(
        what=pick("what"), where=pick("where"),
        pres=np.take_along_axis(pres_all, order, axis=1),
        ids=np.where(np.take_along_axis(pres_all, order, axis=1) > 0,
                     np.take_along_axis(ids_all, order, axis=1), -1),
        h_prior=pick("h_prior"), h_temporal=pick("h_temporal"),
        next_id=carry.next_id + disc["pres"].sum(1).astype(np.int64),
    )


def fresh_ids(carry: Carry, disc_pres: np.ndarray) -> np.ndarray:
    """Consecutive new ids for discovered objects; -1 where absent."""
    offs = np.cumsum(disc_pres, axis=1) - 1
    return np.where(disc_pres > 0, carry.next_id[:, None] + offs, -1).astype(np.int64)


# ---------------------------------------------------------------- joint

@dataclass
class JointTerms:
    log_prior: Tensor
    log_lik: Tensor

    @property
    def total(self) -> Tensor:
        return self.log_prior + self.log_lik


def _check_frame(model: SQAIR, fb: FrameBatch, carry: Carry) -> None:
    N = model.N
    if not np.array_equal(fb.prop_mask, carry.pres):
        raise ValueError("propagation slots do not match objects present at t-1")
    if ((fb.prop_pres > 0) & (fb.prop_mask == 0)).any():
        raise ValueError("absent object propagated")
    d = fb.disc_pres
    if (np.diff(d, axis=1) > 0).any():
        raise ValueError("discovered objects must be a prefix of discovery slots")
    if (fb.n_discovered() > N - fb.n_propagated()).any():
        raise ValueError("discovered more than N - P_t objects")


def joint_terms(model: SQAIR, frames, states: list[FrameBatch], carry: Carry | None = None) -> JointTerms:
    """log p(x_{1:T}, z_{1:T}) split into latent prior and likelihood, per particle."""
    frames = np.asarray(frames, dtype=float)
    T, P = frames.shape[:2]
    if len(states) != T:
        raise ValueError("one FrameBatch per frame required")
    carry = carry or Carry.initial(model, P)
    log_prior = ad.zeros(P)
    log_lik = ad.zeros(P)
    N = model.N
    for t in range(T):
        fb = states[t]
        _check_frame(model, fb, carry)
        m = carry.pres
        pw, pwh = ad.Tensor(fb.prop_what), ad.Tensor(fb.prop_where)
        pri = propagation_prior_step(model, carry.what, carry.where, carry.h_prior, m)
        lp_prop = (bernoulli_logpmf(fb.prop_pres[..., None], pri.pres)[..., 0]
                   + pri.what.log_prob(pw) + pri.where.log_prob(pwh)) * m
        log_prior = log_prior + lp_prop.sum(axis=1)
        log_prior = log_prior + discovery_prior_logprob(
            model, fb.n_discovered(), fb.disc_what, fb.disc_where, fb.n_propagated(), fb.disc_pres)
        canvas = compose_batch(model, np.concatenate([fb.prop_what, fb.disc_what], 1),
                               np.concatenate([fb.prop_where, fb.disc_where], 1),
                               np.concatenate([fb.prop_pres, fb.disc_pres], 1))
        log_lik = log_lik + frame_loglik(model, frames[t], canvas.pixels)
        h_prior_prev = ad.where(m[..., None] > 0, pri.h, 0.0)
        carry = compact(model, carry,
                        dict(what=pw, where=pwh, pres=fb.prop_pres, ids=fb.prop_ids,
                             h_prior=h_prior_prev, h_temporal=carry.h_temporal),
                        dict(what=ad.Tensor(fb.disc_what), where=ad.Tensor(fb.disc_where),
                             pres=fb.disc_pres, ids=fb.disc_ids,
                             h_prior=ad.zeros(carry.h_prior.shape),
                             h_temporal=ad.zeros(carry.h_temporal.shape)))
    return JointTerms(log_prior, log_lik)


def joint_logprob(model: SQAIR, frames, states: list[FrameBatch]) -> Tensor:
    return joint_terms(model, frames, states).total


# ---------------------------------------------------------------- sampling

@dataclass
class GeneratedSequence:
    frames: np.ndarray
    means: np.ndarray
    states: list[FrameBatch]
    carry: Carry


def sample_sequence(model: SQAIR, T: int, rng: Rng, n: int = 1, carry: Carry | None = None,
                    allow_discovery: bool = True) -> GeneratedSequence:
    """Ancestral sampling: propagate, then discover, then emit x_t ~ N(canvas, sigma_x^2)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    cfg = model.cfg
    N, A = model.N, model.A
    carry = carry or Carry.initial(model, n)
    P = carry.pres.shape[0]
    frames, means, states = [], [], []
    with ad.no_grad():
        for t in range(T):
            r = rng.child("t", t)
            m = carry.pres
            pri = propagation_prior_step(model, carry.what, carry.where, carry.h_prior, m)
            prop_pres = (r.uniform((P, N)) < pri.pres_probs).astype(float)
            prop_what = pri.what.rsample(r.normal((P, N, A))).data
            prop_where = pri.where.rsample(r.normal((P, N, WHERE_DIM))).data
            n_prop = prop_pres.sum(1).astype(np.int64)

            probs = discovery_count_dist(model, n_prop).probs.data
            if not allow_discovery:
                n_disc = np.zeros(P, dtype=np.int64)
            else:
                u = r.uniform(P)
                n_disc = np.minimum((np.cumsum(probs, axis=1) < u[:, None]).sum(1), N - n_prop)
            disc_pres = (np.arange(N)[None, :] < n_disc[:, None]).astype(float)
            disc_what = r.normal((P, N, A), scale=cfg.prior_std) * disc_pres[..., None]
            disc_where = r.normal((P, N, WHERE_DIM), scale=cfg.prior_std) * disc_pres[..., None]
            disc_mask = (np.arange(N)[None, :] <= n_disc[:, None]) & (np.arange(N)[None, :] < (N - n_prop)[:, None])
            disc_ids = fresh_ids(carry, disc_pres)

            fb = FrameBatch(prop_what * m[..., None], prop_where * m[..., None], prop_pres, m.copy(),
                            np.where(m > 0, carry.ids, -1), disc_what, disc_where, disc_pres,
                            disc_mask.astype(float), disc_ids)
            canvas = compose_batch(model, np.concatenate([fb.prop_what, disc_what], 1),
                                   np.concatenate([fb.prop_where, disc_where], 1),
                                   np.concatenate([prop_pres, disc_pres], 1))
            mean = canvas.pixels.data
            frames.append(mean + cfg.sigma_x * r.normal(mean.shape))
            means.append(mean)
            states.append(fb)
            carry = compact(model, carry,
                            dict(what=fb.prop_what, where=fb.prop_where, pres=prop_pres, ids=fb.prop_ids,
                                 h_prior=pri.h.data * m[..., None], h_temporal=carry.h_temporal),
                            dict(what=disc_what, where=disc_where, pres=disc_pres, ids=disc_ids,
                                 h_prior=np.zeros(carry.h_prior.shape),
                                 h_temporal=np.zeros(carry.h_temporal.shape)))
    return GeneratedSequence(np.stack(frames), np.stack(means), states, carry)
