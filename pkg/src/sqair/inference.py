"""Amortised posterior: propagation and discovery inference over a sequence.

Latents are drawn through a *sampler*. ``RandomSampler`` uses a per-particle
noise bank (reparameterised Gaussians, uniform thresholds for presence);
``ForcedSampler`` replays given latents so that the same pass scores them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .distributions import BernoulliDist, DiagGaussian, bernoulli_logpmf
from .generative import (Carry, FrameBatch, compact, compose_batch, discovery_prior_logprob,
                         fresh_ids, frame_loglik, propagation_prior_step)
from .model import SQAIR, WHERE_DIM
from .transformer import WhereParams, st_extract

PROP, DISC = 0, 1


class NoiseBank:
    """Standard normals (P, T, 2, N, 4 + A) and uniforms (P, T, 2, N), one substream per particle."""

    def __init__(self, normals: np.ndarray, uniforms: np.ndarray):
        self.normals = normals
        self.uniforms = uniforms

    @classmethod
    def draw(cls, rngs, T: int, N: int, A: int) -> "NoiseBank":
        if isinstance(rngs, Rng):
            raise TypeError("pass one Rng per particle")
        normals = np.stack([r.normal((T, 2, N, WHERE_DIM + A)) for r in rngs])
        uniforms = np.stack([r.uniform((T, 2, N)) for r in rngs])
        return cls(normals, uniforms)


class RandomSampler:
    def __init__(self, bank: NoiseBank):
        self.bank = bank

    def continuous(self, t, phase, slot, kind, dist: DiagGaussian) -> Tensor:
        eps = self.bank.normals[:, t, phase, slot]
        eps = eps[:, :WHERE_DIM] if kind == "where" else eps[:, WHERE_DIM:]
        return dist.rsample(eps)

    def presence(self, t, phase, slot, dist: BernoulliDist, active: np.ndarray) -> np.ndarray:
        return dist.sample(self.bank.uniforms[:, t, phase, slot][:, None])[:, 0] * active


class ForcedSampler:
    """Returns the latents stored in ``states`` instead of sampling."""

    def __init__(self, states: list[FrameBatch]):
        self.states = states

    def continuous(self, t, phase, slot, kind, dist) -> Tensor:
        fb = self.states[t]
        src = {(PROP, "where"): fb.prop_where, (PROP, "what"): fb.prop_what,
               (DISC, "where"): fb.disc_where, (DISC, "what"): fb.disc_what}[(phase, kind)]
        return ad.Tensor(src[:, slot])

    def presence(self, t, phase, slot, dist, active) -> np.ndarray:
        fb = self.states[t]
        pres = (fb.prop_pres if phase == PROP else fb.disc_pres)[:, slot].astype(float)
        if ((pres > 0) & (active == 0)).any():
            raise ValueError("forced presence on an inactive slot")
        return pres * active


def make_sampler(model: SQAIR, T: int, rng=None, rngs=None, P: int | None = None) -> RandomSampler:
    if rngs is None:
        rngs = [rng.child("particle", p) for p in range(P)]
    return RandomSampler(NoiseBank.draw(rngs, T, model.N, model.A))


@dataclass
class Record:
    kind: str
    mask: np.ndarray
    value: np.ndarray
    params: tuple


@dataclass
class PosteriorTrace:
    states: list[FrameBatch]
    log_q: Tensor
    log_q_pres: Tensor
    log_prior: Tensor
    log_lik: Tensor
    carry: Carry
    canvases: np.ndarray
    records: list[Record] = field(default_factory=list)

    @property
    def log_weight(self) -> Tensor:
        return self.log_prior + self.log_lik - self.log_q

    def counts(self) -> np.ndarray:
        """Inferred object counts, shape (T, P)."""
        return np.stack([fb.counts() for fb in self.states])


def replay_log_q(trace: PosteriorTrace) -> np.ndarray:
    """Recompute log q by scoring stored latents against stored distribution parameters."""
    from .distributions import gaussian_logpdf
    total = np.zeros(trace.log_q.shape)
    with ad.no_grad():
        for r in trace.records:
            if r.kind == "gauss":
                lp = gaussian_logpdf(r.value, DiagGaussian(ad.Tensor(r.params[0]), ad.Tensor(r.params[1]))).data
            else:
                lp = bernoulli_logpmf(r.value[:, None], BernoulliDist(ad.Tensor(r.params[0])))[:, 0].data
            total += lp * r.mask
    return total


# ---------------------------------------------------------------- pieces

def _glimpse_code(model: SQAIR, x: Tensor, where) -> Tensor:
    """Encode the glimpse at ``where`` (WhereParams, or a raw pose tensor)."""
    cfg = model.cfg
    w = where if isinstance(where, WhereParams) else WhereParams.from_raw(where)
    g = st_extract(x, w, cfg.glimpse_h, cfg.glimpse_w)
    return model.glimpse_enc(g.reshape(g.shape[0], cfg.glimpse_h * cfg.glimpse_w))


def propose_glimpse_location(model: SQAIR, where_prev, h_temporal) -> WhereParams:
    """Proposal pose: previous raw pose plus a perceptron-predicted delta, then squashed."""
    where_prev = ad.as_tensor(where_prev)
    delta = model.proposal(ad.concat([where_prev, ad.as_tensor(h_temporal)], axis=-1))
    return WhereParams.from_raw(where_prev + delta)


def propagate_object(model: SQAIR, x: Tensor, what_prev, where_prev, h_temporal, h_rel,
                     prev_what, prev_where, sampler, t: int, slot: int, present: np.ndarray,
                     records: list | None = None) -> dict:
    """Update one tracked object (batched over particles).

    Rows with ``present == 0`` are carried along but contribute nothing.
    """
    present = np.asarray(present, dtype=float)
    if not present.any():
        raise ValueError("propagate_object called on an absent object")
    A = model.A
    what_prev, where_prev = ad.as_tensor(what_prev), ad.as_tensor(where_prev)
    h_temporal = ad.as_tensor(h_temporal)

    proposal = propose_glimpse_location(model, where_prev, h_temporal)
    e_hat = _glimpse_code(model, x, proposal)
    h_rel = model.relation_rnn(
        ad.concat([e_hat, what_prev, where_prev, h_temporal, ad.as_tensor(prev_what), ad.as_tensor(prev_where)], -1),
        ad.as_tensor(h_rel))

    out = model.prop_q_where(ad.concat([where_prev, what_prev, h_rel], -1))
    q_where = DiagGaussian.from_raw(where_prev + out[:, :WHERE_DIM], out[:, WHERE_DIM:])
    where = sampler.continuous(t, PROP, slot, "where", q_where)

    e = _glimpse_code(model, x, where)
    h_temp_new = model.temporal_rnn(ad.concat([e, where, h_rel], -1), h_temporal)

    out = model.prop_q_what(ad.concat([e, what_prev, h_rel, h_temp_new], -1))
    q_what = DiagGaussian.from_raw(what_prev + out[:, :A], out[:, A:])
    what = sampler.continuous(t, PROP, slot, "what", q_what)

    q_pres = BernoulliDist.from_logits(model.prop_q_pres(ad.concat([what, where, h_temp_new, h_rel], -1)))
    pres = sampler.presence(t, PROP, slot, q_pres, present)

    log_q_cont = (q_where.log_prob(where) + q_what.log_prob(what)) * present
    log_q_pres = bernoulli_logpmf(pres[:, None], q_pres)[:, 0] * present
    if records is not None:
        records.append(Record("gauss", present, where.data.copy(), (q_where.mean.data, q_where.std.data)))
        records.append(Record("gauss", present, what.data.copy(), (q_what.mean.data, q_what.std.data)))
        records.append(Record("bern", present, pres.copy(), (q_pres.logits.data,)))
    return dict(what=what, where=where, pres=pres, h_temporal=h_temp_new, h_rel=h_rel,
                log_q=log_q_cont + log_q_pres, log_q_pres=log_q_pres, q_pres=q_pres,
                q_where=q_where, q_what=q_what)


def encode_latents(model: SQAIR, what, where, pres: np.ndarray) -> Tensor:
    """Permutation-invariant sum of per-object embeddings over present objects; (P, N, .) -> (P, hidden)."""
    what, where = ad.as_tensor(what), ad.as_tensor(where)
    pres = np.asarray(pres, dtype=float)
    if not pres.any():
        return ad.zeros(pres.shape[:-1] + (model.cfg.hidden,))
    emb = model.latent_enc(ad.concat([what, where], -1))
    return (emb * pres[..., None]).sum(axis=-2)


def discover_step(model: SQAIR, x: Tensor, prop_what, prop_where, prop_pres: np.ndarray, sampler,
                  t: int, records: list | None = None) -> dict:
    """AIR-style discovery, at most N - P_t iterations, stopping at the first absent sample."""
    cfg = model.cfg
    N, A = model.N, model.A
    P = x.shape[0]
    n_prop = np.asarray(prop_pres).sum(1).astype(np.int64)
    slots = dict(what=[], where=[], pres=[], mask=[])
    log_q = ad.zeros(P)
    log_q_pres = ad.zeros(P)
    going = np.ones(P)
    if (n_prop < N).any():
        e_img = model.img_enc(x.reshape(P, cfg.img_h * cfg.img_w))
        latents = encode_latents(model, prop_what, prop_where, prop_pres)
        h = ad.zeros((P, cfg.rnn_hidden))
        prev_what, prev_where = ad.zeros((P, A)), ad.zeros((P, WHERE_DIM))
    for j in range(N):
        active = going * (n_prop + j < N)
        if not active.any():
            slots["what"].append(ad.zeros((P, A)))
            slots["where"].append(ad.zeros((P, WHERE_DIM)))
            slots["pres"].append(np.zeros(P))
            slots["mask"].append(np.zeros(P))
            going = np.zeros(P)
            continue
        h = model.disc_rnn(ad.concat([e_img, latents, prev_what, prev_where], -1), h)
        q_pres = BernoulliDist.from_logits(model.disc_q_pres(h))
        pres = sampler.presence(t, DISC, j, q_pres, active)
        out = model.disc_q_where(h)
        q_where = DiagGaussian.from_raw(out[:, :WHERE_DIM], out[:, WHERE_DIM:])
        where = sampler.continuous(t, DISC, j, "where", q_where)
        out = model.disc_q_what(_glimpse_code(model, x, where))
        q_what = DiagGaussian.from_raw(out[:, :A], out[:, A:])
        what = sampler.continuous(t, DISC, j, "what", q_what)

        lp_pres = bernoulli_logpmf(pres[:, None], q_pres)[:, 0] * active
        log_q_pres = log_q_pres + lp_pres
        log_q = log_q + lp_pres + (q_where.log_prob(where) + q_what.log_prob(what)) * pres
        if records is not None:
            records.append(Record("bern", active, pres.copy(), (q_pres.logits.data,)))
            records.append(Record("gauss", pres, where.data.copy(), (q_where.mean.data, q_where.std.data)))
            records.append(Record("gauss", pres, what.data.copy(), (q_what.mean.data, q_what.std.data)))
        slots["what"].append(what)
        slots["where"].append(where)
        slots["pres"].append(pres)
        slots["mask"].append(active)
        going = pres
        prev_what, prev_where = what, where
    return dict(what=ad.stack(slots["what"], 1), where=ad.stack(slots["where"], 1),
                pres=np.stack(slots["pres"], 1), mask=np.stack(slots["mask"], 1),
                log_q=log_q, log_q_pres=log_q_pres, n_prop=n_prop)


# ---------------------------------------------------------------- sequence

def infer_sequence(model: SQAIR, frames, sampler, record: bool = False,
                   carry: Carry | None = None) -> PosteriorTrace:
    """Sample z ~ q(z | x) for frames (T, P, H, W), scoring log q and log p in one pass."""
    frames = np.asarray(frames, dtype=float)
    if frames.ndim != 4:
        raise ad.ShapeError("frames must be (T, P, H, W)")
    T, P = frames.shape[:2]
    if T < 1:
        raise ValueError("need at least one frame")
    N, A = model.N, model.A
    carry = carry or Carry.initial(model, P)
    records = [] if record else None
    log_q = ad.zeros(P)
    log_q_pres = ad.zeros(P)
    log_prior = ad.zeros(P)
    log_lik = ad.zeros(P)
    states, canvases = [], []

    for t in range(T):
        x = ad.Tensor(frames[t])
        m = carry.pres
        h_rel = ad.zeros((P, model.cfg.rnn_hidden))
        prev_what, prev_where = ad.zeros((P, A)), ad.zeros((P, WHERE_DIM))
        p_what, p_where, p_pres, p_htemp = [], [], [], []
        for i in range(N):
            mi = m[:, i]
            if not mi.any():
                p_what.append(ad.zeros((P, A)))
                p_where.append(ad.zeros((P, WHERE_DIM)))
                p_pres.append(np.zeros(P))
                p_htemp.append(carry.h_temporal[:, i])
                continue
            o = propagate_object(model, x, carry.what[:, i], carry.where[:, i], carry.h_temporal[:, i],
                                 h_rel, prev_what, prev_where, sampler, t, i, mi, records)
            log_q = log_q + o["log_q"]
            log_q_pres = log_q_pres + o["log_q_pres"]
            keep = mi[:, None] > 0
            h_rel = ad.where(keep, o["h_rel"], h_rel)
            prev_what = ad.where(keep, o["what"], prev_what)
            prev_where = ad.where(keep, o["where"], prev_where)
            p_what.append(o["what"])
            p_where.append(o["where"])
            p_pres.append(o["pres"])
            p_htemp.append(o["h_temporal"])
        prop_what, prop_where = ad.stack(p_what, 1), ad.stack(p_where, 1)
        prop_pres = np.stack(p_pres, 1)

        if m.any():
            pri = propagation_prior_step(model, carry.what, carry.where, carry.h_prior, m)
            log_prior = log_prior + pri.log_prob(prop_pres, prop_what, prop_where).sum(axis=1)
            h_prior = ad.where(m[..., None] > 0, pri.h, 0.0)
        else:
            h_prior = carry.h_prior

        d = discover_step(model, x, prop_what, prop_where, prop_pres, sampler, t, records)
        log_q = log_q + d["log_q"]
        log_q_pres = log_q_pres + d["log_q_pres"]
        n_disc = d["pres"].sum(1).astype(np.int64)
        log_prior = log_prior + discovery_prior_logprob(model, n_disc, d["what"], d["where"], d["n_prop"], d["pres"])

        all_pres = np.concatenate([prop_pres, d["pres"]], 1)
        canvas = compose_batch(model, ad.concat([prop_what, d["what"]], 1),
                               ad.concat([prop_where, d["where"]], 1), all_pres)
        log_lik = log_lik + frame_loglik(model, x, canvas.pixels)
        canvases.append(canvas.pixels.data)

        disc_ids = fresh_ids(carry, d["pres"])
        prop_ids = np.where(m > 0, carry.ids, -1)
        states.append(FrameBatch(
            prop_what.data * m[..., None], prop_where.data * m[..., None], prop_pres, m.copy(), prop_ids,
            d["what"].data * d["pres"][..., None], d["where"].data * d["pres"][..., None],
            d["pres"], d["mask"], disc_ids))
        carry = compact(model, carry,
                        dict(what=prop_what, where=prop_where, pres=prop_pres, ids=prop_ids,
                             h_prior=h_prior, h_temporal=ad.stack(p_htemp, 1)),
                        dict(what=d["what"], where=d["where"], pres=d["pres"], ids=disc_ids,
                             h_prior=ad.zeros(carry.h_prior.shape), h_temporal=ad.zeros(carry.h_temporal.shape)))

    return PosteriorTrace(states, log_q, log_q_pres, log_prior, log_lik, carry,
                          np.stack(canvases), records or [])


def air_mode_infer(model: SQAIR, x, sampler, record: bool = False) -> PosteriorTrace:
    """Discovery-only inference on single frames (P, H, W); frames are independent."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[None]
    return infer_sequence(model, x[None], sampler, record)
