"""Held-out metrics: counting accuracy, IWAE, KL / reconstruction split, digit-sum probe, prediction."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamRegistry, Rng
from .generative import Carry, FrameBatch, GeneratedSequence, sample_sequence
from .inference import ForcedSampler, PosteriorTrace, infer_sequence, make_sampler
from .layers import MLP
from .learning import iwae_bound
from .model import WHERE_DIM, SQAIR

N_SUMS = 19
# particles evaluated per forward pass; bounds peak memory for large K
MAX_PARTICLES = 2000


@dataclass
class MetricsReport:
    iwae_bound: float
    recon_loglik: float
    kl_estimate: float
    counting_accuracy: float
    addition_accuracy: float | None = None

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def counting_accuracy(inferred, truth) -> float:
    """Fraction of frames whose inferred object count equals the true count."""
    inferred, truth = np.asarray(inferred), np.asarray(truth)
    if inferred.shape != truth.shape:
        raise ValueError(f"misaligned counts: {inferred.shape} vs {truth.shape}")
    if inferred.size == 0:
        raise ValueError("no frames to score")
    return float((inferred == truth).mean())


def _sequence_rngs(rng: Rng, seqs, K: int, k0: int = 0, k1: int | None = None) -> list[Rng]:
    k1 = K if k1 is None else k1
    return [rng.child("seq", int(b), "particle", k) for b in seqs for k in range(k0, k1)]


def importance_weights(model: SQAIR, frames: np.ndarray, K: int, rng: Rng,
                       max_particles: int = MAX_PARTICLES) -> tuple[np.ndarray, np.ndarray]:
    """log w (B, K) and inferred counts (T, B, K) for frames (T, B, H, W).

    Particle noise is keyed by (sequence index, particle index), so results do
    not depend on how the work is chunked.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    frames = np.asarray(frames, dtype=float)
    T, B = frames.shape[:2]
    log_w = np.empty((B, K))
    counts = np.empty((T, B, K), dtype=np.int64)
    per_pass = max(1, max_particles // K)
    k_chunk = min(K, max_particles)
    with ad.no_grad():
        for b0 in range(0, B, per_pass):
            seqs = range(b0, min(B, b0 + per_pass))
            for k0 in range(0, K, k_chunk):
                k1 = min(K, k0 + k_chunk)
                x = np.repeat(frames[:, seqs.start:seqs.stop], k1 - k0, axis=1)
                sampler = make_sampler(model, T, rngs=_sequence_rngs(rng, seqs, K, k0, k1))
                tr = infer_sequence(model, x, sampler)
                n = len(seqs)
                log_w[seqs.start:seqs.stop, k0:k1] = tr.log_weight.data.reshape(n, k1 - k0)
                counts[:, seqs.start:seqs.stop, k0:k1] = tr.counts().reshape(T, n, k1 - k0)
    if not np.isfinite(log_w).all():
        raise ad.NonFiniteError("non-finite importance weights")
    return log_w, counts


def eval_iwae(model: SQAIR, frames: np.ndarray, K: int, rng: Rng,
              max_particles: int = MAX_PARTICLES) -> np.ndarray:
    """Per-sequence K-particle bound; report its mean over the dataset."""
    log_w, _ = importance_weights(model, frames, K, rng, max_particles)
    return iwae_bound(log_w).data


def kl_and_recon(model: SQAIR, frames: np.ndarray, rng: Rng,
                 max_particles: int = MAX_PARTICLES) -> tuple[float, float, np.ndarray]:
    """Single-trace estimates of E_q[log q - log p(z)] and E_q[log p(x | z)], plus counts (T, B)."""
    frames = np.asarray(frames, dtype=float)
    T, B = frames.shape[:2]
    kl, rec, counts = [], [], []
    with ad.no_grad():
        for b0 in range(0, B, max_particles):
            seqs = range(b0, min(B, b0 + max_particles))
            sampler = make_sampler(model, T, rngs=_sequence_rngs(rng, seqs, 1))
            tr = infer_sequence(model, frames[:, seqs.start:seqs.stop], sampler)
            kl.append(tr.log_q.data - tr.log_prior.data)
            rec.append(tr.log_lik.data)
            counts.append(tr.counts())
    return float(np.concatenate(kl).mean()), float(np.concatenate(rec).mean()), np.concatenate(counts, axis=1)


def evaluate(model: SQAIR, frames: np.ndarray, true_counts: np.ndarray, K: int, rng: Rng,
             max_particles: int = MAX_PARTICLES) -> MetricsReport:
    bound = eval_iwae(model, frames, K, rng.child("iwae"), max_particles)
    kl, rec, counts = kl_and_recon(model, frames, rng.child("single"), max_particles)
    return MetricsReport(float(bound.mean()), rec, kl, counting_accuracy(counts, true_counts))


# ---------------------------------------------------------------- exact enumeration

def _grid_table(grid: np.ndarray, dim: int) -> np.ndarray:
    return np.array(list(itertools.product(grid, repeat=dim)), dtype=float)


def enumerate_states(model: SQAIR, T: int, grid=(-1.0, 0.0, 1.0)) -> list[FrameBatch]:
    """Every latent trajectory of a single-slot model with z_what and raw z_where on ``grid``.

    An object that stops being present keeps its latents pinned at zero, so the
    enumeration is a finite set on which exact importance weighting is possible.
    """
    if model.N != 1:
        raise ValueError("enumeration supports max_objects == 1 only")
    A = model.A
    table = _grid_table(np.asarray(grid, dtype=float), A + WHERE_DIM)
    C = len(table)
    # per frame: (prop_pres, prop_cfg, disc_pres, disc_cfg); cfg -1 means pinned / unused
    seqs = [([], False)]
    for _ in range(T):
        nxt = []
        for path, alive in seqs:
            if alive:
                opts = [(1, c, 0, -1) for c in range(C)] + [(0, -1, 0, -1)] + [(0, -1, 1, c) for c in range(C)]
            else:
                opts = [(0, -1, 0, -1)] + [(0, -1, 1, c) for c in range(C)]
            for o in opts:
                nxt.append((path + [o], bool(o[0] or o[2])))
        seqs = nxt
    codes = np.array([p for p, _ in seqs], dtype=np.int64)     # (P, T, 4)
    P = len(codes)
    lookup = np.vstack([table, np.zeros((1, A + WHERE_DIM))])  # index -1 -> pinned zeros
    states = []
    alive = np.zeros(P)
    obj_id = np.full(P, -1, dtype=np.int64)
    next_id = np.zeros(P, dtype=np.int64)
    for t in range(T):
        pp, pc, dp, dc = codes[:, t].T
        prop_lat = lookup[pc] * alive[:, None]
        disc_lat = lookup[dc] * dp[:, None]
        disc_ids = np.where(dp > 0, next_id, -1)
        fb = FrameBatch(
            prop_what=prop_lat[:, None, :A], prop_where=prop_lat[:, None, A:],
            prop_pres=pp[:, None].astype(float), prop_mask=alive[:, None].copy(),
            prop_ids=np.where(alive > 0, obj_id, -1)[:, None],
            disc_what=disc_lat[:, None, :A], disc_where=disc_lat[:, None, A:],
            disc_pres=dp[:, None].astype(float), disc_mask=(pp == 0)[:, None].astype(float),
            disc_ids=disc_ids[:, None])
        states.append(fb)
        obj_id = np.where(pp > 0, obj_id, disc_ids)
        next_id = next_id + dp
        alive = ((pp + dp) > 0).astype(float)
    return states


def eval_iwae_exact(model: SQAIR, frames: np.ndarray, states: list[FrameBatch]) -> float:
    """Bound with the particle set equal to the whole enumeration.

    Proposal mass is q renormalised over the enumeration; each weight is
    p / mass and is averaged with that mass instead of uniformly, which makes
    the estimate exact on the finite latent set.
    """
    frames = np.asarray(frames, dtype=float)
    P = states[0].n_particles
    x = np.broadcast_to(frames[:, None], (frames.shape[0], P) + frames.shape[1:])
    with ad.no_grad():
        tr = infer_sequence(model, x, ForcedSampler(states))
    log_q = tr.log_q.data
    log_mass = log_q - _logsumexp(log_q)
    log_w = tr.log_weight.data + log_q - log_mass
    return float(iwae_bound(log_w, log_mass=log_mass).data)


def _logsumexp(a: np.ndarray) -> float:
    m = a.max()
    return float(m + np.log(np.exp(a - m).sum()))


# ---------------------------------------------------------------- digit-sum probe

@dataclass
class ProbeConfig:
    hidden: int = 256
    epochs: int = 30
    batch: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    train_frac: float = 0.8


class ProbeClassifier:
    """Two ELU hidden layers and a 19-way softmax over digit sums."""

    def __init__(self, n_in: int, rng: Rng, hidden: int = 256, n_out: int = N_SUMS):
        self.params = ParamRegistry()
        self.net = MLP(self.params, "probe", [n_in, hidden, hidden, n_out], rng)

    def logits(self, feats) -> ad.Tensor:
        return self.net(ad.as_tensor(feats))

    def loss(self, feats, labels: np.ndarray) -> ad.Tensor:
        lp = ad.log_softmax(self.logits(feats), axis=-1)
        return -(lp * np.eye(lp.shape[-1])[labels]).sum(axis=-1).mean()

    def predict(self, feats) -> np.ndarray:
        with ad.no_grad():
            return self.logits(feats).data.argmax(-1)


class Adam:
    def __init__(self, params: ParamRegistry, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params, self.lr, self.b1, self.b2, self.eps = params, lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        for n, p in self.params.items():
            g = p.grad
            self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * g * g
            mh = self.m[n] / (1 - self.b1 ** self.t)
            vh = self.v[n] / (1 - self.b2 ** self.t)
            p.data = p.data - self.lr * mh / (np.sqrt(vh) + self.eps)


def fit_probe(features: np.ndarray, targets: np.ndarray, cfg: ProbeConfig, rng: Rng) -> float:
    """Train on a random split of (features, targets) and return held-out accuracy."""
    features = np.asarray(features, dtype=float)
    targets = np.asarray(targets, dtype=np.int64)
    if len(features) != len(targets):
        raise ValueError("features and targets differ in length")
    n = len(targets)
    perm = rng.child("split").gen.permutation(n)
    n_tr = max(1, int(round(cfg.train_frac * n)))
    tr_idx, te_idx = perm[:n_tr], perm[n_tr:]
    if len(te_idx) == 0:
        raise ValueError("no held-out examples")
    probe = ProbeClassifier(features.shape[1], rng.child("init"), cfg.hidden)
    opt = Adam(probe.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    shuffle = rng.child("shuffle").gen
    for _ in range(cfg.epochs):
        order = tr_idx[shuffle.permutation(len(tr_idx))]
        for i in range(0, len(order), cfg.batch):
            idx = order[i:i + cfg.batch]
            probe.params.zero_grad()
            probe.loss(features[idx], targets[idx]).backward()
            opt.step()
    return float((probe.predict(features[te_idx]) == targets[te_idx]).mean())


def majority_baseline(targets) -> float:
    targets = np.asarray(targets, dtype=np.int64)
    return float(np.bincount(targets).max() / len(targets))


def slot_features(model: SQAIR, trace: PosteriorTrace) -> np.ndarray:
    """Per-frame z_what of present objects in N slots (carry order), absent slots zero: (T, P, N*A)."""
    N, A = model.N, model.A
    out = []
    for fb in trace.states:
        pres = np.concatenate([fb.prop_pres, fb.disc_pres], 1)
        what = np.concatenate([fb.prop_what, fb.disc_what], 1)
        order = np.argsort(-pres, axis=1, kind="stable")[:, :N]
        w = np.take_along_axis(what, order[..., None], axis=1)
        w = w * np.take_along_axis(pres, order, axis=1)[..., None]
        out.append(w.reshape(len(w), N * A))
    return np.stack(out)


def train_sum_probe(model: SQAIR, frames: np.ndarray, digit_sums: np.ndarray, cfg: ProbeConfig, rng: Rng) -> float:
    """Held-out accuracy of predicting per-frame digit sums from inferred z_what."""
    if digit_sums is None:
        raise ValueError("digit labels are required")
    frames = np.asarray(frames, dtype=float)
    T, B = frames.shape[:2]
    with ad.no_grad():
        sampler = make_sampler(model, T, rngs=_sequence_rngs(rng.child("infer"), range(B), 1))
        tr = infer_sequence(model, frames, sampler)
    feats = slot_features(model, tr).reshape(T * B, -1)
    return fit_probe(feats, np.asarray(digit_sums).reshape(T * B), cfg, rng.child("probe"))


# ---------------------------------------------------------------- conditional generation

@dataclass
class Prediction:
    reconstructions: np.ndarray     # (k, B, H, W)
    generated: GeneratedSequence    # continuation of length T_total - k
    trace: PosteriorTrace

    @property
    def frames(self) -> np.ndarray:
        """Reconstructed prefix followed by the generated mean frames."""
        return np.concatenate([self.reconstructions, self.generated.means], axis=0)


def conditional_generate(model: SQAIR, prefix: np.ndarray, T_total: int, rng: Rng,
                         allow_discovery: bool = True) -> Prediction:
    """Infer latents for the k prefix frames, then sample the remaining frames from the prior."""
    prefix = np.asarray(prefix, dtype=float)
    k, B = prefix.shape[:2]
    if not 1 <= k < T_total:
        raise ValueError(f"need 1 <= k < T_total, got k={k}, T_total={T_total}")
    with ad.no_grad():
        sampler = make_sampler(model, k, rngs=_sequence_rngs(rng.child("infer"), range(B), 1))
        tr = infer_sequence(model, prefix, sampler)
    carry = _detach(tr.carry)
    gen = sample_sequence(model, T_total - k, rng.child("generate"), n=B, carry=carry,
                          allow_discovery=allow_discovery)
    return Prediction(tr.canvases, gen, tr)


def _detach(c: Carry) -> Carry:
    t = lambda v: ad.Tensor(np.array(v.data))
    return Carry(t(c.what), t(c.where), c.pres.copy(), c.ids.copy(), t(c.h_prior), t(c.h_temporal),
                 c.next_id.copy())
