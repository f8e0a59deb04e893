"""Model configuration and parameter construction for SQAIR / AIR."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import ParamRegistry, Rng
from .layers import GRUCell, Linear, MLP, RNNCell

WHERE_DIM = 4


@dataclass(frozen=True)
class ModelConfig:
    img_h: int = 50
    img_w: int = 50
    glimpse_h: int = 20
    glimpse_w: int = 20
    what_dim: int = 50
    max_objects: int = 3
    hidden: int = 64
    rnn_hidden: int = 64
    sigma_x: float = 0.3
    prior_std: float = 1.0
    decoder_bias: float = -2.0
    # initial posterior pose for discovery: glimpse half-extent and raw-space std
    disc_scale_init: float = 0.4
    disc_where_std_init: float = 0.3
    prop_where_std_init: float = 0.1
    prop_pres_bias: float = 2.0

    def as_dict(self) -> dict:
        return asdict(self)


def _inv_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


class SQAIR:
    """Parameter container; the maths lives in ``generative`` and ``inference``.

    The same parameter set serves AIR mode, which is discovery-only inference
    on independent frames.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params = ParamRegistry()
        rng = Rng(seed).child("init")
        p = self.params
        A, N, H, R = cfg.what_dim, cfg.max_objects, cfg.hidden, cfg.rnn_hidden
        G = cfg.glimpse_h * cfg.glimpse_w
        X = cfg.img_h * cfg.img_w
        W = WHERE_DIM

        # generative side
        self.decoder = MLP(p, "gen.decoder", [A, H, G], rng, out_bias=cfg.decoder_bias)
        self.disc_prior_logits = p.add("gen.disc_prior.logits", np.zeros((N + 1, N + 1)))
        self.prior_rnn = GRUCell(p, "gen.prop_prior.rnn", A + W, R, rng)
        self.prior_pres = Linear(p, "gen.prop_prior.pres", R, 1, rng, bias=cfg.prop_pres_bias)
        self.prior_what = Linear(p, "gen.prop_prior.what", R, 2 * A, rng, zero_init=True)
        self.prior_where = Linear(p, "gen.prop_prior.where", R, 2 * W, rng, zero_init=True,
                                  bias=0.0)
        self.prior_where.b.data[W:] = _inv_softplus(cfg.prop_where_std_init)

        # inference side
        self.glimpse_enc = MLP(p, "inf.glimpse_enc", [G, H, H], rng)
        self.img_enc = MLP(p, "inf.img_enc", [X, H, H], rng)
        self.latent_enc = MLP(p, "inf.latent_enc", [A + W, H, H], rng)

        self.proposal = MLP(p, "inf.prop.proposal", [W + R, H, W], rng, zero_last=True)
        self.relation_rnn = RNNCell(p, "inf.prop.relation_rnn", H + A + W + R + A + W, R, rng)
        self.temporal_rnn = GRUCell(p, "inf.prop.temporal_rnn", H + W + R, R, rng)
        prop_where_bias = np.concatenate([np.zeros(W), np.full(W, _inv_softplus(cfg.prop_where_std_init))])
        self.prop_q_where = MLP(p, "inf.prop.q_where", [W + A + R, H, 2 * W], rng, out_bias=prop_where_bias)
        self.prop_q_what = MLP(p, "inf.prop.q_what", [H + A + R + R, H, 2 * A], rng)
        self.prop_q_pres = MLP(p, "inf.prop.q_pres", [A + W + R + R, H, 1], rng, out_bias=cfg.prop_pres_bias)

        self.disc_rnn = RNNCell(p, "inf.disc.rnn", H + H + A + W, R, rng)
        self.disc_q_pres = MLP(p, "inf.disc.q_pres", [R, H, 1], rng)
        s_raw = _inv_softplus(cfg.disc_scale_init)
        disc_where_bias = np.array([s_raw, s_raw, 0.0, 0.0] + [_inv_softplus(cfg.disc_where_std_init)] * W)
        self.disc_q_where = MLP(p, "inf.disc.q_where", [R, H, 2 * W], rng, out_bias=disc_where_bias)
        self.disc_q_what = MLP(p, "inf.disc.q_what", [H, H, 2 * A], rng)

    @property
    def N(self) -> int:
        return self.cfg.max_objects

    @property
    def A(self) -> int:
        return self.cfg.what_dim
