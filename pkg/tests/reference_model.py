"""Plain-numpy re-derivation of the single-slot joint density, written without
the autodiff graph or the batched slot machinery. Used as an independent oracle.
"""
import numpy as np

LOG_2PI = np.log(2 * np.pi)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


class Params:
    def __init__(self, model):
        self.v = {k: t.data for k, t in model.params.items()}
        self.cfg = model.cfg

    def lin(self, name, x):
        return x @ self.v[name + ".w"] + self.v[name + ".b"]

    def mlp(self, name, x, n_layers):
        for i in range(n_layers):
            x = self.lin(f"{name}.l{i}", x)
            if i < n_layers - 1:
                x = elu(x)
        return x

    def gru(self, name, x, h):
        R = h.shape[-1]
        gx = x @ self.v[name + ".w"] + self.v[name + ".b"]
        gh = h @ self.v[name + ".u"]
        z = sigmoid(gx[:, :R] + gh[:, :R])
        r = sigmoid(gx[:, R:2 * R] + gh[:, R:2 * R])
        n = np.tanh(gx[:, 2 * R:] + r * gh[:, 2 * R:])
        return (1 - z) * n + z * h


def gauss_lp(x, mu, sd):
    return (-0.5 * ((x - mu) / sd) ** 2 - np.log(sd) - 0.5 * LOG_2PI).sum(-1)


def bern_lp(k, logit):
    logit = np.clip(logit, -15, 15)
    return np.where(k > 0, -np.logaddexp(0, -logit), -np.logaddexp(0, logit))


def paste(glimpse, raw, H, W):
    """Inverse-affine bilinear paste, pixel by pixel; glimpse (P, gh, gw), raw (P, 4)."""
    P, gh, gw = glimpse.shape
    s = np.clip(softplus(raw[:, :2]), 1e-3, 2.0)
    t = np.tanh(raw[:, 2:])
    out = np.zeros((P, H, W))
    ys = np.linspace(-1, 1, H) if H > 1 else np.zeros(1)
    xs = np.linspace(-1, 1, W) if W > 1 else np.zeros(1)
    for u in range(H):
        for v in range(W):
            sx = (xs[v] - t[:, 0]) / s[:, 0]
            sy = (ys[u] - t[:, 1]) / s[:, 1]
            px = (sx + 1) * (gw - 1) / 2
            py = (sy + 1) * (gh - 1) / 2
            x0, y0 = np.floor(px).astype(int), np.floor(py).astype(int)
            fx, fy = px - x0, py - y0
            acc = np.zeros(P)
            for dy, dx, wt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                               (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
                yi, xi = y0 + dy, x0 + dx
                ok = (yi >= 0) & (yi < gh) & (xi >= 0) & (xi < gw)
                vals = glimpse[np.arange(P), np.clip(yi, 0, gh - 1), np.clip(xi, 0, gw - 1)]
                acc += np.where(ok, wt * vals, 0.0)
            out[:, u, v] = acc
    return out


def joint_single_slot(model, frames, states):
    """log p(x, z) per particle for a max_objects == 1 model.

    ``states`` are FrameBatch objects; only their latent values are read.
    """
    p = Params(model)
    cfg = model.cfg
    A, R = cfg.what_dim, cfg.rnn_hidden
    H, W = cfg.img_h, cfg.img_w
    T, P = frames.shape[:2]
    total = np.zeros(P)
    alive = np.zeros(P)
    what = np.zeros((P, A))
    where = np.zeros((P, 4))
    h_prior = np.zeros((P, R))
    logits = p.v["gen.disc_prior.logits"]
    std0 = cfg.prior_std
    for t in range(T):
        fb = states[t]
        pp, dp = fb.prop_pres[:, 0], fb.disc_pres[:, 0]
        pw, pwh = fb.prop_what[:, 0], fb.prop_where[:, 0]
        dw, dwh = fb.disc_what[:, 0], fb.disc_where[:, 0]

        h = p.gru("gen.prop_prior.rnn", np.concatenate([what, where], 1), h_prior)
        pres_logit = p.lin("gen.prop_prior.pres", h)[:, 0]
        wo = p.lin("gen.prop_prior.what", h)
        ro = p.lin("gen.prop_prior.where", h)
        lp_prop = (bern_lp(pp, pres_logit)
                   + gauss_lp(pw, what + wo[:, :A], softplus(wo[:, A:]) + 1e-4)
                   + gauss_lp(pwh, where + ro[:, :4], softplus(ro[:, 4:]) + 1e-4))
        total += alive * lp_prop

        # truncated count prior: row P_t, support {0 .. 1 - P_t}
        row = logits[pp.astype(int)]
        lse_free = np.logaddexp(row[:, 0], row[:, 1])
        count_lp = np.where(pp > 0, 0.0, row[np.arange(P), dp.astype(int)] - lse_free)
        total += count_lp + dp * (gauss_lp(dw, 0.0, std0) + gauss_lp(dwh, 0.0, std0))

        obj_what = np.where(pp[:, None] > 0, pw, dw)
        obj_where = np.where(pp[:, None] > 0, pwh, dwh)
        on = np.maximum(pp, dp)
        g = sigmoid(p.mlp("gen.decoder", obj_what, 2)).reshape(P, cfg.glimpse_h, cfg.glimpse_w)
        canvas = paste(g, obj_where, H, W) * on[:, None, None]
        diff = (frames[t] - canvas).reshape(P, -1)
        total += (-0.5 * (diff / cfg.sigma_x) ** 2 - np.log(cfg.sigma_x) - 0.5 * LOG_2PI).sum(-1)

        h_prior = np.where(pp[:, None] > 0, h, 0.0)
        what, where, alive = obj_what * on[:, None], obj_where * on[:, None], on
    return total
