"""Differentiable glimpse extraction and pasting (scale + shift attention).

Coordinates are normalised to [-1, 1] with -1 and 1 at the centres of the
first and last pixels. Samples falling outside the image read zeros.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

S_MAX = 2.0
S_MIN = 1e-3


@dataclass
class WhereParams:
    """Pose tensor of shape (..., 4) ordered (s_x, s_y, t_x, t_y)."""

    values: Tensor

    @classmethod
    def from_raw(cls, raw) -> "WhereParams":
        raw = ad.as_tensor(raw)
        s = ad.clamp(ad.softplus(raw[..., :2]), S_MIN, S_MAX)
        t = ad.tanh(raw[..., 2:])
        return cls(ad.concat([s, t], axis=-1))

    @classmethod
    def of(cls, sx, sy, tx, ty) -> "WhereParams":
        return cls(ad.Tensor(np.stack(np.broadcast_arrays(sx, sy, tx, ty), axis=-1).astype(float)))

    @property
    def scale(self) -> Tensor:
        return self.values[..., :2]

    @property
    def shift(self) -> Tensor:
        return self.values[..., 2:]

    def inverse(self) -> "WhereParams":
        s, t = self.scale, self.shift
        if (s.data < S_MIN).any():
            raise ValueError(f"scale below the {S_MIN} floor cannot be inverted")
        inv = 1.0 / s
        return WhereParams(ad.concat([inv, -t * inv], axis=-1))


def raw_from_where(sx, sy, tx, ty) -> np.ndarray:
    """Invert the squashing maps (softplus for scales, tanh for shifts)."""
    s = np.asarray([sx, sy], dtype=float)
    t = np.asarray([tx, ty], dtype=float)
    return np.concatenate([np.log(np.expm1(s)), np.arctanh(t)], axis=0)


def _norm_coords(n: int) -> np.ndarray:
    return np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1)


def make_grid(w: WhereParams, out_h: int, out_w: int) -> Tensor:
    """Source coordinates (..., out_h, out_w, 2) as (x, y) = s * base + t."""
    if out_h < 1 or out_w < 1:
        raise ValueError("grid size must be positive")
    v = w.values
    batch = v.shape[:-1]
    xs = _norm_coords(out_w).reshape((1,) * len(batch) + (1, out_w))
    ys = _norm_coords(out_h).reshape((1,) * len(batch) + (out_h, 1))
    col = lambda i: v[..., i].reshape(batch + (1, 1))
    gx = col(0) * xs + col(2) + np.zeros((out_h, 1))
    gy = col(1) * ys + col(3) + np.zeros((1, out_w))
    return ad.stack([gx, gy], axis=-1)


def bilinear_sample(image, grid) -> Tensor:
    """Bilinear read of ``image`` (..., H, W) at ``grid`` (..., h, w, 2); zero outside."""
    image, grid = ad.as_tensor(image), ad.as_tensor(grid)
    img = image.data
    g = grid.data
    H, W = img.shape[-2:]
    batch = img.shape[:-2]
    if g.shape[:-3] != batch or g.shape[-1] != 2:
        raise ad.ShapeError(f"grid {g.shape} does not match image {img.shape}")
    B = int(np.prod(batch)) if batch else 1
    oh, ow = g.shape[-3:-1]
    flat_img = img.reshape(B * H * W)
    gxy = g.reshape(B, oh * ow, 2)

    cx, cy = 0.5 * (W - 1), 0.5 * (H - 1)
    px = (gxy[..., 0] + 1.0) * cx
    py = (gxy[..., 1] + 1.0) * cy
    x0 = np.floor(px)
    y0 = np.floor(py)
    wx = px - x0
    wy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    base = (np.arange(B) * (H * W))[:, None]

    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi, yi = x0 + dx, y0 + dy
        valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        idx = np.where(valid, base + yi * W + xi, 0)
        val = np.where(valid, flat_img[idx], 0.0)
        corners.append((idx, valid, val))
    (i00, m00, v00), (i01, m01, v01), (i10, m10, v10), (i11, m11, v11) = corners
    w00 = (1 - wx) * (1 - wy)
    w01 = wx * (1 - wy)
    w10 = (1 - wx) * wy
    w11 = wx * wy
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11
    out_shape = g.shape[:-1]

    def fn(gout):
        go = gout.reshape(B, oh * ow)
        gimg = None
        if image.requires_grad:
            idx = np.concatenate([i00, i01, i10, i11], axis=None)
            wts = np.concatenate([go * w00 * m00, go * w01 * m01, go * w10 * m10, go * w11 * m11], axis=None)
            gimg = np.bincount(idx, weights=wts, minlength=B * H * W).reshape(img.shape)
        ggrid = None
        if grid.requires_grad:
            dpx = (v01 - v00) * (1 - wy) + (v11 - v10) * wy
            dpy = (v10 - v00) * (1 - wx) + (v11 - v01) * wx
            ggrid = np.stack([go * dpx * cx, go * dpy * cy], axis=-1).reshape(g.shape)
        return gimg, ggrid

    return ad._make(out.reshape(out_shape), (image, grid), fn)


def st_extract(image, w: WhereParams, glimpse_h: int, glimpse_w: int) -> Tensor:
    """Read a glimpse_h x glimpse_w window of ``image`` at pose ``w``."""
    return bilinear_sample(image, make_grid(w, glimpse_h, glimpse_w))


def st_inverse_paste(glimpse, w: WhereParams, img_h: int, img_w: int) -> Tensor:
    """Place ``glimpse`` onto an img_h x img_w canvas so that st_extract(canvas, w) recovers it."""
    return bilinear_sample(glimpse, make_grid(w.inverse(), img_h, img_w))


def glimpse_box(sx: float, sy: float, tx: float, ty: float, img_h: int,
                img_w: int) -> tuple[float, float, float, float]:
    """Pixel-space (x0, y0, x1, y1) support of a pasted glimpse."""
    cx, cy = 0.5 * (img_w - 1), 0.5 * (img_h - 1)
    return ((tx - sx + 1) * cx, (ty - sy + 1) * cy, (tx + sx + 1) * cx, (ty + sy + 1) * cy)
