"""Minimal PNG encoding of frame grids, with glimpse boxes drawn per object id."""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .transformer import WhereParams, glimpse_box

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"

# distinct colours cycled by object id
PALETTE = np.array([
    [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
    [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212],
], dtype=np.uint8)


def _chunk(kind: bytes, data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + kind + data + struct.pack(">I", zlib.crc32(kind + data) & 0xFFFFFFFF)


def encode_png(img: np.ndarray) -> bytes:
    """uint8 image (H, W) grey or (H, W, 3) RGB to PNG bytes."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise TypeError("expected uint8 pixels")
    if img.ndim == 2:
        color = 0
    elif img.ndim == 3 and img.shape[2] == 3:
        color = 2
    else:
        raise ValueError(f"unsupported image shape {img.shape}")
    h, w = img.shape[:2]
    rows = img.reshape(h, -1)
    raw = b"".join(b"\x00" + rows[i].tobytes() for i in range(h))
    ihdr = struct.pack(">IIBBBBB", w, h, 8, color, 0, 0, 0)
    return PNG_SIGNATURE + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", zlib.compress(raw, 9)) + _chunk(b"IEND", b"")


def decode_png(buf: bytes) -> np.ndarray:
    """Inverse of ``encode_png`` (8-bit, unfiltered scanlines only)."""
    if buf[:8] != PNG_SIGNATURE:
        raise ValueError("not a PNG")
    off, idat, hdr = 8, b"", None
    while off < len(buf):
        (n,) = struct.unpack_from(">I", buf, off)
        kind = buf[off + 4:off + 8]
        data = buf[off + 8:off + 8 + n]
        off += 12 + n
        if kind == b"IHDR":
            hdr = struct.unpack(">IIBBBBB", data)
        elif kind == b"IDAT":
            idat += data
    w, h, depth, color = hdr[:4]
    ch = {0: 1, 2: 3}[color]
    raw = np.frombuffer(zlib.decompress(idat), dtype=np.uint8).reshape(h, 1 + w * ch)
    if raw[:, 0].any():
        raise ValueError("filtered scanlines are not supported")
    pix = raw[:, 1:].copy()
    return pix.reshape(h, w) if ch == 1 else pix.reshape(h, w, 3)


def write_png(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_png(img))


def grid_shape(rows: int, cols: int, H: int, W: int, pad: int = 2) -> tuple[int, int]:
    return rows * H + (rows + 1) * pad, cols * W + (cols + 1) * pad


def cell_origin(r: int, c: int, H: int, W: int, pad: int = 2) -> tuple[int, int]:
    return pad + r * (H + pad), pad + c * (W + pad)


def frame_grid(rows: list[np.ndarray], pad: int = 2, background: int = 128) -> np.ndarray:
    """Tile rows of frames (T, H, W) in [0, 1] into one RGB canvas."""
    T, H, W = rows[0].shape
    gh, gw = grid_shape(len(rows), T, H, W, pad)
    out = np.full((gh, gw, 3), background, dtype=np.uint8)
    for r, frames in enumerate(rows):
        if frames.shape != (T, H, W):
            raise ValueError("all rows need the same frame shape")
        for c in range(T):
            y, x = cell_origin(r, c, H, W, pad)
            out[y:y + H, x:x + W] = (np.clip(frames[c], 0, 1) * 255 + 0.5).astype(np.uint8)[..., None]
    return out


def box_pixels(where_raw: np.ndarray, H: int, W: int) -> tuple[int, int, int, int]:
    """Rounded pixel rectangle (x0, y0, x1, y1) covered by a glimpse with raw pose ``where_raw``."""
    sx, sy, tx, ty = WhereParams.from_raw(np.asarray(where_raw, dtype=float)).values.data
    return tuple(int(round(v)) for v in glimpse_box(sx, sy, tx, ty, H, W))


def draw_box(img: np.ndarray, y0: int, x0: int, box, H: int, W: int, color) -> None:
    """Outline ``box`` (cell pixel coords) inside the cell whose top-left is (y0, x0), clipped to it."""
    bx0, by0, bx1, by1 = box
    cx0, cy0 = max(bx0, 0), max(by0, 0)
    cx1, cy1 = min(bx1, W - 1), min(by1, H - 1)
    if cx0 > cx1 or cy0 > cy1:
        return
    for x, (lo, hi) in ((bx0, (cy0, cy1)), (bx1, (cy0, cy1))):
        if 0 <= x < W:
            img[y0 + lo:y0 + hi + 1, x0 + x] = color
    for y, (lo, hi) in ((by0, (cx0, cx1)), (by1, (cx0, cx1))):
        if 0 <= y < H:
            img[y0 + y, x0 + lo:x0 + hi + 1] = color


def overlay_boxes(img: np.ndarray, row: int, boxes_per_frame: list, H: int, W: int, pad: int = 2) -> None:
    """``boxes_per_frame[t]`` is a list of (object id, raw where) drawn in cell (row, t)."""
    for t, boxes in enumerate(boxes_per_frame):
        y0, x0 = cell_origin(row, t, H, W, pad)
        for oid, raw in boxes:
            draw_box(img, y0, x0, box_pixels(raw, H, W), H, W, PALETTE[int(oid) % len(PALETTE)])
