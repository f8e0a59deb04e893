"""Moving-sprite sequences with ground truth, IDX ingestion and the on-disk dataset container."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Rng

# 5x7 digit bitmaps, one string per row
FONT_5X7 = {
    0: ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    1: ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    2: ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    3: ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    4: ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    5: ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    6: ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    7: ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    8: ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    9: ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
}

MAX_PLACEMENT_TRIES = 1000


def font_bitmap(digit: int) -> np.ndarray:
    if digit not in FONT_5X7:
        raise ValueError(f"no glyph for {digit!r}")
    return np.array([[c == "1" for c in row] for row in FONT_5X7[digit]], dtype=np.float32)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable linear resize with corner pixels aligned."""
    h, w = img.shape
    ys = np.linspace(0, h - 1, out_h)
    xs = np.linspace(0, w - 1, out_w)
    rows = np.stack([np.interp(xs, np.arange(w), r) for r in img])
    return np.stack([np.interp(ys, np.arange(h), c) for c in rows.T], axis=1)


def render_glyph(digit: int, size: int = 20, smooth: bool = True) -> np.ndarray:
    """Square sprite of the digit; the 5x7 bitmap is padded to 7x7 to keep its aspect."""
    bm = np.pad(font_bitmap(digit), ((0, 0), (1, 1)))
    idx = (np.arange(size) * 7) // size
    sprite = bm[idx][:, idx]
    if smooth:
        padded = np.pad(sprite, 1)
        sprite = sum(padded[i:i + size, j:j + size] for i in range(3) for j in range(3)) / 9.0
        sprite = np.clip(sprite * 1.5, 0.0, 1.0)
    return sprite.astype(np.float32)


@dataclass(frozen=True)
class DataConfig:
    img_size: int = 50
    T: int = 10
    sprite_size: int = 20
    counts: tuple = (0, 1, 2)
    speed_min: float = 1.0
    speed_max: float = 3.0
    # sprites bounce inside a square arena this many times the visible window
    arena_factor: float = 1.5
    smooth: bool = True
    variant: str = "standard"

    def __post_init__(self):
        if self.variant not in ("standard", "appearing"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.sprite_size > self.img_size:
            raise ValueError("sprite larger than the frame")
        if not 0 <= self.speed_min <= self.speed_max:
            raise ValueError("need 0 <= speed_min <= speed_max")
        if self.T < 1:
            raise ValueError("T must be >= 1")


@dataclass
class SpriteSpec:
    glyph: int
    position: np.ndarray        # top-left (x, y) at t=1, pixels
    velocity: np.ndarray        # pixels per frame
    interval: tuple[int, int]   # 1-based inclusive frames where the sprite is drawn


@dataclass
class ObjectTruth:
    glyph: int
    cx: float
    cy: float
    w: float
    h: float


@dataclass
class SequenceBatch:
    frames: np.ndarray                              # (T, B, H, W) float32
    truth: list = field(default_factory=list)       # truth[b][t] -> list[ObjectTruth]

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def B(self) -> int:
        return self.frames.shape[1]

    def counts(self) -> np.ndarray:
        c = np.zeros((self.T, self.B), dtype=np.int64)
        for b, seq in enumerate(self.truth):
            for t, objs in enumerate(seq):
                c[t, b] = len(objs)
        return c

    def digit_sums(self) -> np.ndarray:
        s = np.zeros((self.T, self.B), dtype=np.int64)
        for b, seq in enumerate(self.truth):
            for t, objs in enumerate(seq):
                s[t, b] = sum(o.glyph for o in objs)
        return s

    def subset(self, idx) -> "SequenceBatch":
        idx = list(idx)
        return SequenceBatch(self.frames[:, idx], [self.truth[i] for i in idx])


def _boxes_overlap(a: np.ndarray, b: np.ndarray, s: int) -> bool:
    return bool(np.all(np.abs(a - b) < s))


def _place(cfg: DataConfig, n: int, rng: Rng) -> list[np.ndarray]:
    """Top-left corners for n sprites inside the window, resampled jointly until boxes are disjoint."""
    s, W = cfg.sprite_size, cfg.img_size
    for _ in range(MAX_PLACEMENT_TRIES):
        pos = list(rng.uniform(size=(n, 2), low=0.0, high=W - s))
        if all(not _boxes_overlap(pos[i], pos[j], s) for i in range(n) for j in range(i)):
            return pos
    raise RuntimeError(f"could not place {n} non-overlapping sprites in {MAX_PLACEMENT_TRIES} tries")


def sample_sprites(cfg: DataConfig, rng: Rng, appearing: bool | None = None) -> list[SpriteSpec]:
    appearing = cfg.variant == "appearing" if appearing is None else appearing
    n = int(cfg.counts[int(rng.integers(0, len(cfg.counts)))])
    sprites = []
    for pos in _place(cfg, n, rng):
        glyph = int(rng.integers(0, 10))
        speed = rng.uniform(low=cfg.speed_min, high=cfg.speed_max)
        angle = rng.uniform(low=0.0, high=2 * np.pi)
        vel = speed * np.array([np.cos(angle), np.sin(angle)])
        if appearing:
            a, b = sorted(int(v) for v in rng.integers(1, cfg.T + 1, size=2))
            interval = (a, b)
        else:
            interval = (1, cfg.T)
        sprites.append(SpriteSpec(glyph, pos, vel, interval))
    return sprites


def trajectory(cfg: DataConfig, sprite: SpriteSpec) -> np.ndarray:
    """Top-left positions (T, 2) bouncing elastically off the arena walls."""
    s, W = cfg.sprite_size, cfg.img_size
    margin = 0.5 * (cfg.arena_factor - 1.0) * W
    lo, hi = -margin, W + margin - s
    p = sprite.position.astype(float).copy()
    v = sprite.velocity.astype(float).copy()
    out = np.empty((cfg.T, 2))
    for t in range(cfg.T):
        out[t] = p
        p = p + v
        for d in range(2):
            if p[d] < lo:
                p[d] = 2 * lo - p[d]
                v[d] = -v[d]
            elif p[d] > hi:
                p[d] = 2 * hi - p[d]
                v[d] = -v[d]
    return out


def paste(canvas: np.ndarray, sprite: np.ndarray, x: float, y: float) -> None:
    """Add ``sprite`` with top-left at the rounded (x, y), clipped to the canvas."""
    H, W = canvas.shape
    h, w = sprite.shape
    x0, y0 = int(np.floor(x + 0.5)), int(np.floor(y + 0.5))
    cx0, cy0 = max(x0, 0), max(y0, 0)
    cx1, cy1 = min(x0 + w, W), min(y0 + h, H)
    if cx1 <= cx0 or cy1 <= cy0:
        return
    canvas[cy0:cy1, cx0:cx1] += sprite[cy0 - y0:cy1 - y0, cx0 - x0:cx1 - x0]


def render(cfg: DataConfig, sprites: list[SpriteSpec], glyphs=None):
    """Frames (T, H, W) and per-frame truth for a fixed set of sprites."""
    H = W = cfg.img_size
    s = cfg.sprite_size
    frames = np.zeros((cfg.T, H, W), dtype=np.float32)
    truth: list[list[ObjectTruth]] = [[] for _ in range(cfg.T)]
    for sp in sprites:
        img = glyph_image(sp.glyph, cfg, glyphs)
        path = trajectory(cfg, sp)
        for t in range(cfg.T):
            if not sp.interval[0] <= t + 1 <= sp.interval[1]:
                continue
            x, y = path[t]
            paste(frames[t], img, x, y)
            truth[t].append(ObjectTruth(sp.glyph, float(np.float32(x + s / 2)), float(np.float32(y + s / 2)),
                                        float(s), float(s)))
    np.clip(frames, 0.0, 1.0, out=frames)
    return frames, truth


def glyph_image(digit: int, cfg: DataConfig, glyphs=None) -> np.ndarray:
    if glyphs is None:
        return render_glyph(digit, cfg.sprite_size, cfg.smooth)
    return glyphs(digit)


def generate_sequence(cfg: DataConfig, rng: Rng, glyphs=None):
    """Standard protocol: 0-2 sprites present for the whole sequence."""
    return render(cfg, sample_sprites(cfg, rng, appearing=False), glyphs)


def generate_appearing(cfg: DataConfig, rng: Rng, glyphs=None):
    """Each sprite is visible only during a random sub-interval of [1, T]."""
    return render(cfg, sample_sprites(cfg, rng, appearing=True), glyphs)


def generate_batch(cfg: DataConfig, B: int, rng: Rng, glyphs=None) -> SequenceBatch:
    gen = generate_appearing if cfg.variant == "appearing" else generate_sequence
    frames = np.zeros((cfg.T, B, cfg.img_size, cfg.img_size), dtype=np.float32)
    truth = []
    for b in range(B):
        f, tr = gen(cfg, rng.child("sequence", b), glyphs)
        frames[:, b] = f
        truth.append(tr)
    return SequenceBatch(frames, truth)


def expected_appearing_presence(T: int) -> np.ndarray:
    """P(frame t lies inside an interval spanned by two uniform draws from 1..T), t = 1..T."""
    t = np.arange(1, T + 1)
    return 1.0 - ((t - 1) / T) ** 2 - ((T - t) / T) ** 2


class IdxGlyphs:
    """Glyph source drawing a random labelled image of the requested digit."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, size: int, seed: int = 0):
        self.by_digit = {d: images[labels == d] for d in range(10)}
        self.size = size
        self._rng = np.random.default_rng(seed)

    def __call__(self, digit: int) -> np.ndarray:
        pool = self.by_digit[digit]
        if len(pool) == 0:
            raise ValueError(f"no images with label {digit}")
        img = pool[self._rng.integers(len(pool))]
        return resize_bilinear(img, self.size, self.size).astype(np.float32)


# ---- IDX ------------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def parse_idx_images(buf: bytes) -> np.ndarray:
    if len(buf) < 16:
        raise ValueError("truncated IDX header")
    magic, n, rows, cols = struct.unpack(">IIII", buf[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise ValueError(f"bad magic 0x{magic:08x} for IDX images")
    need = n * rows * cols
    if len(buf) - 16 < need:
        raise ValueError(f"truncated IDX payload: need {need} bytes, have {len(buf) - 16}")
    pix = np.frombuffer(buf, dtype=np.uint8, count=need, offset=16)
    return pix.reshape(n, rows, cols).astype(np.float64) / 255.0


def parse_idx_labels(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise ValueError("truncated IDX header")
    magic, n = struct.unpack(">II", buf[:8])
    if magic != IDX_LABELS_MAGIC:
        raise ValueError(f"bad magic 0x{magic:08x} for IDX labels")
    if len(buf) - 8 < n:
        raise ValueError(f"truncated IDX payload: need {n} bytes, have {len(buf) - 8}")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def load_idx_images(path, label_path=None):
    """Images in [0, 1] of shape (n, rows, cols), plus labels when ``label_path`` is given."""
    images = parse_idx_images(_read_bytes(path))
    if label_path is None:
        return images, None
    labels = parse_idx_labels(_read_bytes(label_path))
    if len(labels) != len(images):
        raise ValueError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    return images, labels


# ---- dataset container ------------------------------------------------------

DATASET_MAGIC = b"SQSD"
DATASET_VERSION = 1
_RECORD = struct.Struct("<Bffff")


def dataset_bytes(batch: SequenceBatch) -> bytes:
    T, B, H, W = batch.frames.shape
    parts = [DATASET_MAGIC, struct.pack("<H", DATASET_VERSION), struct.pack("<IIII", B, T, H, W)]
    pix = np.ascontiguousarray(batch.frames.transpose(1, 0, 2, 3), dtype="<f4")
    parts.append(pix.tobytes())
    for b in range(B):
        for t in range(T):
            objs = batch.truth[b][t]
            parts.append(struct.pack("<B", len(objs)))
            for o in objs:
                parts.append(_RECORD.pack(o.glyph, o.cx, o.cy, o.w, o.h))
    return b"".join(parts)


def write_dataset(path, batch: SequenceBatch) -> None:
    Path(path).write_bytes(dataset_bytes(batch))


def parse_dataset(buf: bytes) -> SequenceBatch:
    if buf[:4] != DATASET_MAGIC:
        raise ValueError("bad magic: not a dataset file")
    if len(buf) < 22:
        raise ValueError("truncated dataset header")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    B, T, H, W = struct.unpack_from("<IIII", buf, 6)
    off = 22
    n = B * T * H * W
    if len(buf) < off + 4 * n:
        raise ValueError("truncated pixel block")
    pix = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(B, T, H, W)
    frames = np.ascontiguousarray(pix.transpose(1, 0, 2, 3)).astype(np.float32)
    off += 4 * n
    truth = []
    try:
        for _ in range(B):
            seq = []
            for _ in range(T):
                (count,) = struct.unpack_from("<B", buf, off)
                off += 1
                objs = []
                for _ in range(count):
                    g, cx, cy, w, h = _RECORD.unpack_from(buf, off)
                    off += _RECORD.size
                    objs.append(ObjectTruth(g, cx, cy, w, h))
                seq.append(objs)
            truth.append(seq)
    except struct.error as exc:
        raise ValueError("truncated truth block") from exc
    if off != len(buf):
        raise ValueError("trailing bytes after truth block")
    return SequenceBatch(frames, truth)


def read_dataset(path) -> SequenceBatch:
    return parse_dataset(Path(path).read_bytes())
