"""Flat ``key = value`` run configuration shared by every CLI subcommand."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .data import DataConfig
from .learning import TrainConfig
from .model import ModelConfig


@dataclass(frozen=True)
class RunConfig:
    # model
    img_size: int = 50
    glimpse_size: int = 20
    what_dim: int = 50
    max_objects: int = 3
    hidden: int = 64
    rnn_hidden: int = 64
    sigma_x: float = 0.3
    prior_std: float = 1.0
    decoder_bias: float = -2.0
    disc_scale_init: float = 0.4
    disc_where_std_init: float = 0.3
    prop_where_std_init: float = 0.1
    prop_pres_bias: float = 2.0
    # data
    seq_len: int = 10
    sprite_size: int = 20
    counts: str = "0,1,2"
    speed_min: float = 1.0
    speed_max: float = 3.0
    arena_factor: float = 1.5
    smooth: bool = True
    variant: str = "standard"
    train_count: int = 1000
    test_count: int = 200
    idx_images: str = ""
    idx_labels: str = ""
    # training
    mode: str = "sqair"
    K: int = 5
    batch: int = 32
    lr: float = 1e-5
    rms_decay: float = 0.9
    lr_milestones: str = ""
    curriculum_start: int = 3
    curriculum_every: int = 100000
    steps: int = 1000
    log_every: int = 10
    ckpt_every: int = 500
    # evaluation and visualisation
    eval_k: int = 100
    vis_rows: int = 4
    predict_k: int = 3
    # run
    seed: int = 0
    data_dir: str = ""
    out_dir: str = "run"

    def __post_init__(self):
        if self.mode not in ("sqair", "air"):
            raise ValueError(f"mode must be sqair or air, got {self.mode!r}")
        if self.variant not in ("standard", "appearing"):
            raise ValueError(f"variant must be standard or appearing, got {self.variant!r}")

    # ---- views
    def model_config(self) -> ModelConfig:
        return ModelConfig(
            img_h=self.img_size, img_w=self.img_size, glimpse_h=self.glimpse_size, glimpse_w=self.glimpse_size,
            what_dim=self.what_dim, max_objects=self.max_objects, hidden=self.hidden, rnn_hidden=self.rnn_hidden,
            sigma_x=self.sigma_x, prior_std=self.prior_std, decoder_bias=self.decoder_bias,
            disc_scale_init=self.disc_scale_init, disc_where_std_init=self.disc_where_std_init,
            prop_where_std_init=self.prop_where_std_init, prop_pres_bias=self.prop_pres_bias)

    def data_config(self) -> DataConfig:
        return DataConfig(
            img_size=self.img_size, T=self.seq_len, sprite_size=self.sprite_size,
            counts=tuple(int(c) for c in self.counts.split(",") if c.strip()),
            speed_min=self.speed_min, speed_max=self.speed_max, arena_factor=self.arena_factor,
            smooth=self.smooth, variant=self.variant)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            K=self.K, batch=self.batch, lr=self.lr, rms_decay=self.rms_decay,
            lr_milestones=parse_milestones(self.lr_milestones), curriculum_start=self.curriculum_start,
            curriculum_every=self.curriculum_every, seed=self.seed, mode=self.mode)

    # ---- text form
    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def override(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        _check_keys(kw)
        return replace(self, **{k: _coerce(k, v) for k, v in kw.items()})

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            _check_keys({key: value}, lineno)
            values[key] = _coerce(key, value)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text())


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _check_keys(kw: dict, lineno: int | None = None) -> None:
    unknown = sorted(set(kw) - set(_TYPES))
    if unknown:
        where = f"line {lineno}: " if lineno else ""
        raise KeyError(f"{where}unknown config key(s): {', '.join(unknown)}")


def _coerce(key: str, value):
    kind = _TYPES[key]
    if not isinstance(value, str):
        return {"int": int, "float": float, "bool": bool, "str": str}[kind](value)
    if kind == "bool":
        low = value.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{key}: not a boolean: {value!r}")
        return low in ("true", "1", "yes")
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    return value


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_milestones(text: str) -> tuple:
    """'400000:3.3e-6, 1000000:1e-6' -> ((400000, 3.3e-6), (1000000, 1e-6))."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        step, lr = part.split(":")
        out.append((int(step), float(lr)))
    return tuple(sorted(out))
