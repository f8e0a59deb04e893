"""Binary checkpoints: parameters, optimiser state, step and config hash, stored bit-exactly."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .learning import OptState
from .model import SQAIR

MAGIC = b"SQCK"
VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    nu: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    lr: float = 0.0
    config_hash: str = ""

    @classmethod
    def capture(cls, model: SQAIR, opt: OptState, config_hash: str = "") -> "Checkpoint":
        return cls(model.params.snapshot(), {k: v.copy() for k, v in opt.nu.items()}, opt.step, opt.lr, config_hash)

    def restore(self, model: SQAIR) -> OptState:
        """Load parameters into ``model`` (shape-checked) and return the optimiser state."""
        model.params.load(self.params)
        return OptState(nu={k: v.copy() for k, v in self.nu.items()}, step=self.step, lr=self.lr)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v for k, v in self.params.items()}
        out.update({f"nu/{k}": v for k, v in self.nu.items()})
        out["meta/step"] = np.array([float(self.step)])
        out["meta/lr"] = np.array([self.lr])
        out["meta/config_hash"] = np.frombuffer(bytes.fromhex(self.config_hash), dtype=np.uint8).astype(float)
        return out

    def to_bytes(self) -> bytes:
        arrays = self.arrays()
        parts = [MAGIC, struct.pack("<HI", VERSION, len(arrays))]
        for name in sorted(arrays):
            a = np.asarray(arrays[name], dtype="<f8")
            nb = name.encode()
            parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim))
            parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
            parts.append(np.ascontiguousarray(a).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:4] != MAGIC:
            raise ValueError("bad magic: not a checkpoint")
        version, count = struct.unpack_from("<HI", buf, 4)
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        off = 10
        arrays = {}
        try:
            for _ in range(count):
                (n,) = struct.unpack_from("<H", buf, off)
                off += 2
                name = buf[off:off + n].decode()
                off += n
                (rank,) = struct.unpack_from("<B", buf, off)
                off += 1
                shape = struct.unpack_from(f"<{rank}I", buf, off)
                off += 4 * rank
                size = int(np.prod(shape)) if rank else 1
                if off + 8 * size > len(buf):
                    raise ValueError(f"truncated payload for {name}")
                arrays[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
                off += 8 * size
        except struct.error as exc:
            raise ValueError("truncated checkpoint") from exc
        if off != len(buf):
            raise ValueError("trailing bytes in checkpoint")
        params = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
        nu = {k[3:]: v for k, v in arrays.items() if k.startswith("nu/")}
        step = int(arrays["meta/step"][0])
        lr = float(arrays["meta/lr"][0])
        config_hash = bytes(arrays["meta/config_hash"].astype(np.uint8)).hex()
        return cls(params, nu, step, lr, config_hash)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
