import numpy as np
import pytest

from sqair.autodiff import Rng
from sqair.model import SQAIR, ModelConfig

TINY = ModelConfig(img_h=16, img_w=16, glimpse_h=8, glimpse_w=8, what_dim=4, max_objects=2,
                   hidden=16, rnn_hidden=16)

# acceptance results collected by tests/test_acceptance.py and echoed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_model():
    return SQAIR(TINY, seed=0)


def blob_frames(T: int, P: int, H: int = 16, W: int = 16, seed: int = 0) -> np.ndarray:
    """Frames with one or two bright squares each, so objects get discovered and propagated."""
    rng = np.random.default_rng(seed)
    x = np.zeros((T, P, H, W))
    for p in range(P):
        for _ in range(rng.integers(1, 3)):
            r, c = rng.integers(0, H - 5, size=2)
            dr, dc = rng.integers(-1, 2, size=2)
            for t in range(T):
                rr = int(np.clip(r + t * dr, 0, H - 5))
                cc = int(np.clip(c + t * dc, 0, W - 5))
                x[t, p, rr:rr + 5, cc:cc + 5] += 0.8
    return np.clip(x, 0, 1)


@pytest.fixture
def rng():
    return Rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
