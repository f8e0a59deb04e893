import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sqair.autodiff import Rng
from sqair.data import (DataConfig, IdxGlyphs, SequenceBatch, SpriteSpec, _boxes_overlap, dataset_bytes,
                        expected_appearing_presence, font_bitmap, generate_batch, generate_sequence,
                        load_idx_images, parse_dataset, parse_idx_images, parse_idx_labels, read_dataset, render,
                        render_glyph, sample_sprites, trajectory, write_dataset)

SMALL = DataConfig(img_size=24, T=5, sprite_size=10)


def idx_images(n, rows=28, cols=28, magic=0x00000803, payload=None):
    body = payload if payload is not None else bytes(range(256)) * (n * rows * cols // 256 + 1)
    return struct.pack(">IIII", magic, n, rows, cols) + body[: n * rows * cols]


def idx_labels(labels, magic=0x00000801):
    return struct.pack(">II", magic, len(labels)) + bytes(labels)


# ---------------------------------------------------------------- glyphs

def test_glyphs_render_in_range():
    for d in range(10):
        g = render_glyph(d)
        assert g.shape == (20, 20) and g.dtype == np.float32
        assert 0.0 <= g.min() and g.max() <= 1.0 and g.max() > 0.5
    assert not np.array_equal(render_glyph(1), render_glyph(7))
    with pytest.raises(ValueError):
        font_bitmap(10)


def test_unsmoothed_glyph_is_binary():
    assert set(np.unique(render_glyph(8, 14, smooth=False))) <= {0.0, 1.0}


# ---------------------------------------------------------------- sequences

def test_zero_count_sequence_is_black():
    cfg = DataConfig(img_size=24, T=4, sprite_size=10, counts=(0,))
    frames, truth = generate_sequence(cfg, Rng(0))
    assert frames.max() == 0 and all(len(t) == 0 for t in truth)


def test_two_sprites_start_disjoint():
    cfg = DataConfig(counts=(2,))
    for b in range(200):
        sprites = sample_sprites(cfg, Rng(1).child(b))
        assert len(sprites) == 2
        assert not _boxes_overlap(sprites[0].position, sprites[1].position, cfg.sprite_size)


def test_batches_are_seed_deterministic():
    a = generate_batch(SMALL, 6, Rng(3))
    b = generate_batch(SMALL, 6, Rng(3))
    assert dataset_bytes(a) == dataset_bytes(b)
    assert dataset_bytes(a) != dataset_bytes(generate_batch(SMALL, 6, Rng(4)))


def test_pixels_in_unit_range_and_truth_counts():
    batch = generate_batch(DataConfig(T=4), 50, Rng(5))
    assert batch.frames.min() >= 0 and batch.frames.max() <= 1
    c = batch.counts()
    assert set(np.unique(c)) <= {0, 1, 2}
    assert (c == c[0]).all()


def test_sprites_always_overlap_the_window():
    cfg = DataConfig(T=10, speed_min=3, speed_max=3)
    s, W = cfg.sprite_size, cfg.img_size
    for b in range(300):
        for sp in sample_sprites(cfg, Rng(6).child(b)):
            path = trajectory(cfg, sp)
            for t in (0, cfg.T - 1):
                x, y = path[t]
                assert x + s > 0 and x < W and y + s > 0 and y < W


def test_trajectory_bounces_and_keeps_speed():
    cfg = DataConfig(T=60)
    sp = SpriteSpec(3, np.array([10.0, 10.0]), np.array([3.0, -2.0]), (1, 60))
    path = trajectory(cfg, sp)
    steps = np.abs(np.diff(path, axis=0))
    margin = 0.25 * cfg.img_size
    assert path.min() >= -margin - 1e-9 and path.max() <= cfg.img_size + margin - cfg.sprite_size + 1e-9
    assert (steps[:, 0] <= 3 + 1e-9).all() and (steps[:, 1] <= 2 + 1e-9).all()
    assert (np.diff(np.sign(np.diff(path[:, 0]))) != 0).any()


def test_disjoint_sprites_render_independently():
    cfg = DataConfig(img_size=40, T=3, sprite_size=10, speed_min=0, speed_max=0)
    a = SpriteSpec(2, np.array([2.0, 3.0]), np.zeros(2), (1, 3))
    b = SpriteSpec(5, np.array([25.0, 20.0]), np.zeros(2), (1, 3))
    both, _ = render(cfg, [a, b])
    fa, _ = render(cfg, [a])
    fb, _ = render(cfg, [b])
    assert np.abs(both - (fa + fb)).max() == 0


def test_appearing_interval_controls_visibility():
    cfg = DataConfig(img_size=30, T=9, sprite_size=10, speed_min=1, speed_max=1)
    sp = SpriteSpec(4, np.array([10.0, 10.0]), np.array([1.0, 0.0]), (3, 7))
    frames, truth = render(cfg, [sp])
    for t in range(9):
        visible = 3 <= t + 1 <= 7
        assert (frames[t].max() > 0) == visible
        assert len(truth[t]) == int(visible)


def test_appearing_counts_equal_active_intervals():
    cfg = DataConfig(img_size=30, T=8, sprite_size=10, variant="appearing")
    for b in range(50):
        sprites = sample_sprites(cfg, Rng(7).child("sequence", b))
        _, truth = render(cfg, sprites)
        for t in range(cfg.T):
            active = sum(sp.interval[0] <= t + 1 <= sp.interval[1] for sp in sprites)
            assert len(truth[t]) == active


def test_expected_presence_is_exact_for_interval_sampling():
    T = 5
    exact = np.zeros(T)
    for a in range(1, T + 1):
        for b in range(1, T + 1):
            lo, hi = min(a, b), max(a, b)
            exact[lo - 1:hi] += 1 / T ** 2
    np.testing.assert_allclose(expected_appearing_presence(T), exact, atol=1e-12)


def test_invalid_configs():
    with pytest.raises(ValueError):
        DataConfig(variant="jitter")
    with pytest.raises(ValueError):
        DataConfig(img_size=10, sprite_size=20)
    cfg = DataConfig(img_size=20, sprite_size=12, counts=(2,))
    with pytest.raises(RuntimeError):
        generate_sequence(cfg, Rng(0))


# ---------------------------------------------------------------- IDX

def test_idx_header_arithmetic_and_scaling():
    buf = idx_images(2, payload=bytes([255]) + bytes(1567))
    imgs = parse_idx_images(buf)
    assert imgs.shape == (2, 28, 28)
    assert imgs[0, 0, 0] == 1.0 and imgs[1].max() == 0.0


def test_idx_errors():
    with pytest.raises(ValueError, match="bad magic"):
        parse_idx_images(idx_images(1, magic=0x00000802))
    with pytest.raises(ValueError, match="truncated"):
        parse_idx_images(idx_images(2)[:-1])
    with pytest.raises(ValueError, match="bad magic"):
        parse_idx_labels(idx_labels([1, 2], magic=0x00000803))


def test_idx_files_and_count_mismatch(tmp_path):
    (tmp_path / "img.gz").write_bytes(gzip.compress(idx_images(3, 4, 4)))
    (tmp_path / "lab").write_bytes(idx_labels([1, 2, 3]))
    (tmp_path / "bad").write_bytes(idx_labels([1, 2]))
    imgs, labels = load_idx_images(tmp_path / "img.gz", tmp_path / "lab")
    assert imgs.shape == (3, 4, 4) and list(labels) == [1, 2, 3]
    with pytest.raises(ValueError, match="count mismatch"):
        load_idx_images(tmp_path / "img.gz", tmp_path / "bad")


def test_idx_glyph_source_feeds_generator():
    imgs = np.zeros((10, 28, 28))
    for d in range(10):
        imgs[d, 5:20, 10:18] = (d + 1) / 10
    glyphs = IdxGlyphs(imgs, np.arange(10), size=10)
    batch = generate_batch(DataConfig(img_size=24, T=2, sprite_size=10, counts=(1,)), 4, Rng(8), glyphs)
    assert batch.frames.max() > 0
    g = glyphs(3)
    assert g.shape == (10, 10) and g.max() == pytest.approx(0.4, abs=1e-6)


# ---------------------------------------------------------------- dataset container

def test_dataset_round_trip(tmp_path):
    batch = generate_batch(SMALL, 7, Rng(9))
    write_dataset(tmp_path / "d.sqsd", batch)
    back = read_dataset(tmp_path / "d.sqsd")
    np.testing.assert_array_equal(back.frames, batch.frames)
    assert back.truth == batch.truth
    assert dataset_bytes(back) == dataset_bytes(batch)


def test_empty_dataset_round_trip():
    empty = SequenceBatch(np.zeros((3, 0, 8, 8), np.float32), [])
    back = parse_dataset(dataset_bytes(empty))
    assert back.B == 0 and back.T == 3 and back.frames.shape == (3, 0, 8, 8)


def test_dataset_corruption_detected():
    buf = dataset_bytes(generate_batch(SMALL, 2, Rng(10)))
    with pytest.raises(ValueError, match="magic"):
        parse_dataset(b"XQSD" + buf[4:])
    with pytest.raises(ValueError, match="version"):
        parse_dataset(buf[:4] + struct.pack("<H", 2) + buf[6:])
    with pytest.raises(ValueError, match="truncated"):
        parse_dataset(buf[:-3])
    with pytest.raises(ValueError, match="trailing"):
        parse_dataset(buf + b"\0")


@settings(max_examples=15, deadline=None)
@given(B=st.integers(0, 3), T=st.integers(1, 3), seed=st.integers(0, 10_000), appearing=st.booleans())
def test_dataset_round_trip_property(B, T, seed, appearing):
    cfg = DataConfig(img_size=16, T=T, sprite_size=6, variant="appearing" if appearing else "standard")
    batch = generate_batch(cfg, B, Rng(seed))
    buf = dataset_bytes(batch)
    assert dataset_bytes(parse_dataset(buf)) == buf
