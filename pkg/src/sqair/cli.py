"""Command-line entry points: datagen, train, eval, reconstruct, sample, predict."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Rng
from .checkpoint import Checkpoint
from .config import RunConfig
from .data import IdxGlyphs, SequenceBatch, generate_batch, load_idx_images, read_dataset, write_dataset
from .evaluation import conditional_generate, evaluate
from .generative import sample_sequence
from .inference import infer_sequence, make_sampler
from .learning import OptState, train_step
from .model import SQAIR
from .png import frame_grid, overlay_boxes, write_png

log = logging.getLogger("sqair")

CSV_HEADER = ["step", "seq_len", "iwae", "recon_ll", "kl", "count_acc", "lr"]
TRAIN_FILE = "train.sqsd"
TEST_FILE = "test.sqsd"


# ---------------------------------------------------------------- helpers

def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg = cfg.override(seed=args.seed, mode=args.mode, variant=args.variant, eval_k=args.k,
                       out_dir=args.out, train_count=args.count, seq_len=args.t, steps=args.steps)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / f"{args.command}.resolved.cfg")
    return cfg


def data_dir(cfg: RunConfig) -> Path:
    return Path(cfg.data_dir or cfg.out_dir)


def glyph_source(cfg: RunConfig):
    if not cfg.idx_images:
        return None
    images, labels = load_idx_images(cfg.idx_images, cfg.idx_labels or None)
    if labels is None:
        raise ValueError("idx_labels is required when idx_images is set")
    return IdxGlyphs(images, labels, cfg.sprite_size, cfg.seed)


def load_model(cfg: RunConfig, checkpoint: str | None) -> tuple[SQAIR, OptState, Checkpoint | None]:
    model = SQAIR(cfg.model_config(), cfg.seed)
    if not checkpoint:
        return model, OptState(lr=cfg.lr), None
    ck = Checkpoint.load(checkpoint)
    try:
        opt = ck.restore(model)
    except (ad.ShapeError, KeyError) as exc:
        raise SystemExit(f"checkpoint does not match config: {exc}")
    if ck.config_hash and ck.config_hash != model_hash(cfg):
        log.warning("checkpoint was written under a different model configuration")
    return model, opt, ck


def model_hash(cfg: RunConfig) -> str:
    import hashlib
    return hashlib.sha256(repr(sorted(cfg.model_config().as_dict().items())).encode()).hexdigest()


def append_csv(path: Path, rows: list[dict]) -> None:
    new = not path.exists()
    with path.open("a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in CSV_HEADER])


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6f}"


def _check_data(cfg: RunConfig, batch: SequenceBatch) -> None:
    if batch.frames.shape[2:] != (cfg.img_size, cfg.img_size):
        raise SystemExit(f"dataset frames {batch.frames.shape[2:]} do not match img_size {cfg.img_size}")


# ---------------------------------------------------------------- commands

def cmd_datagen(cfg: RunConfig, args) -> None:
    dcfg = cfg.data_config()
    glyphs = glyph_source(cfg)
    root = Rng(cfg.seed).child("data")
    out = Path(cfg.out_dir)
    for name, count in ((TRAIN_FILE, cfg.train_count), (TEST_FILE, cfg.test_count)):
        batch = generate_batch(dcfg, count, root.child(name), glyphs)
        write_dataset(out / name, batch)
        print(f"wrote {out / name}: B={batch.B} T={batch.T}")


def cmd_train(cfg: RunConfig, args) -> None:
    train = read_dataset(data_dir(cfg) / TRAIN_FILE)
    _check_data(cfg, train)
    model, opt, _ = load_model(cfg, args.checkpoint)
    tcfg = cfg.train_config()
    out = Path(cfg.out_dir)
    metrics_path = out / "metrics.csv"
    root = Rng(cfg.seed).child("train")
    counts = train.counts()
    frames = train.frames.astype(float)
    pending = []
    while opt.step < cfg.steps:
        step = opt.step
        idx = root.child("batch", step).integers(0, train.B, size=min(cfg.batch, train.B))
        m = train_step(model, frames[:, idx], opt, tcfg, root.child("step", step), counts[:, idx])
        if step % cfg.log_every == 0:
            pending.append(m)
            log.info("step %d T=%d iwae %.2f count_acc %.3f", step, m["seq_len"], m["iwae"], m["count_acc"])
        done = opt.step
        if done % cfg.ckpt_every == 0 or done == cfg.steps:
            append_csv(metrics_path, pending)
            pending = []
            ck = Checkpoint.capture(model, opt, model_hash(cfg))
            ck.save(out / f"ckpt_{done:07d}.sqck")
            ck.save(out / "latest.sqck")
    append_csv(metrics_path, pending)


def cmd_eval(cfg: RunConfig, args) -> None:
    test = read_dataset(data_dir(cfg) / TEST_FILE)
    _check_data(cfg, test)
    model, opt, _ = load_model(cfg, args.checkpoint)
    rep = evaluate(model, test.frames.astype(float), test.counts(), cfg.eval_k, Rng(cfg.seed).child("eval"))
    for k, v in rep.as_dict().items():
        if v is not None:
            print(f"{k}: {v:.6f}")
    append_csv(Path(cfg.out_dir) / "eval.csv", [dict(
        step=opt.step, seq_len=test.T, iwae=rep.iwae_bound, recon_ll=rep.recon_loglik, kl=rep.kl_estimate,
        count_acc=rep.counting_accuracy, lr=opt.lr)])


def _boxes(states, p: int) -> list:
    out = []
    for fb in states:
        boxes = [(fb.prop_ids[p, i], fb.prop_where[p, i]) for i in range(fb.prop_pres.shape[1]) if fb.prop_pres[p, i]]
        boxes += [(fb.disc_ids[p, i], fb.disc_where[p, i]) for i in range(fb.disc_pres.shape[1]) if fb.disc_pres[p, i]]
        out.append(boxes)
    return out


def cmd_reconstruct(cfg: RunConfig, args) -> None:
    test = read_dataset(data_dir(cfg) / TEST_FILE)
    _check_data(cfg, test)
    model, _, _ = load_model(cfg, args.checkpoint)
    n = min(cfg.vis_rows, test.B)
    x = test.frames[:, :n].astype(float)
    with ad.no_grad():
        tr = infer_sequence(model, x, make_sampler(model, test.T, Rng(cfg.seed).child("reconstruct"), P=n))
    rows = []
    for b in range(n):
        rows += [x[:, b], tr.canvases[:, b]]
    img = frame_grid(rows)
    H = W = cfg.img_size
    for b in range(n):
        overlay_boxes(img, 2 * b + 1, _boxes(tr.states, b), H, W)
    write_png(Path(cfg.out_dir) / "reconstruct.png", img)


def cmd_sample(cfg: RunConfig, args) -> None:
    model, _, _ = load_model(cfg, args.checkpoint)
    gen = sample_sequence(model, cfg.seq_len, Rng(cfg.seed).child("sample"), n=cfg.vis_rows)
    img = frame_grid([gen.means[:, b] for b in range(cfg.vis_rows)])
    for b in range(cfg.vis_rows):
        overlay_boxes(img, b, _boxes(gen.states, b), cfg.img_size, cfg.img_size)
    write_png(Path(cfg.out_dir) / "sample.png", img)


def cmd_predict(cfg: RunConfig, args) -> None:
    test = read_dataset(data_dir(cfg) / TEST_FILE)
    _check_data(cfg, test)
    model, _, _ = load_model(cfg, args.checkpoint)
    n = min(cfg.vis_rows, test.B)
    x = test.frames[:, :n].astype(float)
    pred = conditional_generate(model, x[:cfg.predict_k], test.T, Rng(cfg.seed).child("predict"))
    rows = []
    for b in range(n):
        rows += [x[:, b], pred.frames[:, b]]
    img = frame_grid(rows)
    states = pred.trace.states + pred.generated.states
    for b in range(n):
        overlay_boxes(img, 2 * b + 1, _boxes(states, b), cfg.img_size, cfg.img_size)
    write_png(Path(cfg.out_dir) / "predict.png", img)


COMMANDS = dict(datagen=cmd_datagen, train=cmd_train, eval=cmd_eval, reconstruct=cmd_reconstruct,
                sample=cmd_sample, predict=cmd_predict)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sqair", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="flat key = value config file")
        s.add_argument("--seed", type=int)
        s.add_argument("--mode", choices=["sqair", "air"])
        s.add_argument("--variant", choices=["standard", "appearing"])
        s.add_argument("--k", type=int, help="particles for evaluation")
        s.add_argument("--checkpoint")
        s.add_argument("--out", help="output directory")
        s.add_argument("--count", type=int, help="training sequences to generate")
        s.add_argument("--t", type=int, help="sequence length")
        s.add_argument("--steps", type=int, help="total training steps")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
    except (KeyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    COMMANDS[args.command](cfg, args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
