"""``runet`` command line: train, eval, predict, gradcheck, synth.

Settings come from built-in defaults, then an optional ``--config`` file of
``key = value`` lines (``#`` starts a comment), then command-line flags.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (divergence or a failed gradient check).
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint, model_from_checkpoint
from .errors import (CheckpointFormatError, DivergenceError, InvalidConfigError, InvalidDataError,
                     InvalidShapeError)
from .models import MODEL_NAMES, ModelSpec

log = logging.getLogger("runet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


@dataclass
class RunConfig:
    """Every tunable setting, with its default."""
    model: str = "runet-sru"
    level: int = 0
    steps: int = 3
    s0_init: float = 1.0
    h0_init: float = 1.0
    base_channels: int = 8
    depth: int = 4
    lr: float = 1e-3
    momentum: float = 0.9
    clip_threshold: float = 10.0
    alpha: float = 0.4
    epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    augment: bool = True
    data: str = ""
    out: str = ""
    image_size: int = 0  # 0 keeps the stored resolution

    def model_spec(self) -> ModelSpec:
        return ModelSpec(self.model, self.level, self.steps, self.s0_init, self.h0_init,
                         self.base_channels, self.depth)

    def train_config(self):
        from .training import TrainConfig
        return TrainConfig(self.lr, self.momentum, self.clip_threshold, self.alpha, self.epochs,
                           self.batch_size, self.seed, self.augment)


_FIELDS = {f.name: f for f in fields(RunConfig)}
# flag name -> config key, for the flags whose names differ from their key
_FLAG_KEYS = {"batch": "batch_size"}


def _coerce(key: str, text: str):
    kind = type(getattr(RunConfig(), key))
    if kind is bool:
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise InvalidConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        return kind(text.strip())
    except ValueError:
        raise InvalidConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; unknown keys and malformed lines are errors."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise InvalidConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key not in _FIELDS:
            raise InvalidConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve_config(config_file: Optional[str], overrides: dict) -> RunConfig:
    values = {}
    if config_file:
        path = Path(config_file)
        if not path.is_file():
            raise InvalidConfigError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text(), str(path)))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


def _defaults_epilog() -> str:
    d = RunConfig()
    lines = ["config keys (file 'key = value' or flag) and defaults:"]
    lines += [f"  {k} = {getattr(d, k)!r}" for k in _FIELDS]
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(prog="runet", description="Recurrent U-Net segmentation toolkit.",
                                epilog=_defaults_epilog(), formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def model_flags(sp):
        sp.add_argument("--model", choices=MODEL_NAMES)
        sp.add_argument("--level", type=int)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--seed", type=int)

    tr = sub.add_parser("train", help="train a model", epilog=_defaults_epilog(), formatter_class=fmt)
    tr.add_argument("--config")
    tr.add_argument("--data", help="dataset root with train/ and val/ splits")
    tr.add_argument("--out", help="run directory for checkpoints and the CSV log")
    model_flags(tr)
    tr.add_argument("--alpha", type=float)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch", type=int)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("checkpoint")
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", default="test", choices=("train", "val", "test"))
    ev.add_argument("--out", help="directory for per-step CSV reports")
    ev.add_argument("--pr", action="store_true", help="also report the P/R break-even point")
    ev.add_argument("--batch", type=int, default=8)

    pr = sub.add_parser("predict", help="segment one image")
    pr.add_argument("checkpoint")
    pr.add_argument("image")
    pr.add_argument("--out", required=True, help="output prefix: writes <out>_mask.png and <out>_overlay.png")

    gc = sub.add_parser("gradcheck", help="compare gradients with finite differences")
    model_flags(gc)
    gc.add_argument("--per-family", type=int, default=200)

    sy = sub.add_parser("synth", help="generate the synthetic shapes dataset")
    sy.add_argument("--out", required=True)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--n", type=int, default=200)
    sy.add_argument("--size", type=int, default=64)
    sy.add_argument("--force", action="store_true", help="write into a non-empty directory")
    return p


def _overrides(args: argparse.Namespace) -> dict:
    out = {}
    for name, value in vars(args).items():
        key = _FLAG_KEYS.get(name, name)
        if key in _FIELDS and value is not None:
            out[key] = value
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .data import load_dataset
    from .training import train

    cfg = resolve_config(args.config, _overrides(args))
    if not cfg.data:
        raise InvalidConfigError("train needs --data")
    if not cfg.out:
        raise InvalidConfigError("train needs --out")
    spec, tcfg = cfg.model_spec(), cfg.train_config()
    size = cfg.image_size or None
    # load everything before creating the run directory: a bad dataset leaves no outputs
    train_set = load_dataset(cfg.data, "train", size)
    val_path = Path(cfg.data) / "val"
    val_set = load_dataset(cfg.data, "val", size) if val_path.is_dir() else None
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text("".join(f"{k} = {v}\n" for k, v in asdict(cfg).items()))
    res = train(spec, tcfg, train_set, val_set, out)
    print(f"trained {spec.label()} for {len(res.history) // (2 if val_set else 1)} epochs: "
          f"final loss {res.final_loss:.6f}" + (f", best val mIoU {res.best_miou:.4f} "
                                              f"(epoch {res.best_epoch})" if val_set else ""))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .metrics import pr_break_even, write_report_csv
    from .training import evaluate, predict_probabilities

    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    samples = load_dataset(args.data, args.split)
    reports = evaluate(model, samples, args.batch)
    if args.pr:
        probs = predict_probabilities(model, samples, args.batch)
        for rep, pm in zip(reports, probs):
            rep.pr_threshold, rep.pr_break_even = pr_break_even(pm, [s.mask[0] for s in samples])
    cols = ["step", "mIoU", "mRec", "mPrec", "F1"] + (["P/R"] if args.pr else [])
    print("\t".join(cols))
    for t, rep in enumerate(reports, 1):
        print("\t".join([str(t)] + [f"{v:.4f}" for v in rep.summary().values()]))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for t, rep in enumerate(reports, 1):
            write_report_csv(out / f"metrics_step{t}.csv", rep)
    return EXIT_OK


def pad_to_multiple(image: np.ndarray, multiple: int = 16) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad (C,H,W) on the bottom/right so H and W divide ``multiple``."""
    _, h, w = image.shape
    ph, pw = -h % multiple, -w % multiple
    mode = "reflect" if ph < h and pw < w else "symmetric"
    return np.pad(image, ((0, 0), (0, ph), (0, pw)), mode=mode), (h, w)


def predict_image(model, image: np.ndarray) -> np.ndarray:
    """Final-step foreground probability (H,W) for one (C,H,W) image of any size."""
    from . import functional as F
    from .tensor import Tensor, no_grad

    padded, (h, w) = pad_to_multiple(image)
    dtype = model.parameters()[0].dtype
    model.eval()
    with no_grad():
        logits = model(Tensor(padded[None].astype(dtype)))[-1]
    return F.softmax_foreground(logits).data[0, 0, :h, :w]


def cmd_predict(args) -> int:
    from .data import export_overlay, read_image, write_mask_png
    from .metrics import binarize

    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    path = Path(args.image)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    image = read_image(path)
    prob = predict_image(model, image)
    prefix = str(args.out)
    export_overlay(image, prob, prefix + "_overlay.png")
    write_mask_png(prefix + "_mask.png", binarize(prob))
    print(f"wrote {prefix}_mask.png and {prefix}_overlay.png ({int(binarize(prob).sum())} foreground pixels)")
    return EXIT_OK


def run_gradcheck(spec: ModelSpec, seed: int = 0, per_family: int = 200, batch: int = 2, size: int = 16):
    """Finite-difference check of ``spec`` in float64 on a random batch."""
    from .gradcheck import check_model_gradients
    from .models import build_model
    from .tensor import Tensor, wide_precision
    from .training import he_init, multi_step_loss

    with wide_precision():
        model = he_init(build_model(spec), seed)
        rng = np.random.default_rng(seed)
        x = Tensor(rng.random((batch, spec.image_channels, size, size)))
        y = (rng.random((batch, 1, size, size)) < 0.5).astype(np.float64)
        return check_model_gradients(model, lambda m: multi_step_loss(m(x), y, 0.4)[0], rng, per_family)


def cmd_gradcheck(args) -> int:
    cfg = RunConfig(**_overrides(args))
    spec = cfg.model_spec()
    rep = run_gradcheck(spec, cfg.seed, args.per_family)
    for fam in sorted(rep.errors):
        print(f"{fam:24s} err {rep.errors[fam]:.3e}  sampled {rep.sampled[fam]:4d}  "
              f"skipped (kink) {rep.skipped_kinks[fam]}")
    verdict = "PASS" if rep.passed else "FAIL"
    print(f"{verdict} {spec.label()}: max relative error {rep.max_error:.3e} (tolerance {rep.tolerance:g})")
    if not rep.passed:
        print(f"worst parameter: {rep.worst_param[rep.worst_family]}")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_synth(args) -> int:
    from .data import generate_synthetic, split_counts

    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise InvalidConfigError(f"{out} is not empty; pass --force to write into it")
    generate_synthetic(args.seed, args.n, args.size, out)
    n_train, n_val, n_test = split_counts(args.n)
    print(f"wrote {args.n} samples to {out}: train {n_train}, val {n_val}, test {n_test}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "gradcheck": cmd_gradcheck, "synth": cmd_synth}


def _thread_limit():
    n = os.environ.get("RUNET_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse: --help exits 0, usage errors 2
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except InvalidConfigError as exc:
        print(f"runet: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidDataError, InvalidShapeError, CheckpointFormatError, OSError) as exc:
        print(f"runet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, FloatingPointError) as exc:
        print(f"runet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
