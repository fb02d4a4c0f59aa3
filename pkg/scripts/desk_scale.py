"""Train runet-sru(0) and rec-simple on the synthetic shapes set and report per-step val mIoU.

    python scripts/desk_scale.py --out runs/desk --epochs 100

Writes one run directory per model (checkpoints + CSV log) and prints the
per-step validation mIoU of the best checkpoint.
"""
import argparse
import logging
import time
from pathlib import Path

from runet.checkpoint import load_checkpoint, model_from_checkpoint
from runet.data import generate_synthetic, split_counts
from runet.models import ModelSpec
from runet.training import TrainConfig, evaluate, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--batch", type=int, default=1)
    ap.add_argument("--no-augment", action="store_true")
    ap.add_argument("--models", nargs="+", default=["runet-sru", "rec-simple"])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    pairs = [s.sample for s in generate_synthetic(args.seed, args.n, args.size)]
    n_train, n_val, _ = split_counts(args.n)
    train_set, val_set = pairs[:n_train], pairs[n_train:n_train + n_val]
    cfg = TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch, seed=args.seed,
                      augment=not args.no_augment)
    for name in args.models:
        spec = ModelSpec(name, level=0, steps=3)
        out = Path(args.out) / name
        t0 = time.perf_counter()
        res = train(spec, cfg, train_set, val_set, out)
        best = model_from_checkpoint(load_checkpoint(out / "best.ckpt"))
        steps = [r.miou for r in evaluate(best, val_set)]
        train_miou = evaluate(best, train_set)[-1].miou
        print(f"{spec.label()}: best epoch {res.best_epoch}, train mIoU {train_miou:.4f}, "
              f"val mIoU per step {[round(m, 4) for m in steps]}, {time.perf_counter() - t0:.0f}s",
              flush=True)


if __name__ == "__main__":
    main()
