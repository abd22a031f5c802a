"""Sweep desk training settings on a single seed and report validation mIoU.

Example:
    python scripts/sweep_desk.py --lr 1e-3,2e-3 --burn-in 300,1000 --modes fully,omni_none
"""

import argparse
import itertools
import time

from omniseg import ablation
from omniseg.eval_metrics import evaluate
from omniseg.synthgen import SplitConfig, build_records, split_records
from omniseg.trainer import train_loop


def floats(text):
    return [float(t) for t in text.split(",")]


def ints(text):
    return [int(t) for t in text.split(",")]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--fraction", type=float, default=0.05)
    ap.add_argument("--modes", default="fully,omni_none,omni_point,omni_box")
    ap.add_argument("--strategy", default="aplr")
    ap.add_argument("--lr", type=floats, default=[3e-3])
    ap.add_argument("--alpha", type=floats, default=[0.99])
    ap.add_argument("--burn-in", type=ints, default=[1000])
    ap.add_argument("--batch-size", type=ints, default=[8])
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--test", action="store_true", help="also report test mIoU")
    args = ap.parse_args()

    data = split_records(build_records(SplitConfig(2000, 200, 500, args.fraction, 0)))
    grid = itertools.product(args.lr, args.alpha, args.burn_in, args.batch_size, args.modes.split(","))
    for lr, alpha, burn, bs, mode in grid:
        strategy = "aplr" if mode == "fully" else args.strategy
        cfg = ablation.desk_config(
            lr=lr, alpha=alpha, burn_in_steps=burn, batch_size=bs, max_steps=args.steps,
            supervision_mode=mode, refine_strategy=strategy, seed=args.seed, eval_every=args.steps,
        )
        t0 = time.perf_counter()
        params, log = train_loop(data, cfg)
        skip = sum(r.skip_rate for r in log[cfg.burn_in:]) / max(len(log) - cfg.burn_in, 1)
        line = f"lr={lr:g} alpha={alpha:g} burn={burn} bs={bs} {mode:10s} {strategy:14s} val={log[-1].val_miou:.4f} skip={skip:.3f}"
        if args.test:
            line += f" test={evaluate(params, data['test']).miou:.4f}"
        print(f"{line} ({time.perf_counter() - t0:.0f}s)", flush=True)


if __name__ == "__main__":
    main()
