"""Command line entry point: ``omniseg {gen,train,eval,ablate,plot}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Set ``OMNI_SEG_LOG`` to ``quiet``, ``info`` (default) or ``debug``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import os
import sys
from pathlib import Path

from omniseg import ablation, plotting
from omniseg.aplr import STRATEGIES
from omniseg.eval_metrics import evaluate
from omniseg.synthgen import VOCAB, SplitConfig, build_dataset, load_dataset
from omniseg.tinyseg import CheckpointError, CorruptCheckpointError, load_params, save_params
from omniseg.trainer import (
    MODES,
    ConfigError,
    StateError,
    init_state,
    load_state,
    read_metrics_csv,
    save_state,
    train_loop,
    write_metrics_csv,
)

log = logging.getLogger("omniseg")

LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


def _setup_logging() -> None:
    name = os.environ.get("OMNI_SEG_LOG", "info").lower()
    if name not in LOG_LEVELS:
        raise UsageError(f"OMNI_SEG_LOG must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def _csv_list(kind):
    def parse(text: str):
        try:
            return tuple(kind(t) for t in text.split(",") if t)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc

    return parse


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = ablation.desk_config()
    p.add_argument("--steps", type=int, default=d.max_steps)
    p.add_argument("--lambda", dest="lam", type=float, default=d.lam)
    p.add_argument("--alpha", type=float, default=d.alpha)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--omni-batch-size", type=int, default=None)
    p.add_argument("--burn-in", type=int, default=d.burn_in_steps)
    p.add_argument("--eval-every", type=int, default=d.eval_every)
    p.add_argument("--tau-start", type=float, default=d.tau_start)
    p.add_argument("--tau-end", type=float, default=d.tau_end)
    p.add_argument("--wall-time", action="store_true", help="record per-step wall time (breaks byte-identical logs)")


def _config_from(args, **extra):
    return ablation.desk_config(
        max_steps=args.steps,
        lam=args.lam,
        alpha=args.alpha,
        lr=args.lr,
        batch_size=args.batch_size,
        omni_batch_size=args.omni_batch_size,
        burn_in_steps=args.burn_in,
        eval_every=args.eval_every,
        tau_start=args.tau_start,
        tau_end=args.tau_end,
        record_wall_time=args.wall_time,
        **extra,
    )


def cmd_gen(args) -> int:
    cfg = SplitConfig(args.n_train, args.n_val, args.n_test, args.fraction, args.seed)
    build_dataset(cfg, args.out)
    digest = hashlib.sha256((Path(args.out) / "manifest.json").read_bytes()).hexdigest()
    print(f"manifest sha256 {digest}")
    return 0


def cmd_train(args) -> int:
    data = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        state, cfg = load_state(args.resume, len(VOCAB))
        log.info("resuming at step %d", state.step)
    else:
        cfg = _config_from(args, supervision_mode=args.mode, refine_strategy=args.refine_strategy, seed=args.seed)
        state = init_state(cfg, len(VOCAB))
    train_loop(data, cfg, state, stop_at=args.halt_at)
    save_state(state, cfg, out / "state.json")
    save_params(state.student, out / "checkpoint.json")
    write_metrics_csv(state.log, out / "metrics.csv")
    if state.step < cfg.max_steps:
        print(f"halted at step {state.step}; resume with --resume {out / 'state.json'}")
    else:
        print(f"trained {cfg.supervision_mode} for {state.step} steps; checkpoint {out / 'checkpoint.json'}")
    return 0


def cmd_eval(args) -> int:
    params = load_params(args.checkpoint, len(VOCAB))
    records = load_dataset(args.data)[args.split]
    report = evaluate(params, records, args.threshold)
    row = report.csv_row(args.split)
    writer = csv.DictWriter(sys.stdout, fieldnames=list(row), lineterminator="\n")
    writer.writeheader()
    writer.writerow(row)
    if args.append:
        path = Path(args.append)
        fresh = not path.exists() or path.stat().st_size == 0
        with path.open("a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
            if fresh:
                w.writeheader()
            w.writerow(row)
    return 0


def cmd_ablate(args) -> int:
    base = _config_from(args)
    spec = ablation.AblationSpec(
        modes=args.modes,
        fractions=args.fractions,
        seeds=args.seeds,
        strategies=args.strategies,
        base=base,
        n_train=args.n_train,
        n_val=args.n_val,
        n_test=args.n_test,
        data_seed=args.data_seed,
    )
    # validate every cell's config before spending time on training
    for cell in spec.cells():
        cell.train_config(base)
    results = ablation.run_ablation(spec, parallel=args.parallel)
    ablation.write_table(results, args.out)
    for line in ablation.summary_lines(results, args.min_gap):
        print(line)
    failed = [r for r in results if not r.ok]
    return 1 if failed else 0


def cmd_plot(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not args.ablation and not args.metrics:
        raise UsageError("plot needs --ablation and/or --metrics")
    if args.ablation:
        svg = plotting.ablation_chart(ablation.read_table(args.ablation))
        (out / "ablation.svg").write_text(svg)
        print(out / "ablation.svg")
    if args.metrics:
        logs = {}
        for path in args.metrics:
            rows = read_metrics_csv(path)
            if not rows:
                raise ValueError(f"{path}: metrics log has no rows")
            logs[Path(path).parent.name or Path(path).stem] = rows
        (out / "training.svg").write_text(plotting.training_chart(logs))
        print(out / "training.svg")
        val = plotting.validation_chart(logs)
        if val:
            (out / "validation.svg").write_text(val)
            print(out / "validation.svg")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="omniseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--n-train", type=int, default=2000)
    g.add_argument("--n-val", type=int, default=200)
    g.add_argument("--n-test", type=int, default=500)
    g.add_argument("--fraction", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a student model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--mode", choices=MODES, default="fully")
    t.add_argument("--refine-strategy", choices=STRATEGIES, default="aplr")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--resume", help="state.json from an earlier run; its config wins over flags")
    t.add_argument("--halt-at", type=int, default=None, help="stop after this many steps")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("val", "test"), default="test")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--append", help="append the row to this CSV")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the mode x fraction x seed matrix")
    a.add_argument("--modes", type=_csv_list(str), default=ablation.ORDER)
    a.add_argument("--strategies", type=_csv_list(str), default=("aplr",))
    a.add_argument("--fractions", type=_csv_list(float), default=(0.05,))
    a.add_argument("--seeds", type=_csv_list(int), default=(0, 1, 2))
    a.add_argument("--n-train", type=int, default=2000)
    a.add_argument("--n-val", type=int, default=200)
    a.add_argument("--n-test", type=int, default=500)
    a.add_argument("--data-seed", type=int, default=0)
    a.add_argument("--parallel", type=int, default=1)
    a.add_argument("--min-gap", type=float, default=1.0, help="ordering gap in mIoU points")
    a.add_argument("--out", required=True)
    _add_train_flags(a)
    a.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render SVG charts")
    p.add_argument("--ablation", help="ablation CSV")
    p.add_argument("--metrics", nargs="*", default=[], help="metrics.csv files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _setup_logging()
        return args.func(args)
    except (UsageError, ConfigError, StateError, CorruptCheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, FileNotFoundError) as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
