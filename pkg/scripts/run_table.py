"""Run the mode x fraction ablation plus the box-strategy comparison and plot both.

Example:
    python scripts/run_table.py --out results/ --fractions 0.01,0.05,0.10 --parallel 1
"""

import argparse
import logging
from pathlib import Path

from omniseg import ablation, plotting


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results")
    ap.add_argument("--fractions", default="0.01,0.05,0.10")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--parallel", type=int, default=1)
    ap.add_argument("--skip-strategies", action="store_true", help="omit the 1%% box-strategy comparison")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = tuple(int(s) for s in args.seeds.split(","))

    modes = ablation.AblationSpec(fractions=tuple(float(f) for f in args.fractions.split(",")), seeds=seeds)
    results = ablation.run_ablation(modes, parallel=args.parallel)
    ablation.write_table(results, out / "modes.csv")
    (out / "modes.svg").write_text(plotting.ablation_chart(ablation.table_rows(results)))
    print("\n".join(ablation.summary_lines(results)))

    if not args.skip_strategies:
        strategies = ablation.AblationSpec(
            modes=("omni_box",), fractions=(0.01,), seeds=seeds,
            strategies=("aplr", "box_suppress", "avg_confidence"),
        )
        results = ablation.run_ablation(strategies, parallel=args.parallel)
        ablation.write_table(results, out / "box_strategies.csv")
        print("\n".join(ablation.summary_lines(results)))


if __name__ == "__main__":
    main()
