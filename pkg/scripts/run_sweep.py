"""Sweep the inference weight alpha or the alignment weight lambda on one seed.

    python scripts/run_sweep.py alpha --seed 0 --out results/sweep-alpha.csv
"""
import argparse
from pathlib import Path

from ehr_rewrite.config import RunConfig, benchmark_config
from ehr_rewrite.evaluation import rows_to_csv
from ehr_rewrite.experiment import Experiment


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("what", choices=("alpha", "lambda"))
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", type=Path)
    parser.add_argument("--out", type=Path)
    args = parser.parse_args()

    cfg = RunConfig.load(args.config).replace(seed=args.seed) if args.config else benchmark_config(args.seed)
    exp = Experiment(cfg)
    exp.run_all()
    rows = exp.sweep(args.what)
    text = rows_to_csv(rows)
    print(text, end="")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)


if __name__ == "__main__":
    main()
