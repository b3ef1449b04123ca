"""Centralized run on a CSV or the synthetic benchmark; prints the summary table."""
import argparse

from latentfs.collector import CollectorConfig
from latentfs.experiment import DatasetSpec, ExperimentConfig, format_summary, run_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--dataset")
    p.add_argument("--target", default="label")
    p.add_argument("--task", default="binary")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/centralized")
    args = p.parse_args()
    spec = DatasetSpec(path=args.dataset, target=args.target, task=args.task,
                       synthetic=None if args.dataset else {"seed": args.seed})
    cfg = ExperimentConfig(dataset=spec, collector=CollectorConfig(), seed=args.seed, output_dir=args.out)
    print(format_summary(run_experiment(cfg, log=print)))


if __name__ == "__main__":
    main()
