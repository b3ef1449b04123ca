"""Federated run from a config file (default: configs/federated_synthetic.json)."""
import argparse
from pathlib import Path

from latentfs.experiment import ExperimentConfig, format_summary, run_experiment

DEFAULT = Path(__file__).resolve().parents[1] / "configs" / "federated_synthetic.json"


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", default=str(DEFAULT))
    p.add_argument("--out", help="override the config's output directory")
    args = p.parse_args()
    cfg = ExperimentConfig.load(args.config)
    if args.out:
        cfg.output_dir = args.out
    print(format_summary(run_experiment(cfg, log=print)))


if __name__ == "__main__":
    main()
