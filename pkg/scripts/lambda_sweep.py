"""Sweep the accuracy/compactness trade-off and print precision, recall and F1 per value."""
import argparse

from latentfs.experiment import DatasetSpec, ExperimentConfig, sweep_lambda


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--dataset")
    p.add_argument("--target", default="label")
    p.add_argument("--values", default="0.1,0.3,0.5,0.7,0.9")
    p.add_argument("--out", default="runs/sweep")
    args = p.parse_args()
    spec = DatasetSpec(path=args.dataset, target=args.target, synthetic=None if args.dataset else {})
    rows = sweep_lambda(ExperimentConfig(dataset=spec, output_dir=args.out),
                        [float(v) for v in args.values.split(",")])
    print(f"{'lambda':>7} {'precision':>10} {'recall':>8} {'f1':>8} {'size':>5}")
    for r in rows:
        if "error" in r:
            print(f"{r['lambda']:>7.2f}  error: {r['error']}")
            continue
        mark = " *" if r["default"] else ""
        print(f"{r['lambda']:>7.2f} {r['precision']:>10.4f} {r['recall']:>8.4f} {r['f1']:>8.4f} "
              f"{r['n_selected']:>5}{mark}")


if __name__ == "__main__":
    main()
