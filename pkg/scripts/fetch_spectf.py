"""Download the UCI SPECTF heart data into data/spectf.csv (label column first in the raw files)."""
import argparse
import urllib.request
from pathlib import Path

BASE = "https://archive.ics.uci.edu/ml/machine-learning-databases/spect/"
PARTS = ("SPECTF.train", "SPECTF.test")


def feature_names():
    return [f"F{i}{side}" for i in range(1, 23) for side in ("R", "S")]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data" / "spectf.csv"))
    parser.add_argument("--base-url", default=BASE)
    args = parser.parse_args()
    rows = []
    for part in PARTS:
        with urllib.request.urlopen(args.base_url + part, timeout=60) as resp:
            text = resp.read().decode("ascii")
        rows += [line.strip() for line in text.splitlines() if line.strip()]
    if len(rows) != 267 or any(len(r.split(",")) != 45 for r in rows):
        raise SystemExit(f"unexpected SPECTF layout: {len(rows)} rows")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(",".join(["label", *feature_names()]) + "\n" + "\n".join(rows) + "\n")
    print(f"wrote {len(rows)} rows to {out}")


if __name__ == "__main__":
    main()
