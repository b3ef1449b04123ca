"""Counted vs closed-form FLOPs of one induced attention layer as the set grows."""
import argparse

import numpy as np
import torch

from latentfs.codec import ISAB, count_flops, isab_matmul_flops


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--sizes", default="64,128,256,512,1024,2048")
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--M", type=int, default=32)
    p.add_argument("--heads", type=int, default=4)
    args = p.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]
    torch.manual_seed(0)
    layer = ISAB(args.d, args.heads, args.M)
    counted = []
    print(f"{'N':>6} {'counted':>14} {'closed form':>14}")
    for n in sizes:
        counted.append(count_flops(layer, torch.randn(1, n, args.d)))
        print(f"{n:>6} {counted[-1]:>14,} {isab_matmul_flops(n, args.M, args.d):>14,}")
    slope = np.polyfit(np.log(sizes), np.log(counted), 1)[0]
    print(f"log-log slope {slope:.3f}")


if __name__ == "__main__":
    main()
