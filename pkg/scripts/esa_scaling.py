#!/usr/bin/env python3
"""Wall-time scaling of efficient self-attention with the reduction factor.

Sweeps R over a fixed token count and prints a table next to the closed-form
FLOP estimate; the O(N^2/R) term should dominate at large N.
"""

import argparse

from mdtaf.bench import bench_attention


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--tokens", type=int, default=4096)
    ap.add_argument("--channels", type=int, default=64)
    ap.add_argument("--reductions", default="1,2,4,8")
    args = ap.parse_args()

    print(f"{'R':>3}  {'flops':>12}  {'wall_ms':>8}")
    for r in (int(v) for v in args.reductions.split(",")):
        row = bench_attention(["esa"], [args.tokens],
                              channels=args.channels, reduction=r)[0]
        print(f"{r:>3}  {row['flops_estimate']:>12.3e}  {row['wall_ms']:>8.2f}")


if __name__ == "__main__":
    main()
