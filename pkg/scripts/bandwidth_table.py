"""Cost of broadcasting every diagnosis key to every user, over a grid of inputs."""
import argparse

from enfed.sim import estimate_bandwidth


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--keys", type=int, default=14)
    ap.add_argument("--key-bytes", type=int, default=16)
    ap.add_argument("--infections", type=float, nargs="+", default=[10_000, 50_000, 100_000, 200_000, 500_000])
    ap.add_argument("--population", type=float, nargs="+", default=[8.6e6, 60e6, 330e6])
    args = ap.parse_args()
    print(f"{'infections/day':>15} {'population':>12} {'MB/user/day':>12} {'PB/day':>9} {'Tbps':>8}")
    for inf in args.infections:
        for pop in args.population:
            r = estimate_bandwidth(args.keys, args.key_bytes, inf, pop).rounded()
            print(f"{inf:>15,.0f} {pop:>12.3g} {r['per_user_MB_per_day']:>12} "
                  f"{r['aggregate_PB_per_day']:>9} {r['sustained_Tbps']:>8}")


if __name__ == "__main__":
    main()
