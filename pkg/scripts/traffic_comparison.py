"""Backend-to-backend traffic of partial vs all-to-all replication on random scenarios."""
import argparse

from enfed.sim import compare_replication_modes, random_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--regions", type=int, nargs="+", default=[3, 5, 8])
    ap.add_argument("--users", type=int, default=60)
    ap.add_argument("--trip-prob", type=float, nargs="+", default=[0.1, 0.3, 0.6])
    args = ap.parse_args()
    print(f"{'regions':>7} {'trip_p':>6} {'partial keys':>13} {'a2a keys':>9} {'ratio':>6}")
    for n in args.regions:
        for p in args.trip_prob:
            pk = ak = 0
            for seed in range(args.seeds):
                sc = random_scenario(seed, n_regions=n, n_users=args.users, horizon_days=8,
                                     n_contacts=2 * args.users, n_infections=args.users // 5, trip_prob=p)
                cmp = compare_replication_modes(sc)
                assert cmp.partial_le_a2a
                pk += cmp.partial_keys
                ak += cmp.a2a_keys
            print(f"{n:>7} {p:>6} {pk:>13} {ak:>9} {pk / ak if ak else 0:>6.2f}")


if __name__ == "__main__":
    main()
