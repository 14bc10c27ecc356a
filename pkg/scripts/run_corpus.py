"""Run every scenario under scenarios/ and print a one-line verdict each."""
import argparse
import sys
import time
from pathlib import Path

from enfed.sim import Simulation, load_scenario

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("paths", nargs="*", type=Path, default=sorted((ROOT / "scenarios").glob("*.scn")))
    ap.add_argument("-v", "--verbose", action="store_true", help="print the full report of each run")
    args = ap.parse_args()
    failed = 0
    for path in args.paths:
        t0 = time.perf_counter()
        rep = Simulation(load_scenario(path)).run()
        dt = time.perf_counter() - t0
        failed += not rep.passed
        print(f"{'PASS' if rep.passed else 'FAIL'}  {path.name:<24} matches={len(rep.match_set()):<4} {dt:6.2f}s")
        if args.verbose or not rep.passed:
            print(rep.to_text())
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
