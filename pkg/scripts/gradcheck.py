"""Run the finite-difference suite and print per-check error and time.

    python scripts/gradcheck.py [--seed 0] [--no-composite]
"""
import argparse
import sys
import time

from sscdesk.gradsuite import run_suite

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-composite", action="store_true")
    args = ap.parse_args()
    start = time.perf_counter()
    results = run_suite(args.seed, not args.no_composite,
                        on_result=lambda r: print(f"{r.line()}  {r.seconds:6.2f}s", flush=True))
    bad = [r for r in results if not r.passed]
    print(f"{len(results) - len(bad)}/{len(results)} passed in {time.perf_counter() - start:.1f}s")
    sys.exit(1 if bad else 0)
