"""Run the planted-signal benchmark for a few seeds and print one table per seed.

    python3 scripts/run_planted_benchmark.py --seeds 0 1 2 --workdir runs/bench
"""
import argparse
import logging
import sys
from pathlib import Path

from macaudit.benchmark import run_planted


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--workdir", default="runs/planted-benchmark")
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--batch-size", type=int, default=256)
    ap.add_argument("--passes", type=int, default=100)
    ap.add_argument("--min-pass", type=int, default=5, help="attribute checks that must hold per seed")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    total, ok = 0.0, True
    for seed in args.seeds:
        run = run_planted(seed, Path(args.workdir) / f"seed-{seed}", args.epochs, args.batch_size, args.passes)
        total += run.seconds
        print(f"seed {seed}: {run.n_passed}/{len(run.checks)} checks, {run.seconds:.1f}s")
        print(f"  {'attribute':<14}{'acc@100':>9}{'acc@50':>9}  class  ok")
        for c in run.checks:
            print(f"  {c.attribute:<14}{c.acc100:9.4f}{c.acc50:9.4f}  {c.klass:<5}  {'yes' if c.passed else 'NO'}")
        ok &= run.n_passed >= args.min_pass
    print(f"total {total:.1f}s, {'pass' if ok else 'FAIL'}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
