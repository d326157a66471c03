"""Paired ablations over a few seeds.

    python demos/ablations.py [--seeds 0 1 2]

Each experiment trains two or three models that differ in one switch and
reports the metric that switch is supposed to move:

* decorrelation on/off: mean |off-diagonal| correlation of group distances
* per-sample confidence vs one shared value: TAR on corrupted pairs
* corruption families added one by one: TAR on corrupted pairs

Runtime is roughly 25 s per seed.
"""
import argparse

import numpy as np

from unirep.experiments import LADDER, augmentation_ladder, confidence_pair, decorrelation_pair


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()

    print("decorrelation (lower is better)")
    rows = [decorrelation_pair(s) for s in args.seeds]
    for s, r in zip(args.seeds, rows):
        print(f"  seed {s}: with {r['de']:.3f}   without {r['no_de']:.3f}")
    print(f"  mean:   with {np.mean([r['de'] for r in rows]):.3f}   "
          f"without {np.mean([r['no_de'] for r in rows]):.3f}")

    print("\nconfidence, TAR@FAR=1e-2 on corrupted pairs")
    for s in args.seeds:
        r = confidence_pair(s)
        print(f"  seed {s}: per-sample {r['ci']:.3f}   shared {r['shared_s']:.3f}")

    print("\naugmentation ladder, TAR@FAR=1e-2 on corrupted pairs")
    names = ["+".join(f) for f in LADDER]
    table = np.array([augmentation_ladder(s) for s in args.seeds])
    for s, row in zip(args.seeds, table):
        print(f"  seed {s}: " + "   ".join(f"{n} {v:.3f}" for n, v in zip(names, row)))
    print("  mean:   " + "   ".join(f"{n} {v:.3f}" for n, v in zip(names, table.mean(axis=0))))


if __name__ == "__main__":
    main()
