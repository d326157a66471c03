"""Train one desk-scale model and look at what it learned.

    python demos/quickstart.py [--seed 0]

Generates the synthetic dataset, trains the default model (about 5 s),
prints the evaluation report for both scoring rules and then scores one
clean and one corrupted genuine pair so the confidence values can be
compared side by side.
"""
import argparse
import time

import numpy as np

from unirep.encoder import EncoderConfig
from unirep.evaluation import evaluate
from unirep.scorer import pair_score_cosine, pair_score_mls
from unirep.synthdata import DatasetConfig, make_dataset
from unirep.trainer import TrainConfig, embed, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ds = make_dataset(DatasetConfig(seed=args.seed))
    print(f"train {len(ds.train)} samples, test {len(ds.test)} samples, "
          f"{ds.train.u.shape[1]} variation labels")

    t0 = time.perf_counter()
    bundle = train(ds, EncoderConfig(), TrainConfig(seed=args.seed))
    first, last = bundle.log.steps[0], bundle.log.steps[-1]
    print(f"trained in {time.perf_counter() - t0:.1f}s: loss {first['total']:.3f} -> {last['total']:.3f}")

    # the likelihood score needs a fine-tuned confidence head to be useful,
    # see uncertainty_scoring.py; here it runs on the raw training head
    for pa in (False, True):
        print()
        print(evaluate(bundle, ds, pa=pa).to_text(), end="")

    # a clean and a corrupted probe of the same test identity
    test = ds.test
    bad = test.corrupted
    ident = int(test.y[np.nonzero(bad)[0][0]])
    clean = np.nonzero((test.y == ident) & ~bad)[0]
    noisy = np.nonzero((test.y == ident) & bad)[0]
    e = embed(bundle, test.X[[clean[0], clean[1], noisy[0]]])
    print()
    print("mean confidence per sample:", np.round(e.conf.mean(axis=1), 2).tolist())
    for name, j in (("clean/clean", 1), ("clean/corrupted", 2)):
        a, b = e[0], e[j]
        print(f"{name:16s} cosine {pair_score_cosine(a, b).value:+.3f}  mls {pair_score_mls(a, b).value:+.2f}")


if __name__ == "__main__":
    main()
