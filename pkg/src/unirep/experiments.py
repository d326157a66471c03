"""Paired desk-scale experiments used by the demos and the acceptance suite."""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .encoder import EncoderConfig
from .evaluation import evaluate
from .synthdata import AUGMENTABLE, DatasetConfig, make_dataset
from .trainer import TrainConfig, finetune_confidence, genuine_pairs, train

LADDER = (("blur",), ("blur", "occlusion"), AUGMENTABLE)


def desk_setup(seed: int, data_cfg: DatasetConfig | None = None, model_cfg: EncoderConfig | None = None,
               train_cfg: TrainConfig | None = None):
    data_cfg = replace(data_cfg or DatasetConfig(), seed=seed)
    return make_dataset(data_cfg), model_cfg or EncoderConfig(), replace(train_cfg or TrainConfig(), seed=seed)


def decorrelation_pair(seed: int, **setup):
    """Mean |off-diagonal| correlation with and without decorrelation losses."""
    ds, mc, tc = desk_setup(seed, **setup)
    out = {}
    for name, de in (("de", True), ("no_de", False)):
        b = train(ds, mc, replace(tc, de=de))
        out[name] = evaluate(b, ds).mean_abs_corr
    return out


def confidence_pair(seed: int, far: float = 1e-2, **setup):
    """Corrupted-pair TAR for per-sample confidence vs a shared constant."""
    ds, mc, tc = desk_setup(seed, **setup)
    out = {}
    for name, ci in (("ci", True), ("shared_s", False)):
        b = train(ds, mc, replace(tc, va=True, ci=ci))
        out[name] = evaluate(b, ds, far_targets=(far,)).tar_corrupted[0]
    return out


def augmentation_ladder(seed: int, far: float = 1e-2, ladder=LADDER, **setup):
    """Corrupted-pair TAR of the full model as corruption families are added."""
    ds, mc, tc = desk_setup(seed, **setup)
    return [
        evaluate(train(ds, mc, replace(tc, va=True, augment_families=fams)), ds, far_targets=(far,)).tar_corrupted[0]
        for fams in ladder
    ]


def aggregation_pair(seed: int, far: float = 1e-2, pairs: int = 1000, ft_epochs: int = 100,
                     ft_lr: float = 0.5, **setup):
    """Mixed-quality TAR for uncertainty-aware scoring vs averaged cosine."""
    ds, mc, tc = desk_setup(seed, **setup)
    b = train(ds, mc, tc)
    cos = evaluate(b, ds, pa=False, far_targets=(far,)).tar[0]
    fb = finetune_confidence(b, genuine_pairs(ds, pairs, seed), ft_epochs, ft_lr)
    mls = evaluate(fb, ds, pa=True, far_targets=(far,)).tar[0]
    return {"mls": mls, "cosine": cos}


def summarize(rows):
    keys = rows[0].keys()
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}
