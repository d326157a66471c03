import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import TINY_MODEL
from unirep.encoder import EncoderConfig, forward
from unirep.numerics import NumericalDivergence, RngStream
from unirep.trainer import (
    SGD,
    TrainConfig,
    TrainState,
    embed,
    finetune_confidence,
    genuine_pairs,
    init_bundle,
    mean_genuine_score,
    train,
    train_step,
    training_posterior,
)


def _state(bundle, cfg):
    return TrainState(bundle, SGD(cfg.lr_encoder, cfg.momentum), SGD(cfg.lr_prototypes, cfg.momentum),
                      SGD(cfg.lr_disc, cfg.momentum))


def _batch(ds, n=8):
    return ds.train.X[:n], ds.train.y[:n] - ds.train.y.min(), ds.train.u[:n]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lambda_cls=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(margin=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(augment_families=("rain",))


def test_pure_softmax_leaves_disc_untouched(tiny_dataset):
    cfg = TrainConfig(lambda_cls=0.0, lambda_adv=0.0, lr_disc=0.0)
    b = init_bundle(TINY_MODEL, 5, 6, cfg)
    before = b.disc.copy()
    train_step(*_batch(tiny_dataset), _state(b, cfg), cfg)
    assert np.array_equal(b.disc.weight, before.weight) and np.array_equal(b.disc.bias, before.bias)


def test_de_off_skips_disc(tiny_dataset):
    cfg = TrainConfig(de=False)
    b = init_bundle(TINY_MODEL, 5, 6, cfg)
    before = b.disc.copy()
    parts = train_step(*_batch(tiny_dataset), _state(b, cfg), cfg)
    assert parts.disc == parts.cls == parts.adv == 0.0
    assert np.array_equal(b.disc.weight, before.weight)


def test_single_sample_descent(tiny_dataset):
    cfg = TrainConfig(lr_encoder=1e-3, lr_prototypes=1e-3, lr_disc=0.0, momentum=0.0)
    b = init_bundle(TINY_MODEL, 5, 6, cfg)
    X, y, u = _batch(tiny_dataset, 1)
    first = train_step(X, y, u, _state(b, cfg), cfg)
    again = train_step(X, y, u, _state(b, replace(cfg, lr_encoder=0.0, lr_prototypes=0.0)),
                       replace(cfg, lr_encoder=0.0, lr_prototypes=0.0))
    assert again.total < first.total


def test_disc_step_does_not_touch_encoder(tiny_dataset):
    cfg = TrainConfig()
    b = init_bundle(TINY_MODEL, 5, 6, cfg)
    state = _state(b, cfg)
    seen = []
    inner = state.opt_disc.step

    def spy(params, grads):
        snap = {k: v.copy() for k, v in b.encoder.arrays.items()}
        inner(params, grads)
        seen.append(all(np.array_equal(snap[k], b.encoder[k]) for k in snap))

    state.opt_disc.step = spy
    train_step(*_batch(tiny_dataset), state, cfg)
    assert seen == [True]


def test_prototypes_stay_unit(tiny_bundle):
    n = np.linalg.norm(tiny_bundle.bank.weights, axis=-1)
    assert np.max(np.abs(n - 1.0)) < 1e-10


def test_ablation_rows(tiny_dataset):
    rows = {
        "baseline": dict(va=False, ci=False, me=False, de=False),
        "A": dict(va=True, ci=False, me=False, de=False),
        "B": dict(va=True, ci=True, me=False, de=False),
        "C": dict(va=True, ci=True, me=True, de=False),
        "E": dict(va=True, ci=True, me=True, de=True),
    }
    for name, flags in rows.items():
        b = train(tiny_dataset, TINY_MODEL, TrainConfig(epochs=1, batch_size=8, **flags))
        K = b.encoder.config.group_count
        assert K == (4 if flags["me"] else 1), name
    with pytest.raises(ValueError, match="distinct masks"):
        train(tiny_dataset, TINY_MODEL, TrainConfig(epochs=1, me=False, de=True))


def test_decomposition_at_every_step(tiny_bundle):
    cfg = tiny_bundle.train_config
    for row in tiny_bundle.log.steps:
        expected = row["idt"] + cfg.lambda_reg * row["reg"] + cfg.lambda_cls * row["cls"] + cfg.lambda_adv * row["adv"]
        assert abs(row["total"] - expected) <= 1e-12


def test_log_csv(tiny_bundle):
    lines = tiny_bundle.log.to_csv(4).splitlines()
    assert lines[0] == "epoch,idt,reg,cls,adv,disc,total,mean_s_1,mean_s_2,mean_s_3,mean_s_4"
    assert len(lines) == 1 + 3


def test_deterministic_rerun(tiny_dataset, tiny_bundle):
    again = train(tiny_dataset, TINY_MODEL, TrainConfig(epochs=3, batch_size=8))
    assert again.log.steps == tiny_bundle.log.steps
    assert all(np.array_equal(again.encoder[k], tiny_bundle.encoder[k]) for k in again.encoder.names())


def test_divergence_names_term(tiny_dataset):
    cfg = TrainConfig(lr_encoder=1e30, lr_prototypes=1e30, epochs=5, batch_size=8)
    with np.errstate(all="ignore"), pytest.raises(NumericalDivergence) as info:
        train(tiny_dataset, TINY_MODEL, cfg)
    assert info.value.term in ("idt", "reg", "cls", "adv", "disc", "total")


def test_on_epoch_callback(tiny_dataset):
    seen = []
    train(tiny_dataset, TINY_MODEL, TrainConfig(epochs=2, batch_size=8), on_epoch=lambda e, b: seen.append(e))
    assert seen == [1, 2]


def test_embed_thread_invariant(desk_dataset, desk_bundle):
    a = embed(desk_bundle, desk_dataset.test.X, threads=1)
    b = embed(desk_bundle, desk_dataset.test.X, threads=4)
    assert np.array_equal(a.sub, b.sub) and np.array_equal(a.conf, b.conf)


def test_desk_default_runtime(desk_dataset):
    t0 = time.perf_counter()
    b = train(desk_dataset, EncoderConfig(), TrainConfig(seed=1))
    assert time.perf_counter() - t0 < 300
    assert len(b.log.epochs) == 30


def test_ci_raises_training_posterior_on_augmented(desk_dataset):
    ci = train(desk_dataset, EncoderConfig(), TrainConfig(seed=0, ci=True))
    shared = train(desk_dataset, EncoderConfig(), TrainConfig(seed=0, ci=False))
    from unirep.trainer import epoch_data
    X, U = epoch_data(desk_dataset, TrainConfig(seed=123), 0)
    aug = np.any(U[:, :3] == 0, axis=1)
    y = desk_dataset.train.y - desk_dataset.train.y.min()
    p_ci = training_posterior(ci, X[aug], y[aug]).mean()
    p_sh = training_posterior(shared, X[aug], y[aug]).mean()
    assert p_ci > p_sh


def test_finetune_contracts(desk_dataset, desk_bundle):
    pairs = genuine_pairs(desk_dataset, 200, seed=0)
    same = finetune_confidence(desk_bundle, pairs, epochs=0)
    assert all(np.array_equal(same.encoder[k], desk_bundle.encoder[k]) for k in same.encoder.names())
    tuned = finetune_confidence(desk_bundle, pairs, epochs=30)
    for k in desk_bundle.encoder.names():
        if not k.startswith("conf."):
            assert tuned.encoder[k].tobytes() == desk_bundle.encoder[k].tobytes()
    assert tuned.finetuned and not desk_bundle.finetuned
    assert mean_genuine_score(tuned, *pairs) >= mean_genuine_score(desk_bundle, *pairs)
    with pytest.raises(ValueError):
        finetune_confidence(desk_bundle, (np.zeros((0, 64)), np.zeros((0, 64))))


def test_finetune_gradient_matches_finite_differences(tiny_dataset, tiny_bundle):
    from unirep.trainer import _conf_head_grad
    from unirep.numerics import finite_diff_grad
    Xa, Xb = genuine_pairs(tiny_dataset, 6, seed=1)
    _, g = _conf_head_grad(tiny_bundle, Xa, Xb)
    for name in ("conf.weight", "conf.bias"):
        def f(w, name=name):
            b = tiny_bundle.copy()
            b.encoder.arrays[name] = w
            return mean_genuine_score(b, Xa, Xb)
        fd = finite_diff_grad(f, tiny_bundle.encoder[name])
        assert np.max(np.abs(g[name] - fd)) / np.max(np.abs(fd)) < 1e-6
