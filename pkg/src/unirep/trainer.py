"""Alternating mini-batch optimisation and confidence fine-tuning.

Each step first updates the variation discriminator on the current
embeddings, then updates the encoder and prototypes on the combined
objective with the discriminator frozen.
"""
from __future__ import annotations

import time
from math import comb
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import losses
from .encoder import EncoderConfig, EncoderParams, ProbEmbedding, backward, forward, init_encoder
from .losses import Discriminator, LossBreakdown, PrototypeBank
from .masks import MaskSet, generate_masks
from .numerics import NumericalDivergence, RngStream
from .scorer import SIGMA2_FLOOR
from .synthdata import AUGMENTABLE, Corruptor, Dataset, VariationSample, augment

EMBED_CHUNK = 128


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings.

    The defaults are desk scale. Large-scale reference values: margin 30,
    embedding width 512 split into 16 groups, loss weights 0.001 / 2.0 / 2.0.
    """

    epochs: int = 30
    batch_size: int = 32
    lr_encoder: float = 0.01
    lr_prototypes: float = 0.01
    lr_disc: float = 0.01
    momentum: float = 0.9
    lambda_reg: float = losses.DEFAULT_LAMBDA_REG
    lambda_cls: float = losses.DEFAULT_LAMBDA_CLS
    lambda_adv: float = losses.DEFAULT_LAMBDA_ADV
    margin: float = 4.0
    va: bool = True
    ci: bool = True
    me: bool = True
    de: bool = True
    augment_families: tuple = AUGMENTABLE
    shared_confidence: float | None = None
    seed: int = 0
    save_interval: int = 0

    def __post_init__(self):
        object.__setattr__(self, "augment_families", tuple(self.augment_families))
        if min(self.lambda_reg, self.lambda_cls, self.lambda_adv) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        unknown = set(self.augment_families) - set(AUGMENTABLE)
        if unknown:
            raise ValueError(f"unknown augmentation families {sorted(unknown)}")

    def to_dict(self):
        d = asdict(self)
        d["augment_families"] = list(self.augment_families)
        return d


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    wall_clock: float = 0.0

    CSV_FIELDS = ("epoch", "idt", "reg", "cls", "adv", "disc", "total")

    def to_csv(self, K: int) -> str:
        header = list(self.CSV_FIELDS) + [f"mean_s_{k + 1}" for k in range(K)]
        lines = [",".join(header)]
        for rec in self.epochs:
            vals = [str(rec["epoch"])] + [repr(float(rec[f])) for f in self.CSV_FIELDS[1:]]
            vals += [repr(float(v)) for v in rec["mean_s"]]
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"


@dataclass
class ModelBundle:
    encoder: EncoderParams
    bank: PrototypeBank
    masks: MaskSet
    disc: Discriminator
    train_config: TrainConfig
    log: TrainLog = field(default_factory=TrainLog)
    finetuned: bool = False

    def copy(self):
        return ModelBundle(self.encoder.copy(), self.bank.copy(), self.masks, self.disc.copy(),
                           self.train_config, self.log, self.finetuned)


class SGD:
    """Heavy-ball momentum SGD over a dict of arrays (updated in place)."""

    def __init__(self, lr: float, momentum: float):
        self.lr = lr
        self.momentum = momentum
        self.velocity = {}

    def step(self, params: dict, grads: dict):
        for name, g in grads.items():
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            params[name] -= self.lr * v


@dataclass
class TrainState:
    bundle: ModelBundle
    opt_encoder: SGD
    opt_bank: SGD
    opt_disc: SGD


def _effective_config(model_cfg: EncoderConfig, cfg: TrainConfig) -> EncoderConfig:
    return model_cfg if cfg.me else replace(model_cfg, group_count=1)


def init_bundle(model_cfg: EncoderConfig, n_ids: int, variations: int, cfg: TrainConfig) -> ModelBundle:
    model_cfg = _effective_config(model_cfg, cfg)
    root = RngStream(cfg.seed, "train")
    params = init_encoder(model_cfg, root.substream("init"))
    bank = PrototypeBank.init(n_ids, model_cfg.group_count, model_cfg.group_dim, root.substream("prototypes"))
    if cfg.de and variations > comb(model_cfg.group_count, model_cfg.group_count // 2):
        raise ValueError(f"decorrelation needs {variations} distinct masks; K={model_cfg.group_count} is too small"
                         " (is multiple-embedding training off?)")
    # without decorrelation no masks are needed
    masks = generate_masks(model_cfg.group_count, variations if cfg.de else 0, root.substream("masks"))
    disc = Discriminator.init(variations, model_cfg.embedding_dim, root.substream("disc"))
    return ModelBundle(params, bank, masks, disc, cfg)


def _check(term, value):
    if not np.isfinite(value):
        raise NumericalDivergence(term)
    return value


def _term(term, fn, *args):
    """Evaluate one loss term, re-raising any divergence under its name."""
    try:
        return fn(*args)
    except NumericalDivergence as exc:
        raise NumericalDivergence(term, str(exc)) from None


def train_step(X, y, u, state: TrainState, cfg: TrainConfig) -> LossBreakdown:
    """One discriminator update followed by one encoder/prototype update."""
    b = state.bundle
    e, tape = forward(b.encoder, X)
    if cfg.ci:
        e_idt = e
    else:
        s0 = cfg.shared_confidence or b.encoder.config.init_confidence
        e_idt = ProbEmbedding(e.sub, np.full_like(e.conf, s0))

    parts = LossBreakdown()
    lam_cls = cfg.lambda_cls if cfg.de else 0.0
    lam_adv = cfg.lambda_adv if cfg.de else 0.0
    d_sub = np.zeros_like(e.sub)
    if cfg.de:
        parts.disc, dW, db = _term("disc", losses.disc_loss, b.disc, e, b.masks, u)
        _check("disc", parts.disc)
        state.opt_disc.step({"weight": b.disc.weight, "bias": b.disc.bias}, {"weight": dW, "bias": db})
        parts.cls, g_cls = _term("cls", losses.variation_cls_loss, b.disc, e, b.masks, u)
        parts.adv, g_adv = _term("adv", losses.variation_adv_loss, b.disc, e, b.masks, u)
        d_sub += lam_cls * g_cls + lam_adv * g_adv

    res = _term("idt", losses.idt_loss, e_idt, b.bank, y, cfg.margin)
    parts.idt = res.loss
    parts.logits = res.probs
    parts.reg, g_reg = losses.conf_reg(e_idt)
    parts.total = losses.total_loss(parts, cfg.lambda_reg, lam_cls, lam_adv)
    for term in ("idt", "reg", "cls", "adv", "total"):
        _check(term, getattr(parts, term))

    d_sub += res.d_sub
    d_conf = res.d_conf + cfg.lambda_reg * g_reg if cfg.ci else None
    grads = backward(b.encoder, tape, d_sub, d_conf)
    state.opt_encoder.step(b.encoder.arrays, grads)
    bank = {"w": b.bank.weights}
    state.opt_bank.step(bank, {"w": res.d_bank})
    b.bank.weights = bank["w"]
    b.bank.renormalize()
    return parts


def epoch_data(dataset: Dataset, cfg: TrainConfig, epoch: int, corruptor: Corruptor | None = None):
    """Training arrays for one epoch, augmented on the fly when enabled."""
    split = dataset.train
    X, U = split.X.copy(), split.u.copy()
    if cfg.va and cfg.augment_families:
        corruptor = corruptor or Corruptor(dataset.config)
        rng = RngStream(cfg.seed, f"augment/{epoch}")
        M = len(AUGMENTABLE)
        for i in range(len(split)):
            s = augment(VariationSample(X[i], int(split.y[i]), U[i, :M]), dataset.config, rng,
                        corruptor, families=cfg.augment_families)
            X[i] = s.x
            U[i, :M] = s.u
    return X, U


def train(dataset: Dataset, model_cfg: EncoderConfig, cfg: TrainConfig, on_epoch=None) -> ModelBundle:
    """Train a model bundle; ``on_epoch(epoch, bundle)`` is called after each epoch."""
    split = dataset.train
    if len(split) == 0:
        raise ValueError("training split is empty")
    labels = split.y - split.y.min()
    n_ids = int(labels.max()) + 1
    bundle = init_bundle(model_cfg, n_ids, split.u.shape[1], cfg)
    state = TrainState(bundle, SGD(cfg.lr_encoder, cfg.momentum), SGD(cfg.lr_prototypes, cfg.momentum),
                       SGD(cfg.lr_disc, cfg.momentum))
    corruptor = Corruptor(dataset.config)
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        X, U = epoch_data(dataset, cfg, epoch, corruptor)
        order = RngStream(cfg.seed, f"batch/{epoch}").permutation(len(split))
        records, confs = [], []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            parts = train_step(X[idx], labels[idx], U[idx], state, cfg)
            parts.logits = None
            records.append(parts)
            bundle.log.steps.append(parts.as_row())
        e, _ = forward(bundle.encoder, X)
        confs = e.conf.mean(axis=0)
        rec = {"epoch": epoch + 1}
        for key in ("idt", "reg", "cls", "adv", "disc", "total"):
            rec[key] = float(np.mean([getattr(r, key) for r in records]))
        rec["mean_s"] = [float(v) for v in confs]
        bundle.log.epochs.append(rec)
        if on_epoch is not None:
            on_epoch(epoch + 1, bundle)
    bundle.log.wall_clock = time.perf_counter() - t0
    return bundle


# ---------------------------------------------------------------------------
# embedding helpers


def embed(bundle: ModelBundle, X, threads: int = 1, shared_confidence: float | None = None) -> ProbEmbedding:
    """Encode rows of ``X`` in fixed-size chunks.

    Chunk boundaries do not depend on ``threads``, so results are bitwise
    identical for any worker count.
    """
    X = np.asarray(X, dtype=np.float64)
    chunks = [X[i : i + EMBED_CHUNK] for i in range(0, len(X), EMBED_CHUNK)]

    def run(chunk):
        return forward(bundle.encoder, chunk)[0]

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    e = ProbEmbedding(np.concatenate([p.sub for p in parts]), np.concatenate([p.conf for p in parts]))
    if shared_confidence is not None:
        e = ProbEmbedding(e.sub, np.full_like(e.conf, shared_confidence))
    return e


def training_posterior(bundle: ModelBundle, X, y) -> np.ndarray:
    """Posterior of the true class (no margin) for each row."""
    cfg = bundle.train_config
    e = embed(bundle, X)
    if not cfg.ci:
        e = ProbEmbedding(e.sub, np.full_like(e.conf, cfg.shared_confidence or bundle.encoder.config.init_confidence))
    p = losses.posterior(e, bundle.bank)
    return p[np.arange(len(y)), y]


# ---------------------------------------------------------------------------
# confidence fine-tuning


def genuine_pairs(dataset: Dataset, count: int, seed: int, families=AUGMENTABLE):
    """Same-identity training pairs, each side independently augmented."""
    split = dataset.train
    rng = RngStream(seed, "finetune-pairs")
    corruptor = Corruptor(dataset.config)
    by_id = {}
    for i, ident in enumerate(split.y):
        by_id.setdefault(int(ident), []).append(i)
    ids = sorted(by_id)
    Xa, Xb = [], []
    M = len(AUGMENTABLE)
    for _ in range(count):
        members = by_id[ids[int(rng.integers(0, len(ids)))]]
        i, j = rng.permutation(len(members))[:2] if len(members) > 1 else (0, 0)
        for dst, k in ((Xa, members[i]), (Xb, members[j])):
            s = augment(VariationSample(split.X[k], 0, split.u[k, :M]), dataset.config, rng,
                        corruptor, families=families)
            dst.append(s.x)
    return np.array(Xa), np.array(Xb)


def _mls_and_grad(ea: ProbEmbedding, eb: ProbEmbedding):
    """Mean pair score and its gradient wrt both confidence logits."""
    K = ea.K
    D = ea.dim
    s2a = np.maximum(1.0 / ea.conf, SIGMA2_FLOOR)
    s2b = np.maximum(1.0 / eb.conf, SIGMA2_FLOOR)
    var = s2a + s2b
    dist = np.sum((ea.sub - eb.sub) ** 2, axis=-1)
    scores = -0.5 * np.sum(dist / var, axis=1) - D / (2.0 * K) * np.sum(np.log(var), axis=1)
    n = len(scores)
    d_var = (0.5 * dist / var**2 - D / (2.0 * K) / var) / n
    # s2 = exp(-logit) so d s2 / d logit = -s2 (zero where the floor is active)
    da = -d_var * np.where(1.0 / ea.conf > SIGMA2_FLOOR, s2a, 0.0)
    db = -d_var * np.where(1.0 / eb.conf > SIGMA2_FLOOR, s2b, 0.0)
    return float(scores.mean()), da, db


def _conf_head_grad(bundle, Xa, Xb):
    ea, ta = forward(bundle.encoder, Xa)
    eb, tb = forward(bundle.encoder, Xb)
    value, da, db = _mls_and_grad(ea, eb)
    # d score / d conf = d score / d logit / conf, since conf = exp(logit)
    ga = backward(bundle.encoder, ta, np.zeros_like(ea.sub), da / ea.conf)
    gb = backward(bundle.encoder, tb, np.zeros_like(eb.sub), db / eb.conf)
    return value, {k: ga[k] + gb[k] for k in ("conf.weight", "conf.bias")}


def mean_genuine_score(bundle: ModelBundle, Xa, Xb) -> float:
    ea, _ = forward(bundle.encoder, Xa)
    eb, _ = forward(bundle.encoder, Xb)
    return _mls_and_grad(ea, eb)[0]


def finetune_confidence(bundle: ModelBundle, pairs, epochs: int = 100, lr: float = 0.5) -> ModelBundle:
    """Refit only the confidence head to maximise the mean genuine-pair score.

    Full-batch gradient ascent; a step that lowers the objective is retried
    at half the learning rate, so the objective never decreases.
    """
    Xa, Xb = (np.asarray(p, dtype=np.float64) for p in pairs)
    if len(Xa) == 0:
        raise ValueError("fine-tuning needs at least one genuine pair")
    out = bundle.copy()
    if epochs == 0:
        return out
    value, grads = _conf_head_grad(out, Xa, Xb)
    step = lr
    for _ in range(epochs):
        trial = out.encoder.copy()
        for k, g in grads.items():
            trial.arrays[k] += step * g
        cand = replace(out, encoder=trial)
        new_value, new_grads = _conf_head_grad(cand, Xa, Xb)
        if new_value >= value:
            out, value, grads = cand, new_value, new_grads
        else:
            step *= 0.5
            if step < 1e-12:
                break
    out.finetuned = True
    return out
