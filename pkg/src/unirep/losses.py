"""Training objectives and their gradients.

All batched functions take a :class:`ProbEmbedding` whose ``sub`` has shape
``(n, K, d)`` (or ``(K, d)`` for one sample) and return the loss averaged
over the batch together with gradients of that average.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import ProbEmbedding
from .masks import MaskSet, apply_all
from .numerics import RngStream, l2_normalize, log_softmax, sigmoid

PROB_CLAMP = 1e-12

DEFAULT_LAMBDA_REG = 0.001
DEFAULT_LAMBDA_CLS = 2.0
DEFAULT_LAMBDA_ADV = 2.0
PAPER_MARGIN = 30.0


def _batched(e: ProbEmbedding):
    single = e.sub.ndim == 2
    sub = e.sub[None] if single else e.sub
    conf = e.conf[None] if single else e.conf
    return sub, conf, single


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class PrototypeBank:
    """Identity prototypes, shape ``(N, K, d)``; every group is unit-norm."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 3:
            raise ValueError("prototype weights must have shape (N, K, d)")

    @classmethod
    def init(cls, N: int, K: int, d: int, rng: RngStream) -> "PrototypeBank":
        w, _ = l2_normalize(rng.normal(size=(N, K, d)))
        return cls(w)

    @property
    def N(self) -> int:
        return self.weights.shape[0]

    def renormalize(self):
        self.weights, _ = l2_normalize(self.weights)

    def copy(self):
        return PrototypeBank(self.weights.copy())


@dataclass
class Discriminator:
    """Linear multi-label classifier from a masked D-vector to V logits."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError("discriminator weight/bias disagree on output count")

    @classmethod
    def init(cls, V: int, D: int, rng: RngStream, scale: float = 0.01) -> "Discriminator":
        return cls(rng.normal(0.0, scale, (V, D)), np.zeros(V))

    @property
    def variations(self) -> int:
        return self.weight.shape[0]

    def copy(self):
        return Discriminator(self.weight.copy(), self.bias.copy())


@dataclass
class LossBreakdown:
    idt: float = 0.0
    reg: float = 0.0
    cls: float = 0.0
    adv: float = 0.0
    disc: float = 0.0
    total: float = 0.0
    logits: np.ndarray | None = field(default=None, repr=False)

    def as_row(self):
        return {k: getattr(self, k) for k in ("idt", "reg", "cls", "adv", "disc", "total")}


# ---------------------------------------------------------------------------
# identification


def logits(e: ProbEmbedding, bank: PrototypeBank):
    """Aggregated logits ``a_j = mean_k s_k <w_j^k, f^k>``."""
    sub, conf, single = _batched(e)
    if sub.shape[1:] != bank.weights.shape[1:]:
        raise ValueError(f"embedding groups {sub.shape[1:]} vs prototypes {bank.weights.shape[1:]}")
    cos = np.einsum("nkd,jkd->njk", sub, bank.weights)
    a = np.einsum("njk,nk->nj", cos, conf) / sub.shape[1]
    return a[0] if single else a


def _margin_logits(a, y, margin):
    a = np.array(a, dtype=np.float64, copy=True)
    if margin:
        a[np.arange(len(a)), y] -= margin
    return a


def _check_labels(y, N, n):
    y = np.atleast_1d(np.asarray(y))
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer) or np.any(y < 0) or np.any(y >= N):
        raise ValueError(f"labels must be integers in [0, {N})")
    return y


def posterior(e: ProbEmbedding, bank: PrototypeBank, y=None, margin: float = 0.0):
    """Class posterior over the N prototypes.

    With ``y`` and a nonzero ``margin`` the true-class logit is reduced by
    ``margin`` first.
    """
    a = logits(e, bank)
    single = a.ndim == 1
    a2 = a[None] if single else a
    if y is not None and margin:
        y = _check_labels(y, bank.N, len(a2))
        a2 = _margin_logits(a2, y, margin)
    p = np.exp(log_softmax(a2))
    return p[0] if single else p


@dataclass
class IdtResult:
    loss: float
    per_sample: np.ndarray
    probs: np.ndarray
    d_sub: np.ndarray
    d_conf: np.ndarray
    d_bank: np.ndarray


def idt_grads_closed_form(e: ProbEmbedding, bank: PrototypeBank, y, p):
    """Closed-form gradients of the per-sample identification loss.

    ``p`` is the margin-applied posterior. The logit averages over groups,
    so both gradients carry a ``1/K`` factor:

        dL/dw_j^k = s^k (p_j - [j == y]) f^k / K
        dL/df^k   = s^k sum_j (p_j - [j == y]) w_j^k / K

    For a batch, ``dL/dw`` is summed over samples and ``dL/df`` is returned
    per sample.
    """
    sub, conf, single = _batched(e)
    p = np.atleast_2d(p)
    y = _check_labels(y, bank.N, len(sub))
    K = sub.shape[1]
    g = p.copy()
    g[np.arange(len(g)), y] -= 1.0
    d_bank = np.einsum("nj,nk,nkd->jkd", g, conf, sub) / K
    d_sub = np.einsum("nj,jkd->nkd", g, bank.weights) * conf[:, :, None] / K
    return d_bank, (d_sub[0] if single else d_sub)


def idt_loss(e: ProbEmbedding, bank: PrototypeBank, y, margin: float = 0.0) -> IdtResult:
    """Margin C-Softmax loss averaged over the batch, with gradients.

    The margin is subtracted from the true-class logit after confidence
    weighting and is never scaled by the confidence.
    """
    sub, conf, single = _batched(e)
    n, K, _ = sub.shape
    y = _check_labels(y, bank.N, n)
    a = _margin_logits(logits(ProbEmbedding(sub, conf), bank), y, margin)
    logp = log_softmax(a)
    per_sample = -logp[np.arange(n), y]
    p = np.exp(logp)

    d_bank, d_sub = idt_grads_closed_form(ProbEmbedding(sub, conf), bank, y, p)
    g = p.copy()
    g[np.arange(n), y] -= 1.0
    cos = np.einsum("nkd,jkd->njk", sub, bank.weights)
    d_conf = np.einsum("nj,njk->nk", g, cos) / K
    inv_n = 1.0 / n
    if single:
        return IdtResult(float(per_sample[0]), per_sample, p[0], d_sub[0], d_conf[0], d_bank)
    return IdtResult(
        float(per_sample.mean()), per_sample, p, d_sub * inv_n, d_conf * inv_n, d_bank * inv_n
    )


def class_log_likelihood(e: ProbEmbedding, w):
    """Log-likelihood of one prototype ``w`` (K, d) under each sample's Gaussian.

    ``sum_i sum_k -s_ik |f_ik - w_k|^2 / 2 + D/(2K) log(s_ik / 2pi)``, summed
    over the batch. Returns ``(value, d_w)``. Unlike the posterior this needs
    no competing classes, so it is well defined for a single identity.
    """
    sub, conf, _ = _batched(e)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != sub.shape[1:]:
        raise ValueError(f"prototype shape {w.shape} vs sub-embeddings {sub.shape[1:]}")
    K, d = w.shape
    diff = sub - w[None]
    sq = np.sum(diff * diff, axis=-1)
    value = float(np.sum(-0.5 * conf * sq + 0.5 * d * np.log(conf / (2.0 * np.pi))))
    d_w = np.einsum("nk,nkd->kd", conf, diff)
    return value, d_w


def conf_reg(e: ProbEmbedding):
    """Mean squared confidence; returns ``(value, d_conf)`` averaged over the batch."""
    _, conf, single = _batched(e)
    n, K = conf.shape
    value = float(np.mean(np.sum(conf * conf, axis=1) / K))
    d_conf = 2.0 * conf / K / n
    return value, (d_conf[0] if single else d_conf)


# ---------------------------------------------------------------------------
# variation discrimination


def bce_from_probs(p, u):
    """Binary cross-entropy on probabilities, clamped to keep logs finite."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    u = np.asarray(u, dtype=np.float64)
    out = -(u * np.log(p) + (1.0 - u) * np.log1p(-p))
    # exact zero when prediction equals a hard label
    out = np.where((p >= 1.0 - PROB_CLAMP) & (u == 1.0), 0.0, out)
    out = np.where((p <= PROB_CLAMP) & (u == 0.0), 0.0, out)
    return out


def adv_term_from_prob(p):
    """Per-term adversarial penalty ``-(log p + log(1-p)) / 2``, clamped."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -0.5 * (np.log(p) + np.log1p(-p))


def _softplus(z):
    return np.logaddexp(0.0, z)


def _disc_logits(d: Discriminator, e: ProbEmbedding, masks: MaskSet, u):
    sub, _, single = _batched(e)
    u = np.asarray(u, dtype=np.float64)
    u = u[None] if single else u
    V = d.variations
    if masks.count != V:
        raise ValueError(f"{masks.count} masks for {V} discriminator outputs")
    if u.shape != (len(sub), V):
        raise ValueError(f"label vector shape {u.shape} != ({len(sub)}, {V})")
    z = apply_all(masks, sub)  # (n, V, D)
    L = z @ d.weight.T + d.bias  # (n, mask t, output t')
    return z, L, u


def disc_logits(d: Discriminator, e: ProbEmbedding, masks: MaskSet):
    """Logits of every output for every masked view, shape ``(n, V, V)``."""
    sub, _, single = _batched(e)
    z = apply_all(masks, sub)
    L = z @ d.weight.T + d.bias
    return L[0] if single else L


def disc_loss(d: Discriminator, e: ProbEmbedding, masks: MaskSet, u):
    """Discriminator objective; returns ``(loss, dW, db)``. No encoder gradient."""
    z, L, u = _disc_logits(d, e, masks, u)
    n = len(z)
    target = u[:, None, :]  # every mask predicts every variation
    loss = float(np.sum(_softplus(L) - target * L) / n)
    g = (sigmoid(L) - target) / n
    dW = np.einsum("ntv,ntd->vd", g, z)
    db = g.sum(axis=(0, 1))
    return loss, dW, db


def _mask_backprop(masks: MaskSet, dz, K):
    n, V, D = dz.shape
    dzk = dz.reshape(n, V, K, D // K) * masks.masks.astype(np.float64)[None, :, :, None]
    return dzk.sum(axis=1)


def variation_cls_loss(d: Discriminator, e: ProbEmbedding, masks: MaskSet, u):
    """Each masked view must predict its own variation; returns ``(loss, d_sub)``."""
    z, L, u = _disc_logits(d, e, masks, u)
    n, V, D = z.shape
    diag = L[:, np.arange(V), np.arange(V)]
    loss = float(np.sum(_softplus(diag) - u * diag) / n)
    g = np.zeros_like(L)
    g[:, np.arange(V), np.arange(V)] = (sigmoid(diag) - u) / n
    dz = g @ d.weight
    d_sub = _mask_backprop(masks, dz, e.K)
    return loss, (d_sub[0] if e.sub.ndim == 2 else d_sub)


def variation_adv_loss(d: Discriminator, e: ProbEmbedding, masks: MaskSet, u):
    """Each masked view must be uninformative about the other variations.

    Returns ``(loss, d_sub)``. The per-term penalty is minimised at
    probability 0.5 where it equals ``log 2``.
    """
    z, L, u = _disc_logits(d, e, masks, u)
    n, V, D = z.shape
    off = ~np.eye(V, dtype=bool)
    terms = 0.5 * (_softplus(L) + _softplus(-L))
    loss = float(np.sum(terms[:, off]) / n)
    g = np.where(off[None], sigmoid(L) - 0.5, 0.0) / n
    dz = g @ d.weight
    d_sub = _mask_backprop(masks, dz, e.K)
    return loss, (d_sub[0] if e.sub.ndim == 2 else d_sub)


# ---------------------------------------------------------------------------


def total_loss(
    parts: LossBreakdown,
    lambda_reg: float = DEFAULT_LAMBDA_REG,
    lambda_cls: float = DEFAULT_LAMBDA_CLS,
    lambda_adv: float = DEFAULT_LAMBDA_ADV,
) -> float:
    if min(lambda_reg, lambda_cls, lambda_adv) < 0:
        raise ValueError("loss weights must be non-negative")
    return parts.idt + lambda_reg * parts.reg + lambda_cls * parts.cls + lambda_adv * parts.adv
