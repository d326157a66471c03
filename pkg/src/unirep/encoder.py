"""Fully connected encoder with an embedding head and a confidence head.

The embedding head output (width D) is split into K equal groups, each
L2-normalised on its own. The confidence head output (width K) goes
through ``exp`` so every confidence is strictly positive.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .numerics import RngStream, l2_normalize, l2_normalize_jvp

_NONLINEARITIES = {
    "tanh": (np.tanh, lambda pre, out: 1.0 - out * out),
    "softplus": (
        lambda z: np.logaddexp(0.0, z),
        lambda pre, out: 0.5 * (1.0 + np.tanh(0.5 * pre)),
    ),
    "identity": (lambda z: z, lambda pre, out: np.ones_like(pre)),
}


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 64
    hidden: tuple = (64,)
    embedding_dim: int = 64
    group_count: int = 8
    nonlinearity: str = "tanh"
    init_confidence: float = 8.0
    conf_weight_scale: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.embedding_dim < 1:
            raise ValueError("input_dim and embedding_dim must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be >= 1")
        if self.group_count < 1:
            raise ValueError("group_count must be >= 1")
        if self.embedding_dim % self.group_count:
            raise ValueError(
                f"embedding_dim={self.embedding_dim} not divisible by group_count={self.group_count}"
            )
        if self.nonlinearity not in _NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.init_confidence <= 0:
            raise ValueError("init_confidence must be positive")

    @property
    def group_dim(self) -> int:
        return self.embedding_dim // self.group_count

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class EncoderParams:
    config: EncoderConfig
    arrays: dict = field(default_factory=dict)

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def __getitem__(self, name):
        return self.arrays[name]

    def names(self):
        return list(self.arrays)


@dataclass
class ProbEmbedding:
    """K unit-norm sub-embeddings and K positive confidences.

    ``sub`` has shape ``(..., K, D/K)`` and ``conf`` shape ``(..., K)``; a
    leading batch axis is optional.
    """

    sub: np.ndarray
    conf: np.ndarray

    def __post_init__(self):
        self.sub = np.asarray(self.sub, dtype=np.float64)
        self.conf = np.asarray(self.conf, dtype=np.float64)
        if self.sub.shape[:-1] != self.conf.shape:
            raise ValueError(f"sub {self.sub.shape} and conf {self.conf.shape} disagree")

    @property
    def K(self) -> int:
        return self.sub.shape[-2]

    @property
    def dim(self) -> int:
        return self.sub.shape[-2] * self.sub.shape[-1]

    @property
    def sigma2(self):
        return 1.0 / self.conf

    @property
    def vector(self):
        return self.sub.reshape(self.sub.shape[:-2] + (self.dim,))

    def __len__(self):
        return self.sub.shape[0] if self.sub.ndim == 3 else 1

    def __getitem__(self, idx):
        if self.sub.ndim != 3:
            raise TypeError("indexing requires a batched embedding")
        return ProbEmbedding(self.sub[idx], self.conf[idx])

    @classmethod
    def from_vector(cls, vec, conf, normalize=True):
        conf = np.asarray(conf, dtype=np.float64)
        K = conf.shape[-1]
        vec = np.asarray(vec, dtype=np.float64)
        sub = vec.reshape(vec.shape[:-1] + (K, vec.shape[-1] // K))
        if normalize:
            sub, _ = l2_normalize(sub)
        return cls(sub, conf)


@dataclass
class Tape:
    """Activations saved by :func:`forward`, consumed by :func:`backward`."""

    inputs: list
    pre: list
    hidden_out: np.ndarray
    emb_norm: np.ndarray
    sub: np.ndarray
    conf: np.ndarray
    squeeze: bool


def init_encoder(config: EncoderConfig, rng: RngStream) -> EncoderParams:
    arrays = {}
    fan_in = config.input_dim
    for i, width in enumerate(config.hidden):
        arrays[f"hidden.{i}.weight"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (width, fan_in))
        arrays[f"hidden.{i}.bias"] = np.zeros(width)
        fan_in = width
    arrays["emb.weight"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (config.embedding_dim, fan_in))
    arrays["emb.bias"] = np.zeros(config.embedding_dim)
    arrays["conf.weight"] = rng.normal(
        0.0, config.conf_weight_scale / np.sqrt(fan_in), (config.group_count, fan_in)
    )
    arrays["conf.bias"] = np.full(config.group_count, np.log(config.init_confidence))
    return EncoderParams(config, arrays)


def forward(params: EncoderParams, x):
    """Encode ``x`` of shape ``(D_obs,)`` or ``(n, D_obs)``.

    Returns ``(ProbEmbedding, Tape)``.
    """
    cfg = params.config
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ValueError(f"expected input of width {cfg.input_dim}, got shape {x.shape}")
    act, _ = _NONLINEARITIES[cfg.nonlinearity]
    inputs, pre = [], []
    h = x
    for i in range(len(cfg.hidden)):
        inputs.append(h)
        z = h @ params[f"hidden.{i}.weight"].T + params[f"hidden.{i}.bias"]
        pre.append(z)
        h = act(z)
    v = h @ params["emb.weight"].T + params["emb.bias"]
    v = v.reshape(len(x), cfg.group_count, cfg.group_dim)
    sub, norm = l2_normalize(v)
    conf = np.exp(h @ params["conf.weight"].T + params["conf.bias"])
    tape = Tape(inputs, pre, h, norm, sub, conf, squeeze)
    if squeeze:
        return ProbEmbedding(sub[0], conf[0]), tape
    return ProbEmbedding(sub, conf), tape


def backward(params: EncoderParams, tape: Tape, d_sub, d_conf=None) -> dict:
    """Parameter gradients given upstream gradients on sub-embeddings/confidences.

    Gradients are summed over the batch.
    """
    if tape is None:
        raise ValueError("backward requires the tape returned by forward")
    cfg = params.config
    n = tape.sub.shape[0]
    d_sub = np.asarray(d_sub, dtype=np.float64).reshape(n, cfg.group_count, cfg.group_dim)
    if d_conf is None:
        d_conf = np.zeros((n, cfg.group_count))
    d_conf = np.asarray(d_conf, dtype=np.float64).reshape(n, cfg.group_count)

    grads = {}
    dv = l2_normalize_jvp(tape.sub, tape.emb_norm, d_sub).reshape(n, cfg.embedding_dim)
    dc = d_conf * tape.conf
    h = tape.hidden_out
    grads["emb.weight"] = dv.T @ h
    grads["emb.bias"] = dv.sum(axis=0)
    grads["conf.weight"] = dc.T @ h
    grads["conf.bias"] = dc.sum(axis=0)
    dh = dv @ params["emb.weight"] + dc @ params["conf.weight"]

    _, dact = _NONLINEARITIES[cfg.nonlinearity]
    for i in reversed(range(len(cfg.hidden))):
        out = h
        dz = dh * dact(tape.pre[i], out)
        inp = tape.inputs[i]
        grads[f"hidden.{i}.weight"] = dz.T @ inp
        grads[f"hidden.{i}.bias"] = dz.sum(axis=0)
        dh = dz @ params[f"hidden.{i}.weight"]
        h = inp
    return {k: grads[k] for k in params.arrays}
