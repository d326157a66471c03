"""Dense numerics shared by every module.

Everything here works in float64. Degenerate inputs (zero-norm vectors,
non-finite function values) raise instead of being silently patched.
"""
from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np


class DegenerateInputError(ValueError):
    """Raised when an operation is undefined for its input (e.g. zero norm)."""


class NumericalDivergence(FloatingPointError):
    """A loss term or function value became non-finite."""

    def __init__(self, term: str, detail: str = ""):
        self.term = term
        msg = f"non-finite value in {term}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


# ---------------------------------------------------------------------------
# normalisation and stable reductions


def l2_normalize(v, axis=-1):
    """Scale ``v`` to unit norm along ``axis``.

    Returns ``(u, norm)`` where ``norm`` keeps the reduced axis so that the
    caller can reuse it for the backward pass.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = np.sqrt(np.sum(v * v, axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise DegenerateInputError("cannot normalize a zero-norm vector")
    return v / norm, norm


def l2_normalize_jvp(u, norm, upstream, axis=-1):
    """Backprop ``upstream`` through ``u = v / ||v||``.

    Applies ``(I - u u^T) / ||v||`` along ``axis``; ``u`` and ``norm`` are the
    outputs of :func:`l2_normalize`.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    proj = np.sum(u * upstream, axis=axis, keepdims=True)
    return (upstream - u * proj) / norm


def logsumexp(x, axis=-1, keepdims=False):
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return out


def log_softmax(logits, axis=-1):
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericalDivergence("log_softmax", "logits must be finite")
    return logits - logsumexp(logits, axis=axis, keepdims=True)


def softmax(logits, axis=-1):
    return np.exp(log_softmax(logits, axis=axis))


def log_sigmoid(z):
    """``log(sigmoid(z))`` without overflow for large ``|z|``."""
    return -np.logaddexp(0.0, -np.asarray(z, dtype=np.float64))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.exp(log_sigmoid(z))


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5):
    """Central-difference gradient of a scalar function ``f`` at ``x``.

    ``x`` may have any shape; the result has the same shape.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            idx = tuple(int(j) for j in np.unravel_index(i, x.shape))
            raise NumericalDivergence("finite_diff_grad", f"f not finite at coordinate {idx}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(a, b, floor: float = 1e-12) -> float:
    """Largest elementwise deviation scaled by the larger of the two inf-norms."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), floor)
    return float(np.max(np.abs(a - b)) / scale)


# ---------------------------------------------------------------------------
# randomness


class RngStream:
    """Reproducible random stream keyed by ``(seed, label)``.

    Backed by the counter-based Philox generator; the key is derived from a
    SHA-256 digest of the seed and label so substreams never overlap and the
    sequence does not depend on platform or call order elsewhere.
    """

    def __init__(self, seed: int, label: str = "root"):
        self.seed = int(seed)
        self.label = str(label)
        digest = hashlib.sha256(f"{self.seed & (2**64 - 1)}/{self.label}".encode()).digest()
        key = int.from_bytes(digest[:16], "little")
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def substream(self, label: str) -> "RngStream":
        return RngStream(self.seed, f"{self.label}/{label}")

    def __repr__(self):
        return f"RngStream(seed={self.seed}, label={self.label!r})"

    # thin pass-throughs used across the package
    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def random(self, size=None):
        return self.generator.random(size)

    def permutation(self, n):
        return self.generator.permutation(n)
