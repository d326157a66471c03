"""Pairwise similarity between probabilistic embeddings."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .encoder import ProbEmbedding
from .numerics import l2_normalize

SIGMA2_FLOOR = 1e-6


@dataclass(frozen=True)
class PairScore:
    value: float
    method: str


def _sigma2(conf):
    return np.maximum(1.0 / np.asarray(conf, dtype=np.float64), SIGMA2_FLOOR)


def _check_pair(a: ProbEmbedding, b: ProbEmbedding):
    if a.sub.shape[-2:] != b.sub.shape[-2:]:
        raise ValueError(f"group layout mismatch: {a.sub.shape[-2:]} vs {b.sub.shape[-2:]}")


def pair_score_mls(a: ProbEmbedding, b: ProbEmbedding, D: int | None = None) -> PairScore:
    """Uncertainty-weighted likelihood score.

    ``-1/2 sum_k |f_a - f_b|^2 / (s2_a + s2_b) - D/(2K) sum_k log(s2_a + s2_b)``
    where ``s2 = 1/confidence``. ``D`` defaults to the full embedding width.
    """
    _check_pair(a, b)
    K = a.K
    D = a.dim if D is None else D
    var = _sigma2(a.conf) + _sigma2(b.conf)
    dist = np.sum((a.sub - b.sub) ** 2, axis=-1)
    value = -0.5 * np.sum(dist / var) - D / (2.0 * K) * np.sum(np.log(var))
    return PairScore(float(value), "mls")


def pair_score_cosine(a: ProbEmbedding, b: ProbEmbedding) -> PairScore:
    _check_pair(a, b)
    return PairScore(float(np.mean(np.sum(a.sub * b.sub, axis=-1))), "cosine")


def fuse_template(members) -> ProbEmbedding:
    """Precision-weighted fusion of a set of embeddings into one."""
    members = list(members)
    if not members:
        raise ValueError("cannot fuse an empty template")
    sub = np.stack([m.sub for m in members])
    conf = np.stack([m.conf for m in members])
    if sub.ndim != 3:
        raise ValueError("template members must be single embeddings")
    return fuse_arrays(sub, conf)


def fuse_arrays(sub, conf) -> ProbEmbedding:
    """Fuse stacked members ``sub`` (m, K, d) with confidences ``conf`` (m, K)."""
    weighted = np.sum(sub * conf[:, :, None], axis=0) / np.sum(conf, axis=0)[:, None]
    norm = np.linalg.norm(weighted, axis=-1)
    cancelled = norm <= 1e-12
    if np.any(cancelled):
        # members cancel out (e.g. +1 and -1 for length-1 groups): keep the
        # most confident member's direction, first one on ties
        best = np.argmax(conf, axis=0)
        weighted[cancelled] = sub[best[cancelled], np.nonzero(cancelled)[0]]
    direction, _ = l2_normalize(weighted)
    return ProbEmbedding(direction, np.sum(conf, axis=0))


# ---------------------------------------------------------------------------
# batched score matrices (used by evaluation)


def cosine_matrix(a: ProbEmbedding, b: ProbEmbedding):
    _check_pair(a, b)
    return np.einsum("ikd,jkd->ij", a.sub, b.sub) / a.K


def mls_matrix(a: ProbEmbedding, b: ProbEmbedding, D: int | None = None):
    _check_pair(a, b)
    K = a.K
    D = a.dim if D is None else D
    var = _sigma2(a.conf)[:, None, :] + _sigma2(b.conf)[None, :, :]
    na = np.sum(a.sub * a.sub, axis=-1)
    nb = np.sum(b.sub * b.sub, axis=-1)
    dot = np.einsum("ikd,jkd->ijk", a.sub, b.sub)
    dist = np.maximum(na[:, None, :] + nb[None, :, :] - 2.0 * dot, 0.0)
    return -0.5 * np.sum(dist / var, axis=-1) - D / (2.0 * K) * np.sum(np.log(var), axis=-1)


def score_matrix(a: ProbEmbedding, b: ProbEmbedding, method: str):
    if method == "mls":
        return mls_matrix(a, b)
    if method == "cosine":
        return cosine_matrix(a, b)
    raise ValueError(f"unknown score method {method!r}")


# ---------------------------------------------------------------------------
# embedding export


def export_embeddings(path, ids, e: ProbEmbedding, fmt: str = "csv"):
    """One record per sample: id, K, D, sub-embedding values, sigma^2 values."""
    ids = [int(i) for i in ids]
    n, K, d = e.sub.shape
    flat = e.sub.reshape(n, K * d)
    s2 = 1.0 / e.conf
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "K", "D"] + [f"f_{i}" for i in range(K * d)] + [f"sigma2_{k}" for k in range(K)])
            for i in range(n):
                w.writerow([ids[i], K, K * d] + [repr(float(v)) for v in flat[i]] + [repr(float(v)) for v in s2[i]])
    elif fmt == "bin":
        with open(path, "wb") as fh:
            fh.write(struct.pack("<III", n, K, K * d))
            fh.write(np.asarray(ids, dtype="<i8").tobytes())
            fh.write(flat.astype("<f8").tobytes())
            fh.write(s2.astype("<f8").tobytes())
    else:
        raise ValueError(f"unknown format {fmt!r}")


def import_embeddings(path, fmt: str = "csv"):
    """Inverse of :func:`export_embeddings`; returns ``(ids, ProbEmbedding)``."""
    if fmt == "csv":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            rows = list(reader)
        if not rows:
            raise ValueError(f"{path}: no records")
        K, D = int(rows[0][1]), int(rows[0][2])
        ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
        vals = np.array([[float(v) for v in r[3:]] for r in rows])
        flat, s2 = vals[:, :D], vals[:, D:]
    elif fmt == "bin":
        with open(path, "rb") as fh:
            n, K, D = struct.unpack("<III", fh.read(12))
            ids = np.frombuffer(fh.read(8 * n), dtype="<i8").astype(np.int64)
            flat = np.frombuffer(fh.read(8 * n * D), dtype="<f8").reshape(n, D).astype(np.float64)
            s2 = np.frombuffer(fh.read(8 * n * K), dtype="<f8").reshape(n, K).astype(np.float64)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    n = len(ids)
    return ids, ProbEmbedding(flat.reshape(n, K, D // K), 1.0 / s2)


def score_record(a: ProbEmbedding, b: ProbEmbedding):
    """JSON-ready pair of scores for two single embeddings."""
    return {"cosine": pair_score_cosine(a, b).value, "mls": pair_score_mls(a, b).value}
