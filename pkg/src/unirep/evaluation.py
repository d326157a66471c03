"""Verification / identification metrics and sub-embedding diagnostics.

Thresholds are conservative: among all candidate thresholds (every observed
score) we take the smallest whose empirical false-accept rate does not
exceed the target. A score is accepted when it is ``>=`` the threshold.
No interpolation is done.
"""
from __future__ import annotations

import json
from math import comb
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .encoder import EncoderConfig, ProbEmbedding
from .scorer import fuse_arrays, score_matrix

DEFAULT_FARS = (1e-2, 1e-3)
DEFAULT_RANKS = (1, 5)
DEFAULT_FPIRS = (1e-2, 1e-1)
SCORE_CHUNK = 64


def _allowed(target: float, n: int) -> int:
    """Largest k with k / n <= target."""
    k = int(np.floor(target * n))
    while k + 1 <= n and (k + 1) / n <= target:
        k += 1
    while k > 0 and k / n > target:
        k -= 1
    return min(k, n)


def _conservative(pos, pos_ok, neg, target):
    """Rate of accepted-and-correct positives at the conservative threshold."""
    neg = np.sort(np.asarray(neg, dtype=np.float64))[::-1]
    pos = np.asarray(pos, dtype=np.float64)
    k = _allowed(target, len(neg))
    if k >= len(neg):
        cand = np.concatenate([pos, neg])
        return float(np.mean(pos_ok)), float(cand.min())
    cut = neg[k]
    cand = np.concatenate([pos, neg])
    above = cand[cand > cut]
    thr = float(above.min()) if above.size else float("inf")
    return float(np.mean((pos > cut) & pos_ok)), thr


def tar_at_far(genuine, impostor, far_targets=DEFAULT_FARS):
    """True-accept rate at each false-accept target; returns a list."""
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.asarray(impostor, dtype=np.float64)
    if genuine.size == 0 or impostor.size == 0:
        raise ValueError("need nonempty genuine and impostor scores")
    ok = np.ones(genuine.shape, dtype=bool)
    return [_conservative(genuine, ok, impostor, f)[0] for f in far_targets]


def roc_curve(genuine, impostor):
    """ROC points ``(far, tar)`` for every distinct threshold, highest first."""
    genuine = np.sort(np.asarray(genuine, dtype=np.float64))
    impostor = np.sort(np.asarray(impostor, dtype=np.float64))
    thr = np.unique(np.concatenate([genuine, impostor]))[::-1]
    tar = (len(genuine) - np.searchsorted(genuine, thr, side="left")) / len(genuine)
    far = (len(impostor) - np.searchsorted(impostor, thr, side="left")) / len(impostor)
    far = np.concatenate([[0.0], far])
    tar = np.concatenate([[0.0], tar])
    return far, tar, np.concatenate([[np.inf], thr])


def rank_order(scores):
    """Gallery indices sorted by descending score, ties by gallery index."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), axis=-1, kind="stable")


def true_rank(scores, probe_labels, gallery_labels):
    """0-based rank of each probe's true identity in its sorted gallery list."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    gallery_labels = np.asarray(gallery_labels)
    if len(np.unique(gallery_labels)) != len(gallery_labels):
        raise ValueError("gallery labels must be unique")
    pos = {int(g): i for i, g in enumerate(gallery_labels)}
    order = rank_order(scores)
    ranks = np.empty(len(scores), dtype=np.int64)
    for p, lab in enumerate(np.asarray(probe_labels)):
        if int(lab) not in pos:
            raise ValueError(f"probe identity {int(lab)} not in gallery")
        ranks[p] = int(np.nonzero(order[p] == pos[int(lab)])[0][0])
    return ranks


def rank_k_from_scores(scores, probe_labels, gallery_labels, ks=DEFAULT_RANKS):
    ranks = true_rank(scores, probe_labels, gallery_labels)
    return [float(np.mean(ranks < k)) for k in ks]


def rank_k(probes: ProbEmbedding, probe_labels, gallery: ProbEmbedding, gallery_labels,
           ks=DEFAULT_RANKS, score_fn="cosine"):
    if callable(score_fn):
        scores = score_fn(probes, gallery)
    else:
        scores = score_matrix(probes, gallery, score_fn)
    return rank_k_from_scores(scores, probe_labels, gallery_labels, ks)


def open_set_scores(scores, probe_labels, gallery_labels):
    """Split a probe x gallery score matrix into mated and non-mated parts.

    Returns ``(mated_scores, mated_rank1, nonmated_max)``; mated scores are
    the probe's score against its own gallery template.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    gallery_labels = np.asarray(gallery_labels)
    probe_labels = np.asarray(probe_labels)
    pos = {int(g): i for i, g in enumerate(gallery_labels)}
    mated = np.array([int(l) in pos for l in probe_labels], dtype=bool)
    order = rank_order(scores)
    idx = np.array([pos[int(l)] for l in probe_labels[mated]], dtype=np.int64)
    mated_scores = scores[mated][np.arange(mated.sum()), idx]
    mated_rank1 = order[mated][:, 0] == idx
    nonmated_max = scores[~mated].max(axis=1) if (~mated).any() else np.zeros(0)
    return mated_scores, mated_rank1, nonmated_max


def tpir_at_fpir(mated_scores, mated_rank1, nonmated_max, fpir_targets=DEFAULT_FPIRS):
    """Open-set hit rate: above threshold and correct at rank 1."""
    mated_scores = np.asarray(mated_scores, dtype=np.float64)
    nonmated_max = np.asarray(nonmated_max, dtype=np.float64)
    if nonmated_max.size == 0:
        raise ValueError("need at least one non-mated probe")
    if mated_scores.size == 0:
        raise ValueError("need at least one mated probe")
    ok = np.asarray(mated_rank1, dtype=bool)
    return [_conservative(mated_scores, ok, nonmated_max, f)[0] for f in fpir_targets]


# ---------------------------------------------------------------------------
# correlation analysis


@dataclass
class CorrelationResult:
    matrix: np.ndarray
    degenerate: list

    @property
    def mean_abs_offdiag(self) -> float:
        K = len(self.matrix)
        if K < 2:
            return 0.0
        off = ~np.eye(K, dtype=bool)
        return float(np.mean(np.abs(self.matrix[off])))


def distances_to_center(sub, labels):
    """Per-sample, per-group distance to the normalised class mean."""
    sub = np.asarray(sub, dtype=np.float64)
    labels = np.asarray(labels)
    out = np.empty(sub.shape[:2])
    for c in np.unique(labels):
        sel = labels == c
        center = sub[sel].mean(axis=0)
        norm = np.linalg.norm(center, axis=-1, keepdims=True)
        center = np.divide(center, norm, out=np.zeros_like(center), where=norm > 0)
        out[sel] = np.linalg.norm(sub[sel] - center[None], axis=-1)
    return out


def subembedding_correlation(sub, labels) -> CorrelationResult:
    """K x K correlation of the distance-to-class-center variables."""
    sub = np.asarray(sub, dtype=np.float64)
    labels = np.asarray(labels)
    uniq, counts = np.unique(labels, return_counts=True)
    if np.sum(counts >= 2) < 2:
        raise ValueError("need at least two classes with two or more samples")
    d = distances_to_center(sub, labels)
    K = d.shape[1]
    d = d - d.mean(axis=0)
    std = np.sqrt(np.mean(d * d, axis=0))
    degenerate = [int(k) for k in np.nonzero(std <= 1e-12 * max(1.0, float(np.max(std))))[0]]
    safe = np.where(std > 0, std, 1.0)
    z = d / safe
    m = (z.T @ z) / len(z)
    m = np.clip((m + m.T) / 2.0, -1.0, 1.0)
    for k in degenerate:
        m[k, :] = 0.0
        m[:, k] = 0.0
    m[np.arange(K), np.arange(K)] = 1.0
    return CorrelationResult(m, degenerate)


# ---------------------------------------------------------------------------
# desk evaluation protocol


def _finite_or_null(obj):
    if isinstance(obj, dict):
        return {k: _finite_or_null(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite_or_null(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


@dataclass
class EvalReport:
    method: str
    far_targets: list
    tar: list
    tar_corrupted: list
    ranks: list
    rank_acc: list
    fpir_targets: list
    tpir: list
    correlation: list
    mean_abs_corr: float
    roc: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "method": self.method,
            "verification": {
                "tar_at_far": {f"{f:g}": t for f, t in zip(self.far_targets, self.tar)},
                "tar_at_far_corrupted": {f"{f:g}": t for f, t in zip(self.far_targets, self.tar_corrupted)},
            },
            "identification": {"rank": {str(k): a for k, a in zip(self.ranks, self.rank_acc)}},
            "open_set": {"tpir_at_fpir": {f"{f:g}": t for f, t in zip(self.fpir_targets, self.tpir)}},
            "correlation": {"matrix": self.correlation, "mean_abs_offdiag": self.mean_abs_corr},
            "counts": self.counts,
        }

    def to_json(self) -> str:
        # undefined rates (e.g. no corrupted pairs) become null, not NaN
        return json.dumps(_finite_or_null(self.to_dict()), indent=2, sort_keys=True, allow_nan=False) + "\n"

    def to_text(self) -> str:
        rows = [("method", self.method)]
        rows += [(f"TAR@FAR={f:g}", f"{t:.4f}") for f, t in zip(self.far_targets, self.tar)]
        rows += [(f"TAR@FAR={f:g} (corrupted)", f"{t:.4f}") for f, t in zip(self.far_targets, self.tar_corrupted)]
        rows += [(f"rank-{k}", f"{a:.4f}") for k, a in zip(self.ranks, self.rank_acc)]
        rows += [(f"TPIR@FPIR={f:g}", f"{t:.4f}") for f, t in zip(self.fpir_targets, self.tpir)]
        rows.append(("mean |corr| off-diagonal", f"{self.mean_abs_corr:.4f}"))
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows) + "\n"

    def roc_csv(self) -> str:
        return "far,tar\n" + "".join(f"{repr(float(f))},{repr(float(t))}\n" for f, t in self.roc)


def _chunked_scores(a: ProbEmbedding, b: ProbEmbedding, method: str, threads: int = 1):
    chunks = [slice(i, min(i + SCORE_CHUNK, len(a))) for i in range(0, len(a), SCORE_CHUNK)]

    def run(sl):
        return score_matrix(a[sl], b, method)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(sl) for sl in chunks]
    return np.concatenate(parts, axis=0)


def verification_scores(e: ProbEmbedding, labels, method: str, threads: int = 1, subset=None):
    """Genuine/impostor scores over all unordered pairs (optionally filtered)."""
    S = _chunked_scores(e, e, method, threads)
    iu, ju = np.triu_indices(len(labels), k=1)
    same = labels[iu] == labels[ju]
    keep = np.ones(len(iu), dtype=bool) if subset is None else subset[iu] | subset[ju]
    vals = S[iu, ju]
    return vals[same & keep], vals[~same & keep]


def _templates(e: ProbEmbedding, labels, mask, method):
    ids = np.unique(labels[mask])
    subs, confs = [], []
    for i in ids:
        sel = mask & (labels == i)
        conf = e.conf[sel] if method == "mls" else np.ones_like(e.conf[sel])
        t = fuse_arrays(e.sub[sel], conf)
        subs.append(t.sub)
        confs.append(t.conf if method == "mls" else e.conf[sel].sum(axis=0))
    return ProbEmbedding(np.array(subs), np.array(confs)), ids


def evaluate_embeddings(e: ProbEmbedding, labels, gallery_mask, corrupted, method: str,
                        far_targets=DEFAULT_FARS, ranks=DEFAULT_RANKS, fpir_targets=DEFAULT_FPIRS,
                        threads: int = 1) -> EvalReport:
    labels = np.asarray(labels)
    gen, imp = verification_scores(e, labels, method, threads)
    gen_c, imp_c = verification_scores(e, labels, method, threads, subset=corrupted)
    tar = tar_at_far(gen, imp, far_targets)
    tar_c = tar_at_far(gen_c, imp_c, far_targets) if len(gen_c) and len(imp_c) else [float("nan")] * len(far_targets)
    far, tr, _ = roc_curve(gen, imp)

    gallery, gids = _templates(e, labels, gallery_mask, method)
    probe_sel = ~gallery_mask
    probes = e[probe_sel]
    plabels = labels[probe_sel]
    S = _chunked_scores(probes, gallery, method, threads)
    rank_acc = rank_k_from_scores(S, plabels, gids, ranks)

    # open set: even-position identities enrolled, odd-position ones are non-mated
    enrolled = gids[::2]
    cols = np.isin(gids, enrolled)
    mated_s, mated_r1, nonmated = open_set_scores(S[:, cols], plabels, gids[cols])
    tpir = tpir_at_fpir(mated_s, mated_r1, nonmated, fpir_targets) if nonmated.size else [float("nan")] * len(fpir_targets)

    corr = subembedding_correlation(e.sub, labels)
    return EvalReport(
        method=method,
        far_targets=list(far_targets),
        tar=tar,
        tar_corrupted=tar_c,
        ranks=list(ranks),
        rank_acc=rank_acc,
        fpir_targets=list(fpir_targets),
        tpir=tpir,
        correlation=corr.matrix.tolist(),
        mean_abs_corr=corr.mean_abs_offdiag,
        roc=list(zip(far.tolist(), tr.tolist())),
        counts={
            "genuine": int(len(gen)), "impostor": int(len(imp)),
            "genuine_corrupted": int(len(gen_c)), "impostor_corrupted": int(len(imp_c)),
            "probes": int(probe_sel.sum()), "gallery": int(len(gids)),
        },
    )


def evaluate(bundle, dataset, pa: bool = False, threads: int = 1, **kw) -> EvalReport:
    """Run the desk protocol on the test split of ``dataset``."""
    from .trainer import embed

    split = dataset.test
    e = embed(bundle, split.X, threads=threads)
    method = "mls" if pa else "cosine"
    return evaluate_embeddings(e, split.y, split.gallery, split.corrupted, method, threads=threads, **kw)


def sweep_group_count(dataset, model_cfg: EncoderConfig, train_cfg, K_list, pa: bool = False,
                      finetune=None):
    """Train and evaluate one model per group count with a shared seed.

    Returns one dict per K with TARs, rank accuracies and the mean absolute
    sub-embedding correlation. Group counts too small to give every variation
    its own mask are trained without the decorrelation losses (``de`` = 0).
    """
    from .trainer import finetune_confidence, genuine_pairs, train

    for K in K_list:
        if model_cfg.embedding_dim % K:
            raise ValueError(f"K={K} does not divide embedding_dim={model_cfg.embedding_dim}")
    rows = []
    V = dataset.train.u.shape[1]
    for K in K_list:
        # too few groups for distinct masks: that row runs without decorrelation
        de = bool(train_cfg.de and comb(K, K // 2) >= V)
        bundle = train(dataset, replace(model_cfg, group_count=K), replace(train_cfg, de=de))
        if pa and finetune is not None:
            bundle = finetune_confidence(bundle, genuine_pairs(dataset, finetune.get("pairs", 500), train_cfg.seed),
                                         finetune.get("epochs", 100), finetune.get("lr", 0.5))
        rep = evaluate(bundle, dataset, pa=pa)
        row = {"K": K, "de": int(de)}
        row.update({f"tar@{f:g}": t for f, t in zip(rep.far_targets, rep.tar)})
        row.update({f"rank{k}": a for k, a in zip(rep.ranks, rep.rank_acc)})
        row["mean_abs_corr"] = rep.mean_abs_corr
        rows.append(row)
    return rows


def rows_to_csv(rows) -> str:
    if not rows:
        return ""
    keys = list(rows[0])
    lines = [",".join(keys)]
    for r in rows:
        lines.append(",".join(repr(float(r[k])) if isinstance(r[k], float) else str(r[k]) for k in keys))
    return "\n".join(lines) + "\n"
