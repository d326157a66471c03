"""Brute-force reference implementations for tests.

Everything here is straight-line Python over nested lists: naive sums, no
log-sum-exp, no vectorisation and no imports from the rest of the package.
They are only meant for tiny instances (a few dozen samples, a handful of
classes and groups).
"""
from __future__ import annotations

import math


def _lst(a):
    return a.tolist() if hasattr(a, "tolist") else a


def _dot(a, b):
    s = 0.0
    for x, y in zip(a, b):
        s += x * y
    return s


def _sqdist(a, b):
    s = 0.0
    for x, y in zip(a, b):
        s += (x - y) * (x - y)
    return s


# ---------------------------------------------------------------------------
# identification


def oracle_logits(sub, conf, W):
    """``sub``: n x K x d, ``conf``: n x K, ``W``: N x K x d."""
    sub, conf, W = _lst(sub), _lst(conf), _lst(W)
    out = []
    for f, s in zip(sub, conf):
        K = len(f)
        row = []
        for w in W:
            a = 0.0
            for k in range(K):
                a += s[k] * _dot(w[k], f[k])
            row.append(a / K)
        out.append(row)
    return out


def oracle_posterior(sub, conf, W, y=None, margin=0.0):
    logits = oracle_logits(sub, conf, W)
    out = []
    for i, row in enumerate(logits):
        row = list(row)
        if y is not None:
            row[int(_lst(y)[i])] -= margin
        ex = [math.exp(a) for a in row]
        z = sum(ex)
        out.append([v / z for v in ex])
    return out


def oracle_idt_loss(sub, conf, W, y, margin=0.0):
    p = oracle_posterior(sub, conf, W, y, margin)
    y = _lst(y)
    return sum(-math.log(p[i][int(y[i])]) for i in range(len(p))) / len(p)


def oracle_idt_grads(sub, conf, W, y, margin=0.0):
    """Closed-form per-sample gradients wrt prototypes and sub-embeddings.

    Returns ``(dW, dF)`` for the batch-mean loss: ``dW`` is N x K x d and
    ``dF`` is n x K x d.
    """
    sub, conf, W, y = _lst(sub), _lst(conf), _lst(W), _lst(y)
    p = oracle_posterior(sub, conf, W, y, margin)
    n, N, K, d = len(sub), len(W), len(W[0]), len(W[0][0])
    dW = [[[0.0] * d for _ in range(K)] for _ in range(N)]
    dF = [[[0.0] * d for _ in range(K)] for _ in range(n)]
    for i in range(n):
        for j in range(N):
            g = p[i][j] - (1.0 if j == int(y[i]) else 0.0)
            for k in range(K):
                c = conf[i][k] * g / K / n
                for t in range(d):
                    dW[j][k][t] += c * sub[i][k][t]
                    dF[i][k][t] += c * W[j][k][t]
    return dW, dF


def oracle_conf_reg(conf):
    conf = _lst(conf)
    total = 0.0
    for s in conf:
        total += sum(v * v for v in s) / len(s)
    return total / len(conf)


# ---------------------------------------------------------------------------
# variation discrimination


def _sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def _masked(sub, mask):
    flat = []
    for k, f in enumerate(sub):
        flat.extend(v * mask[k] for v in f)
    return flat


def _disc_probs(sub, masks, Wd, bd):
    """probs[i][t][v]: output v for sample i seen through mask t."""
    sub, masks, Wd, bd = _lst(sub), _lst(masks), _lst(Wd), _lst(bd)
    out = []
    for f in sub:
        per_mask = []
        for m in masks:
            z = _masked(f, m)
            per_mask.append([_sigmoid(_dot(w, z) + b) for w, b in zip(Wd, bd)])
        out.append(per_mask)
    return out


def _bce(p, u):
    return -(u * math.log(p) + (1.0 - u) * math.log(1.0 - p))


def oracle_disc_loss(sub, masks, Wd, bd, u):
    P = _disc_probs(sub, masks, Wd, bd)
    u = _lst(u)
    total = 0.0
    for i, per_mask in enumerate(P):
        for probs in per_mask:
            for v, p in enumerate(probs):
                total += _bce(p, u[i][v])
    return total / len(P)


def oracle_cls_loss(sub, masks, Wd, bd, u):
    P = _disc_probs(sub, masks, Wd, bd)
    u = _lst(u)
    total = 0.0
    for i, per_mask in enumerate(P):
        for t in range(len(per_mask)):
            total += _bce(per_mask[t][t], u[i][t])
    return total / len(P)


def oracle_adv_loss(sub, masks, Wd, bd):
    P = _disc_probs(sub, masks, Wd, bd)
    total = 0.0
    for per_mask in P:
        for t, probs in enumerate(per_mask):
            for v, p in enumerate(probs):
                if v != t:
                    total += -0.5 * (math.log(p) + math.log(1.0 - p))
    return total / len(P)


def oracle_total(idt, reg, cls, adv, lambda_reg, lambda_cls, lambda_adv):
    return idt + lambda_reg * reg + lambda_cls * cls + lambda_adv * adv


# ---------------------------------------------------------------------------
# scoring


def oracle_mls(fa, sa, fb, sb, D=None):
    """``fa``/``fb``: K x d sub-embeddings, ``sa``/``sb``: K confidences."""
    fa, sa, fb, sb = _lst(fa), _lst(sa), _lst(fb), _lst(sb)
    K = len(fa)
    if D is None:
        D = K * len(fa[0])
    total = 0.0
    for k in range(K):
        var = max(1.0 / sa[k], 1e-6) + max(1.0 / sb[k], 1e-6)
        total += -0.5 * _sqdist(fa[k], fb[k]) / var - D / (2.0 * K) * math.log(var)
    return total


def oracle_cosine(fa, fb):
    fa, fb = _lst(fa), _lst(fb)
    return sum(_dot(a, b) for a, b in zip(fa, fb)) / len(fa)


def oracle_fuse(subs, confs):
    subs, confs = _lst(subs), _lst(confs)
    K, d = len(subs[0]), len(subs[0][0])
    out_f, out_s = [], []
    for k in range(K):
        ssum = sum(c[k] for c in confs)
        v = [sum(c[k] * f[k][t] for f, c in zip(subs, confs)) / ssum for t in range(d)]
        norm = math.sqrt(sum(x * x for x in v))
        out_f.append([x / norm for x in v])
        out_s.append(ssum)
    return out_f, out_s


# ---------------------------------------------------------------------------
# metrics by exhaustive threshold enumeration


def _best_threshold(neg, candidates, target):
    """Smallest candidate threshold whose false-accept rate is within target."""
    best = math.inf
    for t in candidates:
        fa = sum(1 for v in neg if v >= t)
        if fa / len(neg) <= target and t < best:
            best = t
    return best


def oracle_tar_at_far(genuine, impostor, target):
    genuine, impostor = [float(v) for v in _lst(genuine)], [float(v) for v in _lst(impostor)]
    t = _best_threshold(impostor, genuine + impostor, target)
    return sum(1 for v in genuine if v >= t) / len(genuine)


def oracle_rank(scores_row, true_index):
    """0-based rank; ties are broken in favour of the lower gallery index."""
    row = [float(v) for v in _lst(scores_row)]
    mine = row[true_index]
    r = 0
    for j, v in enumerate(row):
        if v > mine or (v == mine and j < true_index):
            r += 1
    return r


def oracle_rank_k(scores, probe_labels, gallery_labels, k):
    scores, probe_labels, gallery_labels = _lst(scores), _lst(probe_labels), _lst(gallery_labels)
    hits = 0
    for row, lab in zip(scores, probe_labels):
        if oracle_rank(row, gallery_labels.index(lab)) < k:
            hits += 1
    return hits / len(scores)


def oracle_tpir_at_fpir(scores, probe_labels, gallery_labels, target):
    """Open-set rate of mated probes that are rank-1 correct and above threshold."""
    scores, probe_labels, gallery_labels = _lst(scores), _lst(probe_labels), _lst(gallery_labels)
    mated, nonmated = [], []
    for row, lab in zip(scores, probe_labels):
        if lab in gallery_labels:
            j = gallery_labels.index(lab)
            mated.append((float(row[j]), oracle_rank(row, j) == 0))
        else:
            nonmated.append(max(float(v) for v in row))
    t = _best_threshold(nonmated, [m[0] for m in mated] + nonmated, target)
    return sum(1 for s, ok in mated if ok and s >= t) / len(mated)


def oracle_correlation(dist):
    """Pearson correlation matrix of the columns of an n x K table."""
    dist = _lst(dist)
    n, K = len(dist), len(dist[0])
    means = [sum(r[k] for r in dist) / n for k in range(K)]
    out = [[0.0] * K for _ in range(K)]
    for a in range(K):
        for b in range(K):
            cov = sum((r[a] - means[a]) * (r[b] - means[b]) for r in dist) / n
            va = sum((r[a] - means[a]) ** 2 for r in dist) / n
            vb = sum((r[b] - means[b]) ** 2 for r in dist) / n
            out[a][b] = cov / math.sqrt(va * vb)
    return out
