"""Gradient-oracle suite.

For random small configurations every trainable quantity is checked three
ways against central finite differences and against each other:

* ``tape``: the reverse-mode tape in :mod:`unirep.autodiff` applied to an
  independent re-expression of each loss term,
* ``main``: the hand-derived backward passes used by training,
* ``closed``: the closed-form identification gradients, compared with the
  tape in absolute terms.

Relative errors are scaled by the largest gradient component of the loss
term being checked, so parameters a term does not touch (exact zeros) are
still held to the same absolute standard as the rest of its gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import comb

import numpy as np

from . import losses
from .autodiff import Var, logsumexp, normalize
from .encoder import EncoderConfig, ProbEmbedding, backward, forward, init_encoder
from .losses import Discriminator, PrototypeBank
from .masks import generate_masks
from .numerics import RngStream, finite_diff_grad

FD_TOL = 1e-5
CLOSED_TOL = 1e-8
TERMS = ("idt", "reg", "cls", "adv", "disc", "total")


@dataclass(frozen=True)
class CaseConfig:
    n: int
    input_dim: int
    hidden: tuple
    K: int
    d: int
    N: int
    V: int
    margin: float
    nonlinearity: str
    init_confidence: float
    lambdas: tuple
    seed: int


def random_cases(seed: int = 0, count: int = 20):
    rng = RngStream(seed, "gradcheck")
    cases = []
    nl = ("tanh", "softplus", "identity")
    for i in range(count):
        depth = int(rng.integers(0, 3))
        cases.append(CaseConfig(
            n=int(rng.integers(1, 6)),
            input_dim=int(rng.integers(2, 7)),
            hidden=tuple(int(rng.integers(2, 6)) for _ in range(depth)),
            K=int(rng.integers(1, 5)),
            d=int(rng.integers(1, 4)),
            N=int(rng.integers(2, 6)),
            V=int(rng.integers(1, 4)),
            margin=float(rng.uniform(0.0, 2.0)),
            nonlinearity=nl[i % 3],
            init_confidence=float(rng.uniform(0.5, 4.0)),
            lambdas=(float(rng.uniform(0, 0.1)), float(rng.uniform(0, 2)), float(rng.uniform(0, 2))),
            seed=seed * 1000 + i,
        ))
    return cases


@dataclass
class Instance:
    case: CaseConfig
    params: object
    bank: PrototypeBank
    disc: Discriminator
    masks: object
    X: np.ndarray
    y: np.ndarray
    u: np.ndarray


def build_instance(case: CaseConfig) -> Instance:
    rng = RngStream(case.seed, "gradcheck-case")
    V = case.V
    while V > 1 and V > _max_masks(case.K):
        V -= 1
    cfg = EncoderConfig(input_dim=case.input_dim, hidden=case.hidden, embedding_dim=case.K * case.d,
                        group_count=case.K, nonlinearity=case.nonlinearity,
                        init_confidence=case.init_confidence, conf_weight_scale=0.5)
    params = init_encoder(cfg, rng.substream("init"))
    bank = PrototypeBank.init(case.N, case.K, case.d, rng.substream("bank"))
    disc = Discriminator.init(V, case.K * case.d, rng.substream("disc"), scale=0.5)
    masks = generate_masks(case.K, V, rng.substream("masks"))
    X = rng.normal(size=(case.n, case.input_dim))
    y = rng.integers(0, case.N, size=case.n)
    u = (rng.random((case.n, V)) < 0.5).astype(np.float64)
    return Instance(case, params, bank, disc, masks, X, y, u)


def _max_masks(K):
    return comb(K, K // 2)


# ---------------------------------------------------------------------------
# independent re-expression on the tape


def _act(z: Var, name):
    if name == "tanh":
        return z.tanh()
    if name == "softplus":
        return z.softplus()
    return z


def tape_terms(inst: Instance, enc: dict, bank: Var, dW: Var, db: Var):
    """All loss terms as tape nodes, given tape leaves for every parameter."""
    c = inst.case
    cfg = inst.params.config
    n, K, d = c.n, cfg.group_count, cfg.group_dim
    h = Var(inst.X)
    for i in range(len(cfg.hidden)):
        h = _act(h @ enc[f"hidden.{i}.weight"].T + enc[f"hidden.{i}.bias"], cfg.nonlinearity)
    v = (h @ enc["emb.weight"].T + enc["emb.bias"]).reshape(n, K, d)
    sub = normalize(v, axis=-1)
    conf = (h @ enc["conf.weight"].T + enc["conf.bias"]).exp()
    return _loss_terms(inst, sub, conf, bank, dW, db)


def _loss_terms(inst: Instance, sub: Var, conf: Var, bank: Var, dW: Var, db: Var):
    c = inst.case
    n, K = sub.shape[0], sub.shape[1]
    N = bank.shape[0]
    onehot = np.zeros((n, N))
    onehot[np.arange(n), inst.y] = 1.0

    a = None
    for k in range(K):
        cos_k = sub[:, k, :] @ bank[:, k, :].T  # (n, N)
        term = cos_k * conf[:, k].reshape(n, 1)
        a = term if a is None else a + term
    a = a * (1.0 / K) - Var(c.margin * onehot)
    idt = (logsumexp(a, axis=1) - (a * onehot).sum(axis=1)).sum() * (1.0 / n)
    reg = (conf * conf).sum() * (1.0 / (n * K))

    m = inst.masks.masks.astype(np.float64)
    V = m.shape[0]
    u = inst.u
    disc = cls = adv = None
    for t in range(V):
        z = (sub * Var(m[t][:, None])).reshape(n, K * sub.shape[2])
        L = z @ dW.T + db  # (n, V)
        bce = L.softplus() - L * Var(u)
        disc = bce.sum() if disc is None else disc + bce.sum()
        cls_t = bce[:, t].sum()
        cls = cls_t if cls is None else cls + cls_t
        off = [v for v in range(V) if v != t]
        if off:
            Lo = L[:, off]
            adv_t = (Lo.softplus() + (-Lo).softplus()).sum() * 0.5
            adv = adv_t if adv is None else adv + adv_t
    zero = Var(0.0)
    disc, cls = disc * (1.0 / n), cls * (1.0 / n)
    adv = zero if adv is None else adv * (1.0 / n)
    lr, lc, la = c.lambdas
    total = idt + reg * lr + cls * lc + adv * la
    return {"idt": idt, "reg": reg, "cls": cls, "adv": adv, "disc": disc, "total": total}


# ---------------------------------------------------------------------------
# main-path gradients


def _wrt(term):
    """Parameter groups each term is differentiated against."""
    if term == "disc":
        return ("disc",)
    if term in ("idt", "total"):
        return ("encoder", "bank")
    return ("encoder",)


def main_grads(inst: Instance, term: str):
    c = inst.case
    e, tape = forward(inst.params, inst.X)
    lr, lc, la = c.lambdas
    out = {}
    if term == "disc":
        _, dW, db = losses.disc_loss(inst.disc, e, inst.masks, inst.u)
        return {"disc.weight": dW, "disc.bias": db}
    d_sub = np.zeros_like(e.sub)
    d_conf = np.zeros_like(e.conf)
    d_bank = np.zeros_like(inst.bank.weights)
    if term in ("idt", "total"):
        res = losses.idt_loss(e, inst.bank, inst.y, c.margin)
        d_sub += res.d_sub
        d_conf += res.d_conf
        d_bank += res.d_bank
    if term in ("reg", "total"):
        _, g = losses.conf_reg(e)
        d_conf += (lr if term == "total" else 1.0) * g
    if term in ("cls", "total"):
        _, g = losses.variation_cls_loss(inst.disc, e, inst.masks, inst.u)
        d_sub += (lc if term == "total" else 1.0) * g
    if term in ("adv", "total"):
        _, g = losses.variation_adv_loss(inst.disc, e, inst.masks, inst.u)
        d_sub += (la if term == "total" else 1.0) * g
    for k, v in backward(inst.params, tape, d_sub, d_conf).items():
        out[f"encoder/{k}"] = v
    if "bank" in _wrt(term):
        out["bank"] = d_bank
    return out


def main_value(inst: Instance, term: str) -> float:
    c = inst.case
    e, _ = forward(inst.params, inst.X)
    lr, lc, la = c.lambdas
    if term == "disc":
        return losses.disc_loss(inst.disc, e, inst.masks, inst.u)[0]
    vals = {}
    if term in ("idt", "total"):
        vals["idt"] = losses.idt_loss(e, inst.bank, inst.y, c.margin).loss
    if term in ("reg", "total"):
        vals["reg"] = losses.conf_reg(e)[0]
    if term in ("cls", "total"):
        vals["cls"] = losses.variation_cls_loss(inst.disc, e, inst.masks, inst.u)[0]
    if term in ("adv", "total"):
        vals["adv"] = losses.variation_adv_loss(inst.disc, e, inst.masks, inst.u)[0]
    if term != "total":
        return vals[term]
    parts = losses.LossBreakdown(idt=vals["idt"], reg=vals["reg"], cls=vals["cls"], adv=vals["adv"])
    return losses.total_loss(parts, lr, lc, la)


def _slots(inst: Instance, term: str):
    """(path, array) for every parameter the term is differentiated against."""
    slots = []
    if "encoder" in _wrt(term):
        slots += [(f"encoder/{k}", inst.params.arrays[k]) for k in inst.params.arrays]
    if "bank" in _wrt(term):
        slots.append(("bank", inst.bank.weights))
    if "disc" in _wrt(term):
        slots += [("disc.weight", inst.disc.weight), ("disc.bias", inst.disc.bias)]
    return slots


def fd_grads(inst: Instance, term: str, h: float = 1e-5):
    out = {}
    for path, arr in _slots(inst, term):
        def f(x, arr=arr):
            saved = arr.copy()
            arr[...] = x
            try:
                return main_value(inst, term)
            finally:
                arr[...] = saved
        out[path] = finite_diff_grad(f, arr.copy(), h)
    return out


def tape_grads(inst: Instance, term: str):
    enc = {k: Var(v.copy(), name=k) for k, v in inst.params.arrays.items()}
    bank = Var(inst.bank.weights.copy(), name="bank")
    dW = Var(inst.disc.weight.copy(), name="disc.weight")
    db = Var(inst.disc.bias.copy(), name="disc.bias")
    node = tape_terms(inst, enc, bank, dW, db)[term]
    node.backward()
    leaves = {f"encoder/{k}": v for k, v in enc.items()}
    leaves.update({"bank": bank, "disc.weight": dW, "disc.bias": db})
    out = {}
    for path, arr in _slots(inst, term):
        g = leaves[path].grad
        out[path] = np.zeros_like(arr) if g is None else g
    return out, float(node.value)


def closed_form_error(inst: Instance) -> float:
    """Max absolute gap between closed-form and tape identification gradients."""
    e, _ = forward(inst.params, inst.X)
    p = losses.posterior(e, inst.bank, inst.y, inst.case.margin)
    d_bank, d_sub = losses.idt_grads_closed_form(e, inst.bank, inst.y, np.atleast_2d(p))
    sub = Var(e.sub.copy())
    conf = Var(e.conf)
    bank = Var(inst.bank.weights.copy())
    dummy_w = Var(inst.disc.weight)
    dummy_b = Var(inst.disc.bias)
    node = _loss_terms(inst, sub, conf, bank, dummy_w, dummy_b)["idt"]
    node.backward()
    n = len(e.sub)
    # the tape differentiates the batch mean; closed forms are per-sample sums
    return float(max(np.max(np.abs(d_bank / n - bank.grad)), np.max(np.abs(d_sub / n - sub.grad))))


# ---------------------------------------------------------------------------
# suite


@dataclass
class Row:
    case: int
    term: str
    path: str
    err_tape: float
    err_main: float


@dataclass
class GradcheckReport:
    rows: list = field(default_factory=list)
    closed: list = field(default_factory=list)
    value_gap: float = 0.0

    @property
    def max_fd_error(self) -> float:
        return max([max(r.err_tape, r.err_main) for r in self.rows] or [0.0])

    @property
    def max_closed_error(self) -> float:
        return max(self.closed or [0.0])

    @property
    def failures(self):
        return [r for r in self.rows if not (r.err_tape < FD_TOL and r.err_main < FD_TOL)]

    @property
    def ok(self) -> bool:
        return not self.failures and self.max_closed_error < CLOSED_TOL and self.value_gap < 1e-10

    def per_term(self):
        table = {}
        for r in self.rows:
            cur = table.setdefault(r.term, [0.0, 0.0])
            cur[0] = max(cur[0], r.err_tape)
            cur[1] = max(cur[1], r.err_main)
        return table

    def to_text(self) -> str:
        lines = [f"{'term':<6} {'tape vs fd':>12} {'main vs fd':>12}"]
        for term, (a, b) in self.per_term().items():
            lines.append(f"{term:<6} {a:12.3e} {b:12.3e}")
        lines.append(f"closed form vs tape (abs): {self.max_closed_error:.3e}")
        lines.append(f"loss value gap main vs tape: {self.value_gap:.3e}")
        if self.failures:
            worst = max(self.failures, key=lambda r: max(r.err_tape, r.err_main))
            lines.append(f"FAIL case {worst.case} term {worst.term} parameter {worst.path}")
        else:
            lines.append("PASS" if self.ok else "FAIL")
        return "\n".join(lines)


def _rel(a, b, scale):
    return float(np.max(np.abs(a - b)) / scale) if a.size else 0.0


def run_suite(seed: int = 0, count: int = 20, inject: str | None = None, terms=TERMS) -> GradcheckReport:
    """Run every case; ``inject`` names a parameter path whose main-path gradient is sign-flipped."""
    report = GradcheckReport()
    for ci, case in enumerate(random_cases(seed, count)):
        inst = build_instance(case)
        report.closed.append(closed_form_error(inst))
        for term in terms:
            fd = fd_grads(inst, term)
            tp, tval = tape_grads(inst, term)
            mn = main_grads(inst, term)
            report.value_gap = max(report.value_gap, abs(tval - main_value(inst, term)))
            if inject is not None and inject in mn:
                mn[inject] = -mn[inject]
            scale = max(max(np.max(np.abs(g)) for g in fd.values()), 1e-8)
            for path in fd:
                report.rows.append(Row(ci, term, path, _rel(tp[path], fd[path], scale),
                                       _rel(mn[path], fd[path], scale)))
    return report
