"""Command-line entry point.

Every command writes ``manifest.json`` into its output directory before any
other artifact and rewrites it on completion. Exit codes: 0 ok, 2 bad
config or inputs, 3 numerical divergence, 4 gradient-check failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace

from . import __version__, checkpoint, config as config_mod
from .config import ConfigError
from .evaluation import evaluate, rows_to_csv, subembedding_correlation, sweep_group_count
from .numerics import NumericalDivergence
from .scorer import export_embeddings, score_record
from .synthdata import load_dataset, make_dataset, write_dataset
from .trainer import embed, finetune_confidence, genuine_pairs, train

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_GRADCHECK = 0, 2, 3, 4


class Failure(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# run manifest


def _timestamp():
    # SOURCE_DATE_EPOCH pins timestamps for reproducible manifests
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(epoch) if epoch is not None else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def _atomic_write(path, data, mode="w"):
    tmp = f"{path}.tmp"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


class RunManifest:
    def __init__(self, command: str, out_dir: str, config: dict, seed, artifacts):
        self.path = os.path.join(out_dir, "manifest.json")
        self.doc = {
            "command": command,
            "config": config,
            "seed": seed,
            "artifacts": sorted(artifacts),
            "tool_version": __version__,
            "started_at": _timestamp(),
            "finished_at": None,
            "status": "running",
        }

    def write(self):
        _atomic_write(self.path, json.dumps(self.doc, indent=2, sort_keys=True) + "\n")

    def finish(self, status="ok"):
        self.doc["finished_at"] = _timestamp()
        self.doc["status"] = status
        self.write()


def _start(command, out_dir, cfg_dict, seed, artifacts):
    os.makedirs(out_dir, exist_ok=True)
    m = RunManifest(command, out_dir, cfg_dict, seed, artifacts)
    m.write()
    return m


# ---------------------------------------------------------------------------
# helpers


def _load_cfg(args) -> config_mod.RunConfig:
    cfg = config_mod.load(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _load_data(path):
    if not os.path.exists(os.path.join(path, "dataset.json")):
        raise Failure(EXIT_CONFIG, f"data dir {path!r}: dataset.json not found")
    return load_dataset(path)


def _load_ckpt(path):
    if not os.path.exists(path):
        raise Failure(EXIT_CONFIG, f"checkpoint {path!r} not found")
    try:
        return checkpoint.load(path)
    except checkpoint.CheckpointError as exc:
        raise Failure(EXIT_CONFIG, f"checkpoint {path!r}: {exc}") from None


def _ablation(train_cfg, args):
    flags = {k: getattr(args, k) for k in ("va", "ci", "me", "de") if getattr(args, k, None) is not None}
    return replace(train_cfg, **flags) if flags else train_cfg


def _log(msg):
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    cfg = _load_cfg(args)
    data_cfg = replace(cfg.data, format=args.format) if args.format else cfg.data
    fmt = data_cfg.format
    m = _start("gen-data", args.out, {"data": data_cfg.to_dict()}, data_cfg.seed,
               ["dataset.json", f"train.{fmt}", f"test.{fmt}"])
    write_dataset(make_dataset(data_cfg), args.out)
    m.finish()
    return EXIT_OK


def cmd_train(args):
    cfg = _load_cfg(args)
    ds = _load_data(args.data)
    model_cfg = cfg.model
    if model_cfg.input_dim != ds.config.obs_dim:
        raise ConfigError(f"{model_cfg.input_dim} != dataset obs_dim {ds.config.obs_dim}", "model.input_dim")
    train_cfg = _ablation(cfg.train, args)
    snapshot = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "data_dir": os.path.abspath(args.data)}
    m = _start("train", args.out, snapshot, train_cfg.seed, ["checkpoint.bin", "trainlog.csv"])
    ck_path = os.path.join(args.out, "checkpoint.bin")

    def on_epoch(epoch, bundle):
        if train_cfg.save_interval and epoch % train_cfg.save_interval == 0:
            _atomic_write(ck_path, checkpoint.to_bytes(bundle), "wb")

    try:
        bundle = train(ds, model_cfg, train_cfg, on_epoch=on_epoch)
    except NumericalDivergence as exc:
        m.finish(f"diverged:{exc.term}")
        raise Failure(EXIT_DIVERGENCE, f"non-finite loss in term {exc.term!r}") from None
    _atomic_write(ck_path, checkpoint.to_bytes(bundle), "wb")
    _atomic_write(os.path.join(args.out, "trainlog.csv"), bundle.log.to_csv(bundle.encoder.config.group_count))
    m.finish()
    return EXIT_OK


def cmd_finetune(args):
    cfg = _load_cfg(args)
    ds = _load_data(args.data)
    bundle = _load_ckpt(args.checkpoint)
    ev = cfg.eval
    pairs_n = args.pairs or ev.finetune_pairs
    epochs = ev.finetune_epochs if args.epochs is None else args.epochs
    lr = args.lr or ev.finetune_lr
    seed = bundle.train_config.seed if args.seed is None else args.seed
    m = _start("finetune", args.out, {"pairs": pairs_n, "epochs": epochs, "lr": lr,
                                      "checkpoint": os.path.abspath(args.checkpoint)}, seed, ["checkpoint.bin"])
    out = finetune_confidence(bundle, genuine_pairs(ds, pairs_n, seed), epochs, lr)
    _atomic_write(os.path.join(args.out, "checkpoint.bin"), checkpoint.to_bytes(out), "wb")
    m.finish()
    return EXIT_OK


def cmd_eval(args):
    cfg = _load_cfg(args)
    ds = _load_data(args.data)
    bundle = _load_ckpt(args.checkpoint)
    ev = cfg.eval
    if args.far:
        ev = replace(ev, far_targets=tuple(args.far))
    if args.ranks:
        ev = replace(ev, ranks=tuple(args.ranks))
    if args.fpir:
        ev = replace(ev, fpir_targets=tuple(args.fpir))
    if args.pa and not bundle.finetuned:
        _log("warning: checkpoint has no fine-tuned confidence head; "
             "using 1/s from the training head for uncertainty-aware scoring")
    snapshot = {"eval": ev.to_dict(), "pa": bool(args.pa), "checkpoint": os.path.abspath(args.checkpoint)}
    m = _start("eval", args.out, snapshot, bundle.train_config.seed, ["eval.json", "roc.csv"])
    rep = evaluate(bundle, ds, pa=args.pa, threads=args.threads, far_targets=ev.far_targets,
                   ranks=ev.ranks, fpir_targets=ev.fpir_targets)
    _atomic_write(os.path.join(args.out, "eval.json"), rep.to_json())
    _atomic_write(os.path.join(args.out, "roc.csv"), rep.roc_csv())
    print(rep.to_text(), end="")
    m.finish()
    return EXIT_OK


def corr_csv(matrix) -> str:
    K = len(matrix)
    lines = ["group," + ",".join(f"g{k + 1}" for k in range(K))]
    for k, row in enumerate(matrix):
        lines.append(f"g{k + 1}," + ",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def cmd_analyze_corr(args):
    ds = _load_data(args.data)
    bundle = _load_ckpt(args.checkpoint)
    split = ds.test if args.split == "test" else ds.train
    m = _start("analyze-corr", args.out, {"split": args.split, "checkpoint": os.path.abspath(args.checkpoint)},
               bundle.train_config.seed, ["corr.csv"])
    e = embed(bundle, split.X, threads=args.threads)
    res = subembedding_correlation(e.sub, split.y)
    _atomic_write(os.path.join(args.out, "corr.csv"), corr_csv(res.matrix))
    if res.degenerate:
        _log(f"warning: degenerate groups (zero variance) {res.degenerate}")
    print(f"mean |off-diagonal| = {res.mean_abs_offdiag:.6f}")
    m.finish()
    return EXIT_OK


def cmd_sweep_k(args):
    cfg = _load_cfg(args)
    ds = _load_data(args.data)
    train_cfg = _ablation(cfg.train, args)
    for K in args.k:
        if K < 1 or cfg.model.embedding_dim % K:
            raise ConfigError(f"{K} does not divide embedding_dim={cfg.model.embedding_dim}", "--k")
    snapshot = {"model": cfg.model.to_dict(), "train": train_cfg.to_dict(), "K": list(args.k), "pa": bool(args.pa)}
    m = _start("sweep-k", args.out, snapshot, train_cfg.seed, ["sweep.csv"])
    ft = {"pairs": cfg.eval.finetune_pairs, "epochs": cfg.eval.finetune_epochs, "lr": cfg.eval.finetune_lr}
    try:
        rows = sweep_group_count(ds, cfg.model, train_cfg, args.k, pa=args.pa, finetune=ft if args.pa else None)
    except NumericalDivergence as exc:
        m.finish(f"diverged:{exc.term}")
        raise Failure(EXIT_DIVERGENCE, f"non-finite loss in term {exc.term!r}") from None
    text = rows_to_csv(rows)
    _atomic_write(os.path.join(args.out, "sweep.csv"), text)
    print(text, end="")
    m.finish()
    return EXIT_OK


def cmd_score(args):
    ds = _load_data(args.data)
    bundle = _load_ckpt(args.checkpoint)
    split = ds.test if args.split == "test" else ds.train
    i, j = args.pair
    for idx in (i, j):
        if not 0 <= idx < len(split):
            raise Failure(EXIT_CONFIG, f"sample id {idx} out of range [0, {len(split)})")
    e = embed(bundle, split.X[[i, j]])
    rec = {"pair": [i, j], "split": args.split, "same_identity": bool(split.y[i] == split.y[j])}
    rec.update(score_record(e[0], e[1]))
    text = json.dumps(rec, indent=2, sort_keys=True) + "\n"
    if args.out:
        m = _start("score", args.out, {"pair": [i, j], "split": args.split}, bundle.train_config.seed, ["score.json"])
        _atomic_write(os.path.join(args.out, "score.json"), text)
        m.finish()
    print(text, end="")
    return EXIT_OK


def cmd_export(args):
    ds = _load_data(args.data)
    bundle = _load_ckpt(args.checkpoint)
    split = ds.test if args.split == "test" else ds.train
    name = f"embeddings.{args.format}"
    m = _start("export", args.out, {"split": args.split, "format": args.format}, bundle.train_config.seed, [name])
    e = embed(bundle, split.X, threads=args.threads)
    export_embeddings(os.path.join(args.out, name), range(len(split)), e, args.format)
    m.finish()
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import run_suite

    m = None
    if args.out:
        m = _start("gradcheck", args.out, {"cases": args.cases, "inject_fault": args.inject_fault}, args.seed,
                   ["gradcheck.txt"])
    t0 = time.perf_counter()
    rep = run_suite(args.seed, args.cases, inject=args.inject_fault)
    text = rep.to_text() + f"\n{len(rep.rows)} checks over {args.cases} cases in {time.perf_counter() - t0:.1f}s\n"
    print(text, end="")
    if m is not None:
        _atomic_write(os.path.join(args.out, "gradcheck.txt"), text)
        m.finish("ok" if rep.ok else "failed")
    if not rep.ok:
        if rep.failures:
            worst = max(rep.failures, key=lambda r: max(r.err_tape, r.err_main))
            raise Failure(EXIT_GRADCHECK, f"gradient check failed for parameter {worst.path} (term {worst.term})")
        raise Failure(EXIT_GRADCHECK, "closed-form gradients disagree with the tape")
    return EXIT_OK


def cmd_schema(args):
    text = config_mod.schema_json()
    if args.out:
        _atomic_write(args.out, text)
    else:
        print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="unirep", description="Confidence-aware sub-embedding face representation toolkit "
                                "on a synthetic vector-domain dataset.")
    p.add_argument("--version", action="version", version=f"unirep {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, data=True, out=True, seed=True):
        if config:
            sp.add_argument("--config", help="JSON or key=value config file (see 'unirep schema')")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory written by gen-data")
        if out:
            sp.add_argument("--out", required=True, help="output run directory")
        if seed:
            sp.add_argument("--seed", type=int, help="override data and train seeds")

    def ablations(sp):
        for flag, text in (("va", "variation augmentation"), ("ci", "per-sample confidence"),
                           ("me", "multiple sub-embeddings"), ("de", "decorrelation losses")):
            sp.add_argument(f"--{flag}", action=argparse.BooleanOptionalAction, default=None,
                            help=f"enable/disable {text} (default: config)")

    sp = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(sp, data=False)
    sp.add_argument("--format", choices=("csv", "bin"), help="row file format (default: config)")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model bundle")
    common(sp)
    ablations(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("finetune", help="refit the confidence head on genuine pairs")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--pairs", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("eval", help="verification / identification report")
    common(sp, seed=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--pa", action="store_true", help="uncertainty-aware scoring instead of averaged cosine")
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--far", type=float, nargs="+", help="false-accept targets (default 1e-2 1e-3)")
    sp.add_argument("--ranks", type=int, nargs="+", help="closed-set ranks (default 1 5)")
    sp.add_argument("--fpir", type=float, nargs="+", help="open-set false-positive targets (default 1e-2 1e-1)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("analyze-corr", help="sub-embedding distance correlation matrix")
    common(sp, config=False, seed=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("test", "train"), default="test")
    sp.add_argument("--threads", type=int, default=1)
    sp.set_defaults(func=cmd_analyze_corr)

    sp = sub.add_parser("sweep-k", help="train and evaluate one model per group count")
    common(sp)
    ablations(sp)
    sp.add_argument("--k", type=int, nargs="+", default=[1, 2, 4, 8])
    sp.add_argument("--pa", action="store_true")
    sp.set_defaults(func=cmd_sweep_k)

    sp = sub.add_parser("score", help="score one pair of samples")
    common(sp, config=False, out=False, seed=False)
    sp.add_argument("--out", help="optional run directory for score.json")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--pair", type=int, nargs=2, required=True, metavar=("I", "J"))
    sp.add_argument("--split", choices=("test", "train"), default="test")
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("export", help="export probabilistic embeddings")
    common(sp, config=False, seed=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("test", "train"), default="test")
    sp.add_argument("--format", choices=("csv", "bin"), default="csv")
    sp.add_argument("--threads", type=int, default=1)
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("gradcheck", help="gradient-oracle suite")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--cases", type=int, default=20)
    sp.add_argument("--inject-fault", metavar="PARAM",
                    help="sign-flip the main-path gradient of PARAM (e.g. encoder/emb.weight)")
    sp.add_argument("--out", help="optional run directory")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("schema", help="print or write the config JSON schema")
    sp.add_argument("--out", help="file to write instead of stdout")
    sp.set_defaults(func=cmd_schema)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", 1) is not None and getattr(args, "threads", 1) < 1:
        _log("error: --threads must be >= 1")
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except Failure as exc:
        _log(f"error: {exc}")
        return exc.code
    except NumericalDivergence as exc:
        _log(f"error: non-finite value in term {exc.term!r}")
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
