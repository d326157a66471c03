import csv
import json
import os

import numpy as np
import pytest

from unirep import checkpoint, cli

TINY = """\
data.train_identities = 5
data.test_identities = 4
data.obs_dim = 16
data.train_samples_per_identity = 8
data.test_samples_per_identity = 8
data.gallery_per_identity = 2
data.identity_rank = 8
data.pose_planes = 2
model.input_dim = 16
model.hidden = [12]
model.embedding_dim = 16
model.group_count = 4
train.epochs = 3
train.batch_size = 8
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert cli.main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "train")]) == 0
    return root


def _manifest(path):
    with open(os.path.join(path, "manifest.json")) as fh:
        return json.load(fh)


def test_gen_data_outputs_and_rerun(run, tmp_path):
    names = sorted(os.listdir(run / "data"))
    assert names == ["dataset.json", "manifest.json", "test.csv", "train.csv"]
    assert cli.main(["gen-data", "--config", str(run / "tiny.cfg"), "--out", str(tmp_path)]) == 0
    for name in ("dataset.json", "train.csv", "test.csv"):
        assert (tmp_path / name).read_bytes() == (run / "data" / name).read_bytes()
    m = _manifest(run / "data")
    assert m["command"] == "gen-data" and m["status"] == "ok" and m["seed"] == 0


def test_bad_config_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("data.noise = 0.2\ndata.nois = 0.1\n")
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "line 2: data.nois" in capsys.readouterr().err


def test_missing_inputs_exit_2(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["eval", "--data", str(tmp_path), "--checkpoint", "x.bin", "--out", str(tmp_path / "o")]) == 2


def test_input_dim_mismatch_exit_2(run, tmp_path, capsys):
    assert cli.main(["train", "--data", str(run / "data"), "--out", str(tmp_path)]) == 2
    assert "model.input_dim" in capsys.readouterr().err


def test_train_outputs(run):
    assert sorted(os.listdir(run / "train")) == ["checkpoint.bin", "manifest.json", "trainlog.csv"]
    with open(run / "train" / "trainlog.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3
    first = rows[0]
    for term in ("idt", "reg", "cls", "adv", "disc", "total"):
        assert float(first[term]) != 0.0, term
    m = _manifest(run / "train")
    assert m["config"]["train"]["ci"] is True and m["artifacts"] == ["checkpoint.bin", "trainlog.csv"]


def test_ablation_flags(run, tmp_path):
    args = ["train", "--config", str(run / "tiny.cfg"), "--data", str(run / "data")]
    assert cli.main(args + ["--out", str(tmp_path / "a"), "--no-ci", "--no-de"]) == 0
    b = checkpoint.load(tmp_path / "a" / "checkpoint.bin")
    assert not b.train_config.ci and not b.train_config.de
    with open(tmp_path / "a" / "trainlog.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert all(float(r["cls"]) == float(r["adv"]) == float(r["disc"]) == 0.0 for r in rows)


def test_divergence_exit_3(run, tmp_path, capsys):
    cfg = tmp_path / "hot.cfg"
    cfg.write_text(TINY + "train.lr_encoder = 1e30\ntrain.lr_prototypes = 1e30\n")
    with np.errstate(all="ignore"):
        code = cli.main(["train", "--config", str(cfg), "--data", str(run / "data"), "--out", str(tmp_path / "o")])
    assert code == 3
    err = capsys.readouterr().err
    assert "term" in err
    assert _manifest(tmp_path / "o")["status"].startswith("diverged:")


def test_manifest_written_before_outputs(run, tmp_path, monkeypatch):
    seen = {}
    real = cli.evaluate

    def spy(*a, **kw):
        seen["manifest"] = _manifest(tmp_path)
        seen["files"] = sorted(os.listdir(tmp_path))
        return real(*a, **kw)

    monkeypatch.setattr(cli, "evaluate", spy)
    assert cli.main(["eval", "--data", str(run / "data"), "--checkpoint", str(run / "train" / "checkpoint.bin"),
                     "--out", str(tmp_path)]) == 0
    assert seen["files"] == ["manifest.json"] and seen["manifest"]["status"] == "running"
    assert _manifest(tmp_path)["status"] == "ok"


def test_eval_pa_warns_and_reports(run, tmp_path, capsys):
    ck = str(run / "train" / "checkpoint.bin")
    assert cli.main(["eval", "--data", str(run / "data"), "--checkpoint", ck, "--out", str(tmp_path / "c")]) == 0
    assert cli.main(["eval", "--data", str(run / "data"), "--checkpoint", ck, "--out", str(tmp_path / "m"),
                     "--pa"]) == 0
    assert "warning" in capsys.readouterr().err
    c = json.loads((tmp_path / "c" / "eval.json").read_text())
    m = json.loads((tmp_path / "m" / "eval.json").read_text())
    assert c["method"] == "cosine" and m["method"] == "mls"
    assert set(c["verification"]["tar_at_far"]) == {"0.01", "0.001"}
    assert set(c["identification"]["rank"]) == {"1", "5"}
    assert c["correlation"] == m["correlation"] and c["counts"] == m["counts"]
    assert (tmp_path / "c" / "roc.csv").read_text().startswith("far,tar\n")


def test_finetune_then_pa(run, tmp_path, capsys):
    ck = str(run / "train" / "checkpoint.bin")
    assert cli.main(["finetune", "--data", str(run / "data"), "--checkpoint", ck, "--out", str(tmp_path / "f"),
                     "--pairs", "40", "--epochs", "5"]) == 0
    fb = checkpoint.load(tmp_path / "f" / "checkpoint.bin")
    assert fb.finetuned
    capsys.readouterr()
    assert cli.main(["eval", "--data", str(run / "data"), "--checkpoint", str(tmp_path / "f" / "checkpoint.bin"),
                     "--out", str(tmp_path / "e"), "--pa"]) == 0
    assert "warning" not in capsys.readouterr().err


def test_threads_do_not_change_eval(run, tmp_path):
    ck = str(run / "train" / "checkpoint.bin")
    outs = []
    for t in (1, 4):
        d = tmp_path / f"t{t}"
        assert cli.main(["eval", "--data", str(run / "data"), "--checkpoint", ck, "--out", str(d),
                         "--threads", str(t), "--pa"]) == 0
        outs.append((d / "eval.json").read_bytes())
    assert outs[0] == outs[1]
    assert cli.main(["eval", "--data", str(run / "data"), "--checkpoint", ck, "--out", str(tmp_path / "z"),
                     "--threads", "0"]) == 2


def test_score_self(run, capsys):
    assert cli.main(["score", "--data", str(run / "data"), "--checkpoint", str(run / "train" / "checkpoint.bin"),
                     "--pair", "3", "3"]) == 0
    rec = json.loads(capsys.readouterr().out)
    b = checkpoint.load(run / "train" / "checkpoint.bin")
    from unirep.synthdata import load_dataset
    from unirep.trainer import embed
    e = embed(b, load_dataset(run / "data").test.X[[3]])
    K, D = e.K, e.dim
    expected = -(D / (2 * K)) * np.sum(np.log(2.0 / e.conf[0]))
    assert rec["cosine"] == pytest.approx(1.0, abs=1e-12)
    assert rec["mls"] == pytest.approx(expected, rel=1e-12)
    assert rec["same_identity"] is True
    assert cli.main(["score", "--data", str(run / "data"), "--checkpoint", str(run / "train" / "checkpoint.bin"),
                     "--pair", "0", "9999"]) == 2


def test_analyze_corr_duplicated_groups(run, tmp_path):
    b = checkpoint.load(run / "train" / "checkpoint.bin")
    cfg = b.encoder.config
    W = b.encoder.arrays["emb.weight"].reshape(cfg.group_count, cfg.group_dim, -1)
    W[:] = W[0]
    b.encoder.arrays["emb.bias"].reshape(cfg.group_count, cfg.group_dim)[:] = 0.0
    checkpoint.save(b, tmp_path / "dup.bin")
    assert cli.main(["analyze-corr", "--data", str(run / "data"), "--checkpoint", str(tmp_path / "dup.bin"),
                     "--out", str(tmp_path / "a")]) == 0
    with open(tmp_path / "a" / "corr.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["group", "g1", "g2", "g3", "g4"]
    vals = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    assert np.allclose(vals, 1.0)


def test_sweep_k(run, tmp_path):
    cfg = tmp_path / "s.cfg"
    cfg.write_text(TINY.replace("train.epochs = 3", "train.epochs = 1"))
    assert cli.main(["sweep-k", "--config", str(cfg), "--data", str(run / "data"), "--out", str(tmp_path / "s"),
                     "--k", "1", "2", "4", "16", "--no-de"]) == 0
    with open(tmp_path / "s" / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["K"] for r in rows] == ["1", "2", "4", "16"]
    assert cli.main(["sweep-k", "--config", str(cfg), "--data", str(run / "data"), "--out", str(tmp_path / "x"),
                     "--k", "3"]) == 2


def test_export_round_trip(run, tmp_path):
    from unirep.scorer import import_embeddings
    for fmt in ("csv", "bin"):
        assert cli.main(["export", "--data", str(run / "data"), "--checkpoint", str(run / "train" / "checkpoint.bin"),
                         "--out", str(tmp_path / fmt), "--format", fmt]) == 0
        ids, e = import_embeddings(tmp_path / fmt / f"embeddings.{fmt}", fmt)
        assert len(ids) == 32 and e.K == 4


def test_gradcheck_exit_codes(tmp_path, capsys):
    assert cli.main(["gradcheck", "--cases", "3", "--out", str(tmp_path / "g")]) == 0
    assert (tmp_path / "g" / "gradcheck.txt").read_text().splitlines()[-2] == "PASS"
    assert cli.main(["gradcheck", "--cases", "2", "--inject-fault", "encoder/emb.weight"]) == 4
    assert "encoder/emb.weight" in capsys.readouterr().err


def test_schema_command(tmp_path):
    from unirep.config import schema_json
    assert cli.main(["schema", "--out", str(tmp_path / "s.json")]) == 0
    assert (tmp_path / "s.json").read_text() == schema_json()


def test_reproducible_from_manifest(run, tmp_path):
    m = _manifest(run / "train")
    doc = {"model": m["config"]["model"], "train": m["config"]["train"]}
    (tmp_path / "from_manifest.json").write_text(json.dumps(doc))
    assert cli.main(["train", "--config", str(tmp_path / "from_manifest.json"), "--data", m["config"]["data_dir"],
                     "--out", str(tmp_path / "t")]) == 0
    assert (tmp_path / "t" / "checkpoint.bin").read_bytes() == (run / "train" / "checkpoint.bin").read_bytes()
