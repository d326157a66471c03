import json
import os

import pytest

from unirep import config
from unirep.config import ConfigError, RunConfig, parse_text

SCHEMA = os.path.join(os.path.dirname(__file__), os.pardir, "schema", "config.schema.json")


def test_empty_is_default():
    assert parse_text("") == RunConfig()
    assert config.load(None) == RunConfig()


def test_kv_and_json_agree():
    kv = parse_text("# desk\ndata.noise = 0.2\ntrain.epochs = 5\nmodel.hidden = [32, 16]\n")
    js = parse_text(json.dumps({"data": {"noise": 0.2}, "train": {"epochs": 5}, "model": {"hidden": [32, 16]}}))
    assert kv == js
    assert kv.data.noise == 0.2 and kv.model.hidden == (32, 16)


def test_unknown_field_names_line():
    with pytest.raises(ConfigError) as info:
        parse_text("data.noise = 0.2\ndata.nois = 0.3\n")
    assert str(info.value) == "line 2: data.nois: unknown field"
    assert info.value.field_name == "data.nois" and info.value.line == 2


def test_invalid_value_names_field():
    with pytest.raises(ConfigError, match=r"line 2: train.epochs: epochs must be >= 0"):
        parse_text("data.noise = 0.2\ntrain.epochs = -1\n")


def test_wrong_type():
    with pytest.raises(ConfigError, match="train.va"):
        parse_text("train.va = 3")
    with pytest.raises(ConfigError, match="model.group_count"):
        parse_text('{"model": {"group_count": 2.5}}')


def test_unknown_section_and_bad_lines():
    with pytest.raises(ConfigError, match="line 1: optim: unknown section"):
        parse_text("optim.lr = 1")
    with pytest.raises(ConfigError, match="line 1"):
        parse_text("justtext")
    with pytest.raises(ConfigError, match="line 2"):
        parse_text('{"data":\n  {"noise": }}')


def test_with_seed():
    cfg = RunConfig().with_seed(7)
    assert cfg.data.seed == 7 and cfg.train.seed == 7


def test_round_trip_through_dict():
    cfg = parse_text("train.augment_families = [\"blur\"]\neval.ranks = [1, 3]\n")
    assert config.from_dict(cfg.to_dict()) == cfg


def test_schema_file_matches_generated():
    with open(SCHEMA) as fh:
        assert fh.read() == config.schema_json()
    props = config.schema()["properties"]
    assert set(props) == {"data", "model", "train", "eval"}
    assert props["train"]["properties"]["margin"]["default"] == 4.0
