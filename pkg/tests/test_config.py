import json

import pytest

from text2cad.config import DEFAULTS, env_overrides, parse_assignments, resolve_config
from text2cad.errors import ConfigError


def test_defaults_resolve():
    cfg = resolve_config(environ={})
    assert cfg.seed == 0 and cfg.train["levels"] == ["L0", "L1", "L2", "L3"]
    mc = cfg.model_config(vocab_text=50)
    assert (mc.L, mc.d, mc.d_p, mc.heads, mc.N_c) == (4, 128, 128, 4, 272)
    assert cfg.train_config().lr == 1e-3


def test_precedence(tmp_path):
    f = tmp_path / "run.toml"
    f.write_text('seed = 5\n[train]\nlr = 0.01\nepochs = 3\n[model]\nL = 3\n')
    env = {"T2C_TRAIN__LR": "0.02", "T2C_SEED": "6", "HOME": "/x"}
    cfg = resolve_config(f, environ=env, flags={"seed": 7})
    assert cfg.train["lr"] == 0.02 and cfg.train["epochs"] == 3 and cfg.model["L"] == 3
    assert cfg.seed == 7
    assert cfg.model_config(10).seed == 7 and cfg.train_config().seed == 7
    assert resolve_config(f, environ={}).train["lr"] == 0.01


def test_json_file_and_lists(tmp_path):
    f = tmp_path / "run.json"
    f.write_text(json.dumps({"train": {"levels": ["L3"]}, "eval": {"chamfer": False}}))
    cfg = resolve_config(f, environ={"T2C_TRAIN__BATCH_SIZE": "8"})
    assert cfg.train["levels"] == ["L3"] and cfg.eval["chamfer"] is False and cfg.train["batch_size"] == 8
    cfg = resolve_config(environ={}, flags=parse_assignments(["train.levels=L0,L3"]))
    assert cfg.train["levels"] == ["L0", "L3"]


@pytest.mark.parametrize(
    "flags",
    [
        {"bogus": 1},
        {"train": {"bogus": 1}},
        {"train": {"epochs": "many"}},
        {"train": {"epochs": 1.5}},
        {"train": {"levels": ["L9"]}},
        {"train": {"lr": -1}},
        {"model": {"d": 130}},
        {"eval": {"chamfer": 1}},
        {"model": 3},
    ],
)
def test_rejections(flags):
    with pytest.raises(ConfigError):
        resolve_config(environ={}, flags=flags)


def test_unknown_env_key_rejected():
    with pytest.raises(ConfigError, match="train.nope"):
        resolve_config(environ={"T2C_TRAIN__NOPE": "1"})


def test_bad_file(tmp_path):
    f = tmp_path / "bad.toml"
    f.write_text("seed = = 1")
    with pytest.raises(ConfigError):
        resolve_config(f, environ={})
    with pytest.raises(ConfigError):
        resolve_config(tmp_path / "missing.toml", environ={})


def test_helpers():
    assert env_overrides({"T2C_EVAL__POINTS": "10", "OTHER": "1"}) == {"eval": {"points": "10"}}
    assert parse_assignments(["a.b=1=2", "seed=3"]) == {"a": {"b": "1=2"}, "seed": "3"}
    with pytest.raises(ConfigError):
        parse_assignments(["noequals"])
    assert "vocab_text" not in DEFAULTS["model"]


def test_path_resolution(tmp_path):
    cfg = resolve_config(environ={}, flags={"workdir": str(tmp_path)})
    assert cfg.path("a/b") == tmp_path / "a/b"
    assert cfg.path("/abs").as_posix() == "/abs"
