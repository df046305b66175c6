import pytest

from utils.config import (
    Config, RunConfig, build_run_config, dump_run_config, load_run_config, parse_config_text,
    validate_startup_config,
)
from utils.errors import ConfigError, RevampError
from utils.seeding import SeedUtils


def test_defaults():
    cfg = RunConfig()
    assert (cfg.dim, cfg.clip_app, cfg.clip_poi, cfg.clip_time) == (64, 64, 64, 64)
    assert cfg.l2 == 0.002 and cfg.dropout == 0.2 and cfg.eval_negatives == 100
    assert cfg.seq_len == 200 and cfg.ffn_dim == 64


def test_profile_sets_sequence_length():
    assert RunConfig(profile="talkingdata").seq_len == 100
    assert RunConfig(profile="shanghai").seq_len == 200
    assert RunConfig(profile="talkingdata", N=50).seq_len == 50


@pytest.mark.parametrize("values", [
    {"gamma": 1.5},
    {"kappa": -0.1},
    {"dropout": 1.0},
    {"M_b": 0},
    {"D": 6, "heads": 4},
    {"I_a": 0},
    {"unknown_key": 1},
])
def test_invalid_values_raise_config_error(values):
    with pytest.raises(ConfigError):
        build_run_config(values)


def test_config_error_is_a_value_error():
    with pytest.raises(ValueError):
        build_run_config({"gamma": 2})
    assert issubclass(ConfigError, RevampError)


def test_parse_config_text():
    text = "# run\nD = 32\n\nlambda = 0.01  # l2\ntime_mode = literal\n"
    assert parse_config_text(text) == {"D": "32", "lambda": "0.01", "time_mode": "literal"}
    with pytest.raises(ConfigError):
        parse_config_text("D 32\n")
    with pytest.raises(ConfigError):
        parse_config_text("D = 1\nD = 2\n")


def test_load_run_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("D = 32\nuse_T = false\nheads = 2\n")
    cfg = load_run_config(path, seed=9)
    assert cfg.dim == 32 and cfg.use_T is False and cfg.heads == 2 and cfg.seed == 9


def test_dump_and_reload_is_identity(tmp_path):
    cfg = RunConfig(D=8, N=10, use_J=False, pretrained_path=None, time_mode="literal")
    path = tmp_path / "dump.cfg"
    path.write_text(dump_run_config(cfg))
    assert load_run_config(path) == cfg


def test_env_seed_overrides_config(monkeypatch, tmp_path):
    monkeypatch.setenv("REVAMP_SEED", "77")
    Config.reload()
    assert load_run_config(seed=5).seed == 77


def test_startup_validation_rejects_bad_env(monkeypatch):
    monkeypatch.setenv("LOG_FORMAT", "xml")
    with pytest.raises(ConfigError):
        validate_startup_config()
    monkeypatch.setenv("LOG_FORMAT", "json")
    monkeypatch.setenv("REVAMP_SEED", "abc")
    with pytest.raises(ConfigError):
        validate_startup_config()


def test_variant_revalidates():
    cfg = RunConfig(D=8)
    assert cfg.variant(use_J=False).use_J is False
    with pytest.raises(ConfigError):
        cfg.variant(gamma=3.0)


def test_seed_utils_streams_are_stable_and_independent():
    a = SeedUtils.rng(1, "sr.L").random(3)
    assert (a == SeedUtils.rng(1, "sr.L").random(3)).all()
    assert not (a == SeedUtils.rng(1, "sr.P_key").random(3)).all()
    seeds = SeedUtils.run_seeds(42, 3)
    assert seeds[0] == 42 and len(set(seeds)) == 3


@pytest.mark.parametrize("raw", ["two", "0", "1.5", "-3"])
def test_startup_validation_rejects_bad_worker_count(monkeypatch, raw):
    monkeypatch.setenv("REVAMP_WORKERS", raw)
    with pytest.raises(ConfigError):
        validate_startup_config()


def test_worker_count_from_env(monkeypatch):
    monkeypatch.setenv("REVAMP_WORKERS", " 3 ")
    Config.reload()
    assert Config.workers() == 3
    monkeypatch.delenv("REVAMP_WORKERS")
    Config.reload()
    assert Config.workers() == 1
