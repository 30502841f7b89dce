import pytest
import tomli

from amerlab import config
from amerlab.errors import ConfigError


def test_defaults_are_desk_scale():
    cfg = config.load()
    assert (cfg.data.d, cfg.data.n_train, cfg.data.n_test, cfg.data.corpus_size) == (64, 2000, 200, 20000)
    assert cfg.train.batch_size == 128 and cfg.train.temperature == 0.05


def test_overrides_and_round_trip(tmp_path):
    cfg = config.load(None, ["train.lr=3e-4", "eval.ks=1,10", "data.normalize_inputs=true", "seed=5"])
    assert cfg.train.lr == 3e-4 and cfg.eval.ks == (1, 10) and cfg.data.normalize_inputs
    assert cfg.train_config().seed == 5
    path = tmp_path / "c.toml"
    path.write_text(cfg.to_toml())
    assert config.load(path) == cfg


@pytest.mark.parametrize("item", ["nope=1", "train.nope=1", "train.lr=abc", "data.m=9",
                                  "seed=-1", "train.lr", "data.setting=weird"])
def test_bad_overrides(item):
    with pytest.raises(ConfigError):
        config.load(None, [item])


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError):
        config.load(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[data\n")
    with pytest.raises(ConfigError):
        config.load(bad)


def test_presets_load():
    from pathlib import Path

    presets = sorted((Path(__file__).parent.parent / "presets").glob("*.cfg"))
    assert len(presets) >= 12
    for p in presets:
        cfg = config.load(p)
        tomli.loads(cfg.to_toml())
