import dataclasses

import pytest

from prosody_disentangle.config import (
    ENV_RUN_DIR,
    ConfigError,
    PipelineConfig,
    apply_overrides,
    dump_config,
    load_config,
    parse_config_text,
)


def test_defaults():
    cfg = PipelineConfig()
    assert cfg.model.preset == "desk"
    assert (cfg.ser.encoder_lr, cfg.ser.head_lr, cfg.evc.lr) == (1e-4, 5e-4, 1e-5)
    assert cfg.model_config().vocab_size == cfg.units.vocab_size


def test_parse_text_with_comments():
    pairs = parse_config_text("# c\nseed = 3  # trailing\n\ntrain.speed_factors = 0.9, 1.1\n")
    assert pairs == {"seed": "3", "train.speed_factors": "0.9, 1.1"}
    with pytest.raises(ConfigError, match=":2:"):
        parse_config_text("seed = 1\nbroken line\n")


def test_override_types_and_preset_first():
    cfg = apply_overrides(
        PipelineConfig(),
        {
            "model.prosody_dim": "64",
            "model.preset": "mini",
            "train.overfit": "true",
            "train.speed_factors": "1.0",
            "units.vocab_size": "16",
        },
    )
    assert cfg.model.preset == "mini" and cfg.model.prosody_dim == 64
    assert cfg.train.overfit is True and cfg.train.speed_factors == (1.0,)
    assert cfg.model_config().vocab_size == 16


@pytest.mark.parametrize(
    "pairs, match",
    [
        ({"bogus.x": "1"}, "section"),
        ({"train.nope": "1"}, "nope"),
        ({"train.max_steps": "ten"}, "train.max_steps"),
        ({"train.overfit": "maybe"}, "overfit"),
        ({"turbo": "1"}, "turbo"),
        ({"train.batch_size": "0"}, "train"),
    ],
)
def test_bad_overrides(pairs, match):
    with pytest.raises(ConfigError, match=match):
        apply_overrides(PipelineConfig(), pairs)


def test_precedence_and_relative_paths(tmp_path):
    (tmp_path / "c.cfg").write_text("paths.manifest = corpus/m.txt\ntrain.max_steps = 10\nseed = 4\n")
    cfg = load_config(tmp_path / "c.cfg", {"train.max_steps": "20"})
    assert cfg.train.max_steps == 20 and cfg.seed == 4
    assert cfg.manifest_path() == tmp_path / "corpus" / "m.txt"
    assert cfg.manifest_path("ser") == cfg.manifest_path()
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


def test_run_dir_env(monkeypatch, tmp_path):
    monkeypatch.setenv(ENV_RUN_DIR, str(tmp_path / "r"))
    assert PipelineConfig().run_dir() == tmp_path / "r"
    assert load_config(None, {"paths.run_dir": "/x"}).run_dir().as_posix() == "/x"


def test_dump_round_trip():
    cfg = apply_overrides(PipelineConfig(), {"model.preset": "mini", "train.max_steps": "7", "evc.pairs": "neutral:sad"})
    again = apply_overrides(PipelineConfig(), parse_config_text(dump_config(cfg)))
    assert dataclasses.asdict(again) == dataclasses.asdict(cfg)
    assert again.section_hash("train", "model") == cfg.section_hash("train", "model")
    assert again.section_hash("train") != PipelineConfig().section_hash("train")
