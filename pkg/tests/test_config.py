import json

import pytest

from mummi import config as C


def test_defaults_validate_and_roundtrip(tmp_path):
    cfg = C.load(None)
    assert cfg.train.model_lr == 6e-4 and cfg.train.actor_lr == cfg.train.critic_lr
    cfg.save(tmp_path / "c.json")
    again = C.load(tmp_path / "c.json")
    assert again == cfg


def test_dotted_overrides():
    cfg = C.load(None, {"train.seed": 4, "train.variant": "elbo", "env": "toy2d-axes", "model.h_dim": 8})
    assert (cfg.train.seed, cfg.train.variant, cfg.env, cfg.model.h_dim) == (4, "elbo", "toy2d-axes", 8)
    assert cfg.model_config().init_seed == 4
    assert [m.name for m in cfg.model_config().modalities] == ["x_sensor", "y_sensor"]


def test_unknown_keys_are_named(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"sede": 1, "seed": 2}, "colour": "red"}))
    with pytest.raises(C.ConfigError) as info:
        C.load(path)
    assert info.value.keys == ["colour"]
    with pytest.raises(C.ConfigError) as info:
        C.load(None, {"train.sede": 1})
    assert info.value.keys == ["train.sede"]


@pytest.mark.parametrize("key,value", [("train.gamma", 0.0), ("train.td_lambda", 1.5), ("train.variant", "vae"),
                                       ("train.missing_rate", -0.1), ("train.batch_size", 0),
                                       ("schema_version", 2), ("env", "atari"), ("env_options", {"colour": 1})])
def test_invalid_values(key, value):
    with pytest.raises(C.ConfigError):
        C.load(None, {key: value})


def test_bad_files(tmp_path):
    with pytest.raises(C.ConfigError):
        C.load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(C.ConfigError):
        C.load(tmp_path / "bad.json")
