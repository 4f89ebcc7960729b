import pytest

from enhseg.config import TrainConfig, apply_overrides, describe, from_dict, load_config, save_config, to_dict
from enhseg.core import ConfigError


def test_defaults_follow_the_training_recipe():
    cfg = TrainConfig()
    assert (cfg.optim.momentum, cfg.optim.weight_decay, cfg.optim.poly_power) == (0.9, 1e-4, 0.9)
    assert (cfg.train.labeled_batch, cfg.train.unlabeled_batch, cfg.train.tau) == (8, 8, 0.7)
    assert cfg.perturb.fp_dropout == 0.5 and cfg.providers.template == "a photo of a {classlabel}"


def test_yaml_round_trip(tmp_path):
    cfg = TrainConfig()
    cfg.train.tau = 0.55
    cfg.perturb.scale_range = (0.75, 1.5)
    save_config(cfg, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert to_dict(back) == to_dict(cfg)
    assert back.perturb.scale_range == (0.75, 1.5)


def test_unknown_keys_are_rejected(tmp_path):
    with pytest.raises(ConfigError, match="train.taux"):
        from_dict({"train": {"taux": 0.5}})
    with pytest.raises(ConfigError):
        from_dict({"trian": {}})
    with pytest.raises(ConfigError):
        apply_overrides(TrainConfig(), ["optim.lr=0.1"])
    p = tmp_path / "c.yaml"
    p.write_text("train:\n  bogus: 1\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_overrides_win_and_are_typed(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("optim:\n  lr0: 0.5\ntrain:\n  mode: supervised\n")
    cfg = load_config(p, ["optim.lr0=0.02", "train.max_iters=7", "train.weak_bn_train=false",
                          "data.fraction=1/16"])
    assert cfg.optim.lr0 == 0.02 and cfg.train.max_iters == 7 and cfg.train.weak_bn_train is False
    assert cfg.train.mode == "supervised" and cfg.data.fraction == "1/16"


@pytest.mark.parametrize("bad", ["train.max_iters=1.5", "train.max_iters=abc", "train.mode=both",
                                 "optim.lr0=-1", "perturb.fp_dropout=1.0", "noequals", "a.b.c=1"])
def test_invalid_values(bad):
    with pytest.raises(ConfigError):
        load_config(None, [bad])


def test_missing_or_malformed_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "none.yaml")
    p = tmp_path / "list.yaml"
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_describe_lists_every_key():
    text = describe()
    for sec, values in to_dict(TrainConfig()).items():
        for k in values:
            assert f"{sec}.{k} =" in text
