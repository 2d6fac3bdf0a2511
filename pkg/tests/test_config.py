import json

import pytest

from dentaldet.config import RunConfig, load_config, parse_override
from dentaldet.errors import ConfigError


def test_defaults_documented():
    flat = RunConfig().to_flat()
    assert flat["loss.w_bbox"] == 7.5 and flat["loss.w_attr"] == 8.0
    assert flat["assigner.alpha"] == 0.5 and flat["assigner.beta"] == 6.0 and flat["assigner.topk"] == 10
    assert flat["post.iou_thr"] == 0.7 and flat["post.conf_thr"] == 0.25
    assert flat["train.use_quadrant_tier"] is True


def test_nested_flat_and_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"loss": {"w_bbox": 2.0}, "post.cost": "neg_log"}))
    cfg = load_config(str(path), ["train.epochs=3", "model.coordconv_enabled=false", "augment.blur_sigmas=[0, 2]"])
    assert cfg.loss.w_bbox == 2.0
    assert cfg.post.cost == "neg_log"
    assert cfg.train.epochs == 3
    assert cfg.model.coordconv_enabled is False
    assert cfg.augment.blur_sigmas == (0.0, 2.0)


def test_env_default(tmp_path, monkeypatch):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"seed": 9}}))
    monkeypatch.setenv("DENTALDET_CONFIG", str(path))
    assert load_config().train.seed == 9


@pytest.mark.parametrize("values", [{"loss.w_foo": 1}, {"bogus.x": 1}, {"loss": 3}, {"post.cost": "l2"}])
def test_unknown_or_invalid_keys(values):
    with pytest.raises(ConfigError):
        RunConfig().update(values)


def test_parse_override():
    assert parse_override("post.cost=neg_log") == ("post.cost", "neg_log")
    assert parse_override("train.lr=0.5") == ("train.lr", 0.5)
    with pytest.raises(ConfigError):
        parse_override("train.lr")
