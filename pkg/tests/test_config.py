import dataclasses
import json

import pytest

from dmf2mel.config import (
    ConfigError,
    ModelConfig,
    TrainConfig,
    ablation_configs,
    config_to_dict,
    load_config,
    parse_config,
)


def test_roundtrip():
    m, t = ModelConfig(d_model=32, n_fusion=2), TrainConfig(lr=1e-3, seed=5)
    m2, t2 = parse_config(json.loads(json.dumps(config_to_dict(m, t))))
    assert m2 == m and t2 == t
    assert m2.digest() == m.digest()


def test_defaults_when_sections_missing():
    m, t = parse_config({"schema_version": 1})
    assert m == ModelConfig() and t == TrainConfig()
    assert (m.n_convmamba, m.n_dcfam, m.n_hams, m.n_fusion) == (2, 4, 6, 6)
    assert (t.lr, t.lr_decay, t.decay_every, t.epochs, t.batch) == (5e-4, 0.9, 50, 1000, 16)


@pytest.mark.parametrize(
    "doc, where",
    [
        ({"schema_version": 2}, "schema_version"),
        ({"schema_version": 1, "extra": {}}, "config.extra"),
        ({"schema_version": 1, "model": {"d_modle": 8}}, "model.d_modle"),
        ({"schema_version": 1, "model": {"d_model": "8"}}, "model.d_model"),
        ({"schema_version": 1, "model": {"esm": 1}}, "model.esm"),
        ({"schema_version": 1, "train": {"lr": 0}}, "train.lr"),
        ({"schema_version": 1, "train": {"lr_decay": 1.0}}, "train.lr_decay"),
        ({"schema_version": 1, "train": {"tau": 0.0}}, "train"),
        ({"schema_version": 1, "model": {"n_dcfam": 0}}, "model.n_dcfam"),
        ({"schema_version": 1, "model": {"fusion_schedule": "random"}}, "model.fusion_schedule"),
        ({"schema_version": 1, "model": {"window": 4}}, "window"),
        ({"schema_version": 1, "model": {"d_model": 30}}, "n_heads"),
    ],
)
def test_rejections_name_the_field(doc, where):
    with pytest.raises(ConfigError, match=where):
        parse_config(doc)


def test_load_config_bad_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)


def test_float_fields_accept_ints():
    _, t = parse_config({"schema_version": 1, "train": {"lr": 1}})
    assert isinstance(t.lr, float)


def test_ablation_configs_validate():
    for name, cfg in ablation_configs().items():
        cfg.validate()
    grid = ablation_configs()
    assert grid["w/o splinemap"].splinemap_fusion is False
    assert grid["n_hams=8"].n_hams == 8


def test_hams_count_modes():
    m = ModelConfig(n_hams=4)
    assert m.hams_config().n_adaf == 4 and m.n_unets() == 1
    m = dataclasses.replace(m, hams_count_mode="n_unets")
    assert m.hams_config().n_adaf == 1 and m.n_unets() == 4


def test_digest_tracks_every_field():
    base = ModelConfig().digest()
    for f in dataclasses.fields(ModelConfig):
        v = getattr(ModelConfig(), f.name)
        changed = (not v) if isinstance(v, bool) else (v + 1 if isinstance(v, (int, float)) else v + "x")
        assert dataclasses.replace(ModelConfig(), **{f.name: changed}).digest() != base, f.name
