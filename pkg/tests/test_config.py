import json

import pytest

from diffabm.config import (
    RunConfig,
    apply_patch,
    config_hash,
    load_config,
    validate_config,
)
from diffabm.errors import DomainError, SchemaError


def test_defaults_materialized():
    cfg = validate_config({})
    doc = cfg.normalized()
    for section in ("population", "graph", "epi", "labor", "vaccine",
                    "testing", "stimulus", "behavior", "execution"):
        assert section in doc
    assert doc["epi"]["r0"] == 3.0
    assert doc["epi"]["infectious_period"] == 7
    assert doc["vaccine"]["dose_gap"] == 21
    assert doc["testing"]["specificity"] == 0.65
    assert doc["execution"]["mode"] == "stochastic"


def test_negative_beta_reports_pointer():
    with pytest.raises(SchemaError) as err:
        validate_config({"epi": {"beta": -1.0}})
    assert any("/epi/beta" in e for e in err.value.errors)


def test_multiple_violations_all_listed():
    bad = {"epi": {"beta": -1.0}, "execution": {"horizon_steps": -3}}
    with pytest.raises(SchemaError) as err:
        validate_config(bad)
    joined = "\n".join(err.value.errors)
    assert "/epi/beta" in joined
    assert "/execution/horizon_steps" in joined


def test_unknown_key_rejected():
    with pytest.raises(SchemaError) as err:
        validate_config({"epi": {"rnought": 3.0}})
    assert any("/epi/rnought" in e for e in err.value.errors)


def test_hash_deterministic_and_sensitive():
    a = validate_config({"epi": {"r0": 3.0}})
    b = validate_config({"epi": {"r0": 3.0}, "graph": {}})
    c = validate_config({"epi": {"r0": 3.5}})
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(c)
    assert len(config_hash(a)) == 64


def test_patch_r0_alias():
    cfg = validate_config({})
    patched = apply_patch(cfg, {"epi.R0": 5.5})
    assert patched.epi.r0 == 5.5
    assert cfg.epi.r0 == 3.0
    assert config_hash(patched) != config_hash(cfg)


def test_patch_empty_is_identity():
    cfg = validate_config({"labor": {"gamma0": -0.25}})
    assert config_hash(apply_patch(cfg, {})) == config_hash(cfg)


def test_patch_unknown_path_named():
    cfg = RunConfig()
    with pytest.raises(DomainError) as err:
        apply_patch(cfg, {"epi.zeta": 1.0})
    assert "epi.zeta" in str(err.value)


def test_patch_section_replacement():
    cfg = RunConfig()
    patched = apply_patch(cfg, {"vaccine": {"enabled": True, "daily_supply": 50}})
    assert patched.vaccine.enabled and patched.vaccine.daily_supply == 50
    assert patched.vaccine.dose_gap == 21


def test_patch_validates_result():
    cfg = RunConfig()
    with pytest.raises(SchemaError):
        apply_patch(cfg, {"epi.r0": -2.0})


def test_load_config_roundtrip(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"execution": {"seed": 11, "horizon_steps": 5}}))
    cfg = load_config(str(path))
    assert cfg.execution.seed == 11
    assert cfg.execution.horizon_steps == 5


def test_load_config_bad_json(tmp_path):
    path = tmp_path / "run.json"
    path.write_text("{not json")
    with pytest.raises(SchemaError):
        load_config(str(path))


def test_household_dist_must_normalize():
    with pytest.raises(SchemaError):
        validate_config({"population": {"household_size_dist": {"1": 0.4}}})


def test_archetype_attrs_validated():
    with pytest.raises(SchemaError):
        validate_config({"behavior": {"archetype_attrs": ["eye_color"]}})
