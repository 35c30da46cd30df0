import pytest

from outlierbft.config import PRESETS, config_from_dict, config_to_dict, load_config, org_ids, validate_dict
from outlierbft.errors import ConfigError


def test_defaults_build_a_valid_config():
    cfg = config_from_dict({})
    assert cfg.layout.device_count == 16 and cfg.org_count == 16
    assert cfg.endorsing_peers == 16 and cfg.engine == "events"


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_load_and_round_trip(name):
    cfg = config_from_dict({"preset": name})
    assert cfg.name == name
    again = config_from_dict(config_to_dict(cfg))
    assert again.hash() == cfg.hash()


def test_fig1_preset_shape():
    cfg = config_from_dict({"preset": "fig1"})
    assert cfg.org_count == 16 and cfg.adversary.malicious_fraction == 0.375
    assert cfg.adversary.byzantine_malicious_orgs and cfg.detector.enabled


def test_overrides_merge_over_preset():
    cfg = config_from_dict({"preset": "fig1", "scenario": {"slots": 3}})
    assert cfg.slots == 3 and cfg.seed == 1


@pytest.mark.parametrize("raw,fragment", [
    ({"scenario": {"slotz": 1}}, "scenario.'slotz'"),
    ({"bogus": {}}, "'bogus'"),
    ({"detector": {"p_fa": "high"}}, "detector.p_fa"),
    ({"detector": {"enabled": 1}}, "detector.enabled"),
    ({"scenario": {"slots": True}}, "scenario.slots"),
    ({"schema": 2}, "schema"),
    ({"preset": "nope"}, "preset"),
])
def test_schema_errors_name_the_key(raw, fragment):
    with pytest.raises(ConfigError) as exc:
        config_from_dict(raw)
    assert fragment in str(exc.value)


@pytest.mark.parametrize("raw", [
    {"topology": {"orgs": 5, "endorsing_peers": 4}},
    {"topology": {"devices": 4, "device_orgs": [0, 1, 2]}},
    {"topology": {"devices": 2, "orgs": 2, "device_orgs": ["org00", "org07"]}},
    {"scenario": {"training_slots": 5}},
    {"scenario": {"seed": -1}},
    {"detector": {"p_fa": 1.0}},
    {"data": {"rank": 16}},
    {"adversary": {"malicious_fraction": 1.5}},
    {"adversary": {"model": "teleport"}},
    {"adversary": {"byzantine_mode": "loud"}},
    {"network": {"timeout": 0.0}},
    {"run": {"engine": "quantum"}},
])
def test_invalid_values_rejected(raw):
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_int_promoted_to_float():
    assert validate_dict({"data": {"sigma": 0}})["data"]["sigma"] == 0.0


def test_hash_ignores_workers_and_seed():
    a = config_from_dict({"run": {"workers": 1}, "scenario": {"seed": 1}})
    b = config_from_dict({"run": {"workers": 4}, "scenario": {"seed": 2}})
    c = config_from_dict({"scenario": {"slots": 11}})
    assert a.hash() == b.hash() != c.hash()


def test_org_ids_are_zero_padded():
    assert org_ids(3) == ["org00", "org01", "org02"]
    assert org_ids(101)[-1] == "org100"


def test_load_config_from_toml(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('preset = "desk"\n[scenario]\nslots = 4\n')
    cfg = load_config(p, {"scenario": {"seed": 9}})
    assert cfg.slots == 4 and cfg.seed == 9 and cfg.layout.device_count == 100
    p.write_text("[scenario\n")
    with pytest.raises(ConfigError):
        load_config(p)
