import json

import jsonschema
import pytest

from riskcbf.config import OUTPUT_ENV, SCHEMA, RunConfig, config_from_dict, load_config, validate_config
from riskcbf.errors import ConfigurationError
from riskcbf.scenario import ScenarioConfig


def test_packaged_defaults_match_dataclass_defaults():
    rc = load_config()
    assert rc.scenario.to_dict() == ScenarioConfig().to_dict()
    assert rc.seeds == list(range(20))


def test_schema_is_valid_draft7_and_accepts_defaults():
    jsonschema.Draft7Validator.check_schema(SCHEMA)
    validate_config(RunConfig().to_dict())


@pytest.mark.parametrize("doc,path", [
    ({"dynamics": {"dt": -0.1}}, "dynamics/dt"),
    ({"barrier": {"p_bar": 1.5}}, "barrier/p_bar"),
    ({"estimator": {"init_mode": "magic"}}, "estimator/init_mode"),
    ({"controller": {"u_lo": [0.1]}}, "controller/u_lo"),
    ({"scenario": {"lane_count": 0}}, "scenario/lane_count"),
    ({"bogus": {}}, "<root>"),
    ({"dynamics": {"speed": 1.0}}, "dynamics"),
])
def test_schema_errors_name_the_offending_path(doc, path):
    with pytest.raises(ConfigurationError, match=path):
        config_from_dict(doc)


def test_cross_field_errors_are_reported_as_configuration_errors():
    with pytest.raises(ConfigurationError, match="input bounds"):
        config_from_dict({"controller": {"u_lo": [2.0, 0.0], "u_hi": [1.0, 1.0]}})


def test_round_trip_through_json(tmp_path):
    rc = config_from_dict({"barrier": {"family": "C", "a_fixed": 0.05}, "seeds": {"base": 7, "count": 3},
                           "output": {"dir": str(tmp_path)}})
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(rc.to_dict()))
    again = load_config(path)
    assert again.scenario.to_dict() == rc.scenario.to_dict()
    assert again.seeds == [7, 8, 9] and again.resolved_output_dir() == tmp_path


def test_output_dir_falls_back_to_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path))
    assert RunConfig().resolved_output_dir() == tmp_path
    monkeypatch.delenv(OUTPUT_ENV)
    assert str(RunConfig().resolved_output_dir()) == "."


def test_unreadable_or_malformed_files(tmp_path):
    with pytest.raises(ConfigurationError, match="cannot read"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigurationError, match="invalid JSON"):
        load_config(bad)
