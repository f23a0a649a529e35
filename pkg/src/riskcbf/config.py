"""JSON run configuration: schema, defaults and loading."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema

from .errors import ConfigurationError
from .scenario import ScenarioConfig

OUTPUT_ENV = "RISKCBF_OUTPUT_DIR"

# config section -> ScenarioConfig fields it carries
SECTIONS = {
    "dynamics": ("v_d", "c1", "c2", "G_scale", "l", "dt", "process_noise_scale"),
    "estimator": ("D", "init_mode", "position_var", "velocity_var", "eps", "p_e", "measurement_noise_scale",
                  "init_noise_scale"),
    "barrier": ("family", "a_fixed", "alpha", "margin_mode", "r_u", "T", "p_bar"),
    "controller": ("c", "w_b", "clf_gain", "clf_weight", "cruise_speed", "proximity_radius", "u_lo", "u_hi"),
    "scenario": ("lane_count", "lane_width", "agent_positions", "ego_init", "goal_center", "goal_radius",
                 "goal_x", "duration", "with_ego"),
}

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_prob = {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}
_vec2 = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}


def _section(props: dict) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props}


SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "riskcbf run configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "dynamics": _section({"v_d": _num, "c1": _pos, "c2": _pos, "G_scale": {"type": "number", "minimum": 0},
                              "l": _pos, "dt": _pos, "process_noise_scale": {"type": "number", "minimum": 0}}),
        "estimator": _section({
            "D": {"type": "array", "items": _vec2, "minItems": 2, "maxItems": 2},
            "init_mode": {"enum": ["prior", "first_observation"]},
            "position_var": _pos, "velocity_var": _pos, "eps": _pos, "p_e": _prob,
            "measurement_noise_scale": {"type": "number", "minimum": 0},
            "init_noise_scale": {"type": "number", "minimum": 0}}),
        "barrier": _section({"family": {"enum": ["A", "B", "C"]}, "a_fixed": {"type": "number", "minimum": 0},
                             "alpha": _pos, "margin_mode": {"enum": ["analytic", "grid", "eps_squared"]},
                             "r_u": _pos, "T": _pos, "p_bar": _prob}),
        "controller": _section({"c": _pos, "w_b": _pos, "clf_gain": {"type": "number", "minimum": 0},
                                "clf_weight": _pos, "cruise_speed": {"type": ["number", "null"]},
                                "proximity_radius": _pos, "u_lo": _vec2, "u_hi": _vec2}),
        "scenario": _section({"lane_count": {"type": "integer", "minimum": 1}, "lane_width": _pos,
                              "agent_positions": {"type": ["array", "null"], "items": _vec2},
                              "ego_init": {"type": "array", "items": _num, "minItems": 3, "maxItems": 3},
                              "goal_center": {"oneOf": [_vec2, {"type": "null"}]}, "goal_radius": _pos,
                              "goal_x": _num, "duration": _pos, "with_ego": {"type": "boolean"}}),
        "seeds": _section({"base": {"type": "integer", "minimum": 0},
                           "count": {"type": "integer", "minimum": 1}}),
        "output": _section({"dir": {"type": "string"}}),
    },
}


@dataclass
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    seed_base: int = 0
    seed_count: int = 20
    output_dir: Optional[str] = None

    @property
    def seeds(self) -> list:
        return list(range(self.seed_base, self.seed_base + self.seed_count))

    def resolved_output_dir(self) -> Path:
        return Path(self.output_dir or os.environ.get(OUTPUT_ENV) or ".")

    def to_dict(self) -> dict:
        flat = self.scenario.to_dict()
        doc = {sec: {k: flat[k] for k in keys} for sec, keys in SECTIONS.items()}
        doc["seeds"] = {"base": self.seed_base, "count": self.seed_count}
        doc["output"] = {"dir": self.output_dir} if self.output_dir else {}
        return doc


def _error_path(err: jsonschema.ValidationError) -> str:
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


def validate_config(doc: dict) -> None:
    """Raise ``ConfigurationError`` listing every schema violation with its path."""
    errors = sorted(jsonschema.Draft7Validator(SCHEMA).iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigurationError("; ".join(f"{_error_path(e)}: {e.message}" for e in errors))


def config_from_dict(doc: dict) -> RunConfig:
    validate_config(doc)
    flat = {}
    for sec, keys in SECTIONS.items():
        for k, v in doc.get(sec, {}).items():
            flat[k] = tuple(v) if k in ("u_lo", "u_hi", "ego_init", "goal_center") and v is not None else v
    if "D" in flat:
        flat["D"] = tuple(tuple(r) for r in flat["D"])
    seeds = doc.get("seeds", {})
    try:
        scen = ScenarioConfig(seed=seeds.get("base", 0), **flat)
    except ConfigurationError as exc:
        raise ConfigurationError(f"scenario: {exc}") from None
    return RunConfig(scenario=scen, seed_base=seeds.get("base", 0), seed_count=seeds.get("count", 20),
                     output_dir=doc.get("output", {}).get("dir"))


def load_config(path=None) -> RunConfig:
    """Load a JSON config file; ``None`` gives the packaged defaults."""
    if path is None:
        text = resources.files("riskcbf").joinpath("data/default_config.json").read_text()
        src = "default_config.json"
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        src = str(path)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{src}: invalid JSON ({exc})") from None
    return config_from_dict(doc)
