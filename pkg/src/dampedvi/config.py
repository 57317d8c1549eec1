"""JSON experiment configs: schema, validation with line numbers, builders."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from .core import (
    DampedLagrangianModel,
    IntegratorConfig,
    NoetherGenerator,
    free_particle,
    harmonic_oscillator,
    se_generators,
)
from .formation import (
    FormationShape,
    GraphTopology,
    formation_model,
)

__all__ = ["SCHEMA_VERSION", "CONFIG_SCHEMA", "ConfigError", "ExperimentConfig", "load_config", "parse_config"]

SCHEMA_VERSION = 1

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_vec = {"type": "array", "items": _num, "minItems": 1}

_FORMATION_MODEL = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind", "ambient_dim", "damping", "nodes", "edges"],
    "properties": {
        "kind": {"const": "formation"},
        "ambient_dim": {"enum": [2, 3]},
        "damping": _num,
        "nodes": {"type": "integer", "minimum": 2},
        "edges": {
            "type": "array",
            "items": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2, "maxItems": 2},
        },
        "desired_lengths": {"type": "array", "items": _pos},
        "reference_configuration": _vec,
    },
}

_POTENTIAL_MODEL = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind", "potential", "dim", "damping"],
    "properties": {
        "kind": {"const": "potential"},
        "potential": {"enum": ["free", "harmonic"]},
        "dim": {"type": "integer", "minimum": 1},
        "ambient_dim": {"type": "integer", "minimum": 1, "maximum": 3},
        "damping": _num,
        "stiffness": _pos,
    },
}

CONFIG_SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "mode", "model"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "mode": {"enum": ["simulate", "compare-euler", "sweep", "verify"]},
        "name": {"type": "string"},
        "model": {"oneOf": [_FORMATION_MODEL, _POTENTIAL_MODEL]},
        "integrator": {
            "type": "object",
            "additionalProperties": False,
            "required": ["step"],
            "properties": {
                "step": _pos,
                "steps": {"type": "integer", "minimum": 2},
                "horizon": _pos,
                "start": {"enum": ["forward", "legendre"]},
                "overflow_guard": _pos,
            },
        },
        "initial": {
            "type": "object",
            "additionalProperties": False,
            "required": ["positions"],
            "properties": {"positions": _vec, "velocities": _vec},
        },
        "generators": {
            "oneOf": [{"enum": ["se", "none"]}, {"type": "array", "items": {"type": "string"}}]
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "required": ["displaced_agent", "region_lo", "region_hi"],
            "properties": {
                "displaced_agent": {"type": "integer", "minimum": 0},
                "region_lo": _vec,
                "region_hi": _vec,
                "sampling": {"enum": ["uniform", "grid"]},
                "count": {"type": "integer", "minimum": 1},
                "grid_counts": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "seed": {"type": "integer", "minimum": 0},
                "horizon": _pos,
                "h": _pos,
                "dist_tol_rel": _pos,
                "vel_tol": _pos,
                "convergence_threshold": {"type": "integer", "minimum": 0},
                "enforce_alpha": {"type": "boolean"},
                "c_ball": _pos,
                "R_ball": _pos,
                "heatmap": {"type": "boolean"},
            },
        },
        "verify": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "samples": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "order_steps": {"type": "array", "items": _pos, "minItems": 2},
                "order_horizon": _pos,
                "drift_steps": {"type": "integer", "minimum": 10},
                "coefficient_perturbation": _num,
            },
        },
        "compare": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"energy_threshold": _pos},
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dir": {"type": "string"}, "prefix": {"type": "string"}},
        },
    },
}


class ConfigError(ValueError):
    """Invalid experiment config; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: Optional[int] = None, source: Optional[str] = None):
        self.line = line
        self.source = source
        where = source or "<config>"
        if line is not None:
            where = f"{where}:{line}"
        super().__init__(f"{where}: {message}")


def _line_of(text: str, path, extra_key: Optional[str] = None) -> Optional[int]:
    """Best-effort line number of the JSON pointer ``path`` inside ``text``."""
    pos = 0
    for key in path:
        if isinstance(key, str):
            m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
            if m is None:
                break
            pos = m.start()
    if extra_key is not None:
        m = re.compile(r'"%s"\s*:' % re.escape(extra_key)).search(text, pos)
        if m is not None:
            pos = m.start()
    return text.count("\n", 0, pos) + 1


def _branch_kind(schema) -> Optional[str]:
    return schema.get("properties", {}).get("kind", {}).get("const")


def _best_error(errors):
    # best_match would descend into oneOf itself; for the model union prefer
    # the branch whose "kind" matches the instance
    errors = list(errors)
    if not errors:
        return None
    err = next((e for e in errors if e.validator == "oneOf"), None)
    if err is None:
        return jsonschema.exceptions.best_match(errors)
    ctx = err.context
    if isinstance(err.instance, dict):
        kinds = [_branch_kind(b) for b in err.validator_value]
        if err.instance.get("kind") in kinds:
            idx = kinds.index(err.instance["kind"])
            ctx = [e for e in ctx if e.relative_schema_path[0] == idx] or ctx
    return jsonschema.exceptions.best_match(ctx) or err


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    source: Optional[str] = None

    @property
    def mode(self) -> str:
        return self.raw["mode"]

    @property
    def name(self) -> str:
        if "name" in self.raw:
            return self.raw["name"]
        return Path(self.source).stem if self.source else self.mode

    @property
    def model_section(self) -> dict:
        return self.raw["model"]

    @property
    def is_formation(self) -> bool:
        return self.model_section["kind"] == "formation"

    @property
    def ambient_dim(self) -> int:
        m = self.model_section
        if self.is_formation:
            return m["ambient_dim"]
        return m.get("ambient_dim", m["dim"])

    def section(self, key: str) -> dict:
        return self.raw.get(key, {})

    # --- builders ---------------------------------------------------------

    def shape(self) -> FormationShape:
        m = self.model_section
        if not self.is_formation:
            raise ConfigError("this model has no formation shape", source=self.source)
        topo = GraphTopology(m["nodes"], tuple(tuple(e) for e in m["edges"]))
        if "desired_lengths" in m:
            return FormationShape(topo, m["ambient_dim"], tuple(m["desired_lengths"]))
        return FormationShape.from_configuration(topo, self.reference_configuration(), m["ambient_dim"])

    def reference_configuration(self) -> Optional[np.ndarray]:
        ref = self.model_section.get("reference_configuration")
        return None if ref is None else np.asarray(ref, dtype=float)

    def model(self) -> DampedLagrangianModel:
        m = self.model_section
        if self.is_formation:
            return formation_model(self.shape(), m["damping"])
        if m["potential"] == "free":
            return free_particle(m["dim"], m["damping"])
        return harmonic_oscillator(m["dim"], m["damping"], m.get("stiffness", 1.0))

    def generators(self) -> list[NoetherGenerator]:
        spec = self.raw.get("generators", "se")
        d = self.ambient_dim
        if spec == "none":
            return []
        gens = se_generators(d)
        if spec == "se":
            return gens
        by_name = {g.name: g for g in gens}
        missing = [s for s in spec if s not in by_name]
        if missing:
            raise ConfigError(f"unknown generators {missing}; choose from {sorted(by_name)}", source=self.source)
        return [by_name[s] for s in spec]

    def integrator(self, step: Optional[float] = None) -> IntegratorConfig:
        sec = self.section("integrator")
        init = self.section("initial")
        h = step if step is not None else sec["step"]
        if "steps" in sec and step is None:
            n = sec["steps"]
        elif "horizon" in sec:
            n = max(2, int(round(sec["horizon"] / h)))
        elif "steps" in sec:
            n = max(2, int(round(sec["steps"] * sec["step"] / h)))
        else:
            raise ConfigError("integrator needs 'steps' or 'horizon'", source=self.source)
        q0 = np.asarray(init["positions"], dtype=float)
        v0 = np.asarray(init.get("velocities", np.zeros_like(q0)), dtype=float)
        return IntegratorConfig(h, n, q0, v0, sec.get("start", "forward"))


def _semantic_checks(cfg: ExperimentConfig, text: str) -> None:
    raw = cfg.raw
    mode = raw["mode"]

    def fail(msg, *path):
        raise ConfigError(msg, _line_of(text, path), cfg.source)

    m = raw["model"]
    if m["kind"] == "formation":
        if "desired_lengths" not in m and "reference_configuration" not in m:
            fail("formation model needs 'desired_lengths' or 'reference_configuration'", "model")
        if "desired_lengths" in m and len(m["desired_lengths"]) != len(m["edges"]):
            fail("one desired length per edge is required", "model", "desired_lengths")
        if "reference_configuration" in m and len(m["reference_configuration"]) != m["nodes"] * m["ambient_dim"]:
            fail("reference_configuration must have nodes*ambient_dim entries", "model", "reference_configuration")
        dim = m["nodes"] * m["ambient_dim"]
        try:
            cfg.shape()
        except ValueError as exc:
            fail(str(exc), "model", "edges")
    else:
        dim = m["dim"]
        if dim % cfg.ambient_dim:
            fail("dim must be a multiple of ambient_dim", "model", "ambient_dim")

    if mode in ("simulate", "compare-euler"):
        for key in ("integrator", "initial"):
            if key not in raw:
                fail(f"mode {mode!r} needs an '{key}' section")
    if "integrator" in raw:
        sec = raw["integrator"]
        if "steps" not in sec and "horizon" not in sec:
            fail("integrator needs 'steps' or 'horizon'", "integrator")
    if "initial" in raw:
        init = raw["initial"]
        if len(init["positions"]) != dim:
            fail(f"positions must have {dim} entries", "initial", "positions")
        if "velocities" in init and len(init["velocities"]) != dim:
            fail(f"velocities must have {dim} entries", "initial", "velocities")
    if mode == "sweep":
        if m["kind"] != "formation":
            fail("sweep mode needs a formation model", "model", "kind")
        if "sweep" not in raw:
            fail("mode 'sweep' needs a 'sweep' section")
        if "reference_configuration" not in m:
            fail("sweep mode needs model.reference_configuration", "model")
        sw = raw["sweep"]
        d = m["ambient_dim"]
        for key in ("region_lo", "region_hi"):
            if len(sw[key]) != d:
                fail(f"{key} must have {d} entries", "sweep", key)
        if sw.get("sampling") == "grid" and len(sw.get("grid_counts", [])) != d:
            fail(f"grid sampling needs {d} grid_counts", "sweep", "grid_counts")
        if sw["displaced_agent"] >= m["nodes"]:
            fail("displaced_agent out of range", "sweep", "displaced_agent")
    if "generators" in raw:
        try:
            cfg.generators()
        except ConfigError as exc:
            fail(str(exc).split(": ", 1)[-1], "generators")


def parse_config(text: str, source: Optional[str] = None) -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", exc.lineno, source) from None
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    err = _best_error(validator.iter_errors(raw))
    if err is not None:
        extra = None
        if err.validator == "additionalProperties":
            found = re.findall(r"'([^']+)' was unexpected", err.message)
            extra = found[0] if found else None
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {err.message}", _line_of(text, err.absolute_path, extra), source)
    cfg = ExperimentConfig(raw, source)
    _semantic_checks(cfg, text)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", source=str(path)) from None
    return parse_config(text, str(path))
