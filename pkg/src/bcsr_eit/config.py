"""Experiment configuration: JSON schema, defaults and resolution helpers."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .basis import default_truncation
from .mesh_io import load_mesh
from .phantoms import Case, build_domain_mesh, case_ids, case_library
from .protocol import protocol_from_config
from .recon import LMFConfig, TVConfig


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT1 = {"type": "integer", "minimum": 1}

_MESH = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "file": {"type": "string"},
        "format": {"enum": ["gmsh_msh2", "native_json"]},
        "n_rings": {"type": "integer", "minimum": 2},
        "n_electrodes": {"type": "integer", "minimum": 2},
        "electrode_coverage": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "n_layers": _INT1,
        "n_rings_2d": {"type": "integer", "minimum": 2},
        "electrode_height": _POS,
        "contact_impedance": _POS,
    },
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "bcsr-eit experiment",
    "type": "object",
    "additionalProperties": False,
    "required": ["case"],
    "properties": {
        "case": {"type": "string"},
        "mode": {"enum": ["absolute", "difference"]},
        "sim_mesh": _MESH,
        "recon_mesh": _MESH,
        "enforce_no_inverse_crime": {"type": "boolean"},
        "protocol": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "type": {"enum": ["adjacent", "tank"]},
                "skip_driven": {"type": "boolean"},
                "drop_reciprocal": {"type": "boolean"},
                "terminals": {"type": "array", "items": _INT1, "minItems": 1},
                "amplitude_mA": _POS,
            },
        },
        "bounds": {
            "oneOf": [
                {"enum": ["fine", "coarse"]},
                {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
            ]
        },
        "scale_rule": {"enum": ["paper", "voltage_ls"]},
        "sigma_homo": _POS,
        "n_basis": {
            "oneOf": [_INT1, {"type": "array", "items": _INT1, "minItems": 1}]
        },
        "truncation": {"enum": ["tank", "simulation"]},
        "lmf": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mu0": _POS,
                "gamma1": _POS,
                "gamma2": _POS,
                "rho1": _POS,
                "rho2": _POS,
                "max_iter": _INT1,
                "eps": _POS,
                "max_inner": _INT1,
                "ftol": _POS,
            },
        },
        "tv": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"},
                "lambda0": {"type": "number", "minimum": 0},
                "beta": _POS,
                "relative_weight": _POS,
            },
        },
        "snr_db": {
            "type": "array",
            "minItems": 1,
            "items": {"oneOf": [_NUM, {"const": "inf"}]},
        },
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "methods": {
            "type": "array",
            "items": {"enum": ["bcsr", "ld", "gn_l2"]},
            "minItems": 1,
            "uniqueItems": True,
        },
        "ld": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"alpha_reg": _POS, "sweep": {"type": "boolean"}},
        },
        "gn_l2": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"weight": _POS, "weight_rel": _POS, "iters": _INT1},
        },
        "difference": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_frames": {"type": "integer", "minimum": 2},
                "depth": _POS,
                "right_left_ratio": _POS,
            },
        },
        "metrics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "ssim_range": {"enum": ["truth", "pair"]},
                "full_volume": {"type": "boolean"},
            },
        },
        "export_vtk": {"type": "boolean"},
    },
}

DEFAULTS = {
    "mode": "absolute",
    "enforce_no_inverse_crime": True,
    "bounds": "fine",
    "scale_rule": "paper",
    "sigma_homo": 1.0,
    "lmf": {},
    "tv": {},
    "snr_db": [60],
    "seeds": [0],
    "methods": ["bcsr"],
    "ld": {},
    "gn_l2": {},
    "difference": {},
    "metrics": {},
    "export_vtk": False,
}


def _error_path(err: jsonschema.ValidationError) -> str:
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


def validate_config(data: dict) -> dict:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(f"config field {_error_path(e)}: {e.message}")
    if data["case"] not in case_ids():
        raise ConfigError(f"config field case: unknown case {data['case']!r}")
    out = {**DEFAULTS, **data}
    bounds = out["bounds"]
    if isinstance(bounds, list) and not 0 < bounds[0] < bounds[1]:
        raise ConfigError("config field bounds: need 0 < lower < upper")
    lmf = out["lmf"]
    try:
        LMFConfig(**lmf)
        TVConfig(**out["tv"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config field lmf/tv: {exc}") from None
    for key in ("sim_mesh", "recon_mesh"):
        spec = out.get(key) or {}
        if "file" in spec and not Path(spec["file"]).exists():
            raise ConfigError(f"config field {key}/file: no such file {spec['file']}")
    return out


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return validate_config(data)


@dataclass(frozen=True)
class Experiment:
    """A validated config bound to its case."""

    config: dict

    @property
    def case(self) -> Case:
        return case_library(self.config["case"])

    def mesh(self, which: str):
        spec = dict(self.config.get(f"{which}_mesh") or {})
        if "file" in spec:
            kw = {}
            if "contact_impedance" in spec:
                kw["contact_impedance"] = spec["contact_impedance"]
            return load_mesh(spec["file"], spec.get("format"), **kw)
        base = dict(self.case.sim_mesh if which == "sim" else self.case.recon_mesh)
        base.update(spec)
        return build_domain_mesh(self.case.domain, base)

    def protocol(self, n_electrodes: int):
        spec = self.config.get("protocol")
        if spec is None:
            return self.case.build_protocol(n_electrodes)
        return protocol_from_config(spec, n_electrodes)

    @property
    def bounds(self) -> tuple[float, float]:
        b = self.config["bounds"]
        return tuple(self.case.bounds[b]) if isinstance(b, str) else (float(b[0]), float(b[1]))

    def n_basis_values(self, n_nodes: int) -> list[int]:
        nb = self.config.get("n_basis")
        if nb is None:
            regime = self.config.get("truncation", self.case.truncation)
            return [default_truncation(n_nodes, regime)]
        return [nb] if isinstance(nb, int) else list(nb)

    @property
    def snr_values(self) -> list[float]:
        return [math.inf if s == "inf" else float(s) for s in self.config["snr_db"]]

    def lmf_config(self) -> LMFConfig:
        return LMFConfig(**self.config["lmf"])

    def tv_config(self) -> TVConfig:
        return TVConfig(**self.config["tv"])
