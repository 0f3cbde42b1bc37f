"""Versioned JSON experiment configuration.

A config file only needs the keys it changes; everything else comes from
:data:`DEFAULT_CONFIG`. The merged document is validated against
:data:`SCHEMA` and then against the invariants of the objects it builds.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from pathlib import Path

import jsonschema
import numpy as np

from .polarization import LocalUnitary
from .source import SourceConfig
from .spectral import FilterSpec, GridSpec, PhaseMatching, PumpEnvelope

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


_num = {"type": "number"}
_prob = {"type": "number", "minimum": 0, "maximum": 1}
_pos = {"type": "number", "exclusiveMinimum": 0}
_matrix2 = {
    "type": "array",
    "minItems": 2,
    "maxItems": 2,
    "items": {"type": "array", "minItems": 2, "maxItems": 2, "items": _num},
}


def _obj(props: dict, **extra) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props, **extra}


SCHEMA = _obj(
    {
        "schema_version": {"const": SCHEMA_VERSION},
        "root_seed": {"type": "integer", "minimum": 0},
        "source": _obj(
            {
                "p_top": _prob,
                "p_bottom": _prob,
                "theta_top": _num,
                "theta_bottom": _num,
                "overlap_v": _prob,
                "extinction_db": {"oneOf": [_pos, {"type": "null"}]},
                "arm_efficiency": {"type": "array", "minItems": 4, "maxItems": 4, "items": _prob},
                "detector_efficiency": {
                    "oneOf": [
                        {"type": "null"},
                        {
                            "type": "array",
                            "minItems": 4,
                            "maxItems": 4,
                            "items": {"type": "array", "minItems": 2, "maxItems": 2, "items": _prob},
                        },
                    ]
                },
                "fiber_unitaries": {
                    "oneOf": [
                        {"type": "null"},
                        {
                            "type": "array",
                            "minItems": 4,
                            "maxItems": 4,
                            "items": _obj({"real": _matrix2, "imag": _matrix2}, required=["real", "imag"]),
                        },
                    ]
                },
                "pulse_rate_hz": _pos,
                "n_max": {"type": "integer", "minimum": 2},
                "max_pairs": {"type": "integer", "minimum": 2},
                "noise_model": {"enum": ["physical", "white"]},
                "alpha": {"oneOf": [{"type": "number", "minimum": 0}, {"type": "null"}]},
            }
        ),
        "spectral": _obj(
            {
                "pump": _obj({"center_wavelength": _pos, "pulse_duration_fwhm": _pos, "repetition_rate": _pos}),
                "phase_matching": _obj(
                    {
                        "crystal_length": _pos,
                        "poling_period": _pos,
                        "group_velocity_slope": _num,
                        "pm_center": _pos,
                        "gv_mismatch": _num,
                    }
                ),
                "bottom_phase_matching": {"oneOf": [{"type": "null"}, {"type": "object"}]},
                "filter": _obj({"center": _pos, "fwhm": _pos, "shape": {"enum": ["gaussian", "rectangular"]}}),
                "grid": _obj({"start": _pos, "stop": _pos, "step": _pos}),
                "jitter_ps": {"type": "number", "minimum": 0},
            }
        ),
        "hom": _obj(
            {
                "visibility": {"oneOf": [_prob, {"type": "null"}]},
                "tau_fwhm_ps": _pos,
                "baseline_counts": _pos,
                "delay_range_ps": _pos,
                "n_points": {"type": "integer", "minimum": 5},
                "poisson": {"type": "boolean"},
            }
        ),
        "tomography": _obj(
            {
                "rate_hz": {"oneOf": [_pos, {"type": "null"}]},
                "acquisition_s": _pos,
                "mean_counts_per_setting": {"oneOf": [_pos, {"type": "null"}]},
                "angle_sigma_deg": {"type": "number", "minimum": 0},
                "mc_samples": {"type": "integer", "minimum": 2},
                "efficiencies": {"enum": ["calibrate", "known", "none"]},
                "workers": {"type": "integer", "minimum": 1},
            }
        ),
        "sweep": _obj(
            {
                "p_values": {"oneOf": [{"type": "null"}, {"type": "array", "items": _prob}]},
                "target_rates_hz": {"oneOf": [{"type": "null"}, {"type": "array", "items": _pos}]},
                "mc_samples": {"type": "integer", "minimum": 2},
                "min_counts": {"type": "number", "minimum": 0},
            }
        ),
        "calibration": _obj(
            {
                "anchors": {
                    "type": "array",
                    "items": _obj(
                        {
                            "rate_hz": _pos,
                            "fidelity_raw": _prob,
                            "fidelity_corrected": {"oneOf": [_prob, {"type": "null"}]},
                        },
                        required=["rate_hz", "fidelity_raw"],
                    ),
                },
                "fit_alpha": {"type": "boolean"},
                "draws": {"type": "integer", "minimum": 0},
            }
        ),
    },
    required=["schema_version"],
)

# Source values are the output of `ghzsource calibrate` on this file.
DEFAULT_CONFIG: dict = {
    "schema_version": SCHEMA_VERSION,
    "root_seed": 20240601,
    "source": {
        "p_top": 0.01,
        "p_bottom": 0.01,
        "theta_top": 0.0,
        "theta_bottom": 0.0,
        "overlap_v": 0.9628222590119779,
        "extinction_db": 29.748994733998984,
        "arm_efficiency": [0.28133302772455976] * 4,
        "detector_efficiency": None,
        "fiber_unitaries": None,
        "pulse_rate_hz": 76e6,
        "n_max": 3,
        "max_pairs": 3,
        "noise_model": "physical",
        "alpha": 0.9983508928503434,
    },
    "spectral": {
        "pump": {"center_wavelength": 774.75, "pulse_duration_fwhm": 2.0, "repetition_rate": 76.0},
        "phase_matching": {
            "crystal_length": 30.0,
            "poling_period": 46.2,
            "group_velocity_slope": -1.0,
            "pm_center": 1549.5,
            "gv_mismatch": 0.182,
        },
        "bottom_phase_matching": None,
        "filter": {"center": 1549.5, "fwhm": 1.3, "shape": "gaussian"},
        "grid": {"start": 1546.0, "stop": 1553.0, "step": 0.02},
        "jitter_ps": 0.6,
    },
    "hom": {
        "visibility": 0.9062,
        "tau_fwhm_ps": 6.03,
        "baseline_counts": 2000.0,
        "delay_range_ps": 20.0,
        "n_points": 81,
        "poisson": True,
    },
    "tomography": {
        "rate_hz": 1.7,
        "acquisition_s": 600.0,
        "mean_counts_per_setting": None,
        "angle_sigma_deg": 0.1,
        "mc_samples": 500,
        "efficiencies": "calibrate",
        "workers": 1,
    },
    "sweep": {
        "p_values": None,
        "target_rates_hz": [0.1, 0.5, 1.7, 5.0, 10.0, 25.0, 50.0, 100.0, 152.0],
        "mc_samples": 200,
        "min_counts": 1000.0,
    },
    "calibration": {
        "anchors": [
            {"rate_hz": 1.7, "fidelity_raw": 0.9473, "fidelity_corrected": None},
            {"rate_hz": 152.0, "fidelity_raw": 0.8971, "fidelity_corrected": 0.9214},
        ],
        "fit_alpha": True,
        "draws": 8,
    },
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    # build every object once so their own invariants are enforced at load
    try:
        source_config(cfg)
        spectral_objects(cfg)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path: str | Path | None = None) -> dict:
    if path is None:
        return validate(copy.deepcopy(DEFAULT_CONFIG))
    try:
        user = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    if user.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {user.get('schema_version')!r}")
    return validate(deep_merge(DEFAULT_CONFIG, user))


def source_config(cfg: dict) -> SourceConfig:
    s = dict(cfg["source"])
    if s.get("extinction_db") is None:
        s["extinction_db"] = math.inf
    if s.get("fiber_unitaries") is not None:
        s["fiber_unitaries"] = tuple(
            LocalUnitary(np.array(u["real"]) + 1j * np.array(u["imag"])) for u in s["fiber_unitaries"]
        )
    s["arm_efficiency"] = tuple(s["arm_efficiency"])
    if s.get("detector_efficiency") is not None:
        s["detector_efficiency"] = tuple(tuple(r) for r in s["detector_efficiency"])
    return SourceConfig(**s)


def source_to_json(src: SourceConfig) -> dict:
    return {
        "p_top": src.p_top,
        "p_bottom": src.p_bottom,
        "theta_top": src.theta_top,
        "theta_bottom": src.theta_bottom,
        "overlap_v": src.overlap_v,
        "extinction_db": None if math.isinf(src.extinction_db) else src.extinction_db,
        "arm_efficiency": list(src.arm_efficiency),
        "detector_efficiency": None if src.detector_efficiency is None else [list(r) for r in src.detector_efficiency],
        "fiber_unitaries": None
        if src.fiber_unitaries is None
        else [{"real": u.matrix.real.tolist(), "imag": u.matrix.imag.tolist()} for u in src.fiber_unitaries],
        "pulse_rate_hz": src.pulse_rate_hz,
        "n_max": src.n_max,
        "max_pairs": src.max_pairs,
        "noise_model": src.noise_model,
        "alpha": src.alpha,
    }


def spectral_objects(cfg: dict):
    """(pump, top phase matching, bottom phase matching, filter, grid spec)."""
    sp = cfg["spectral"]
    pm_top = PhaseMatching(**sp["phase_matching"])
    bottom = sp.get("bottom_phase_matching")
    pm_bottom = PhaseMatching(**{**sp["phase_matching"], **bottom}) if bottom else pm_top
    return PumpEnvelope(**sp["pump"]), pm_top, pm_bottom, FilterSpec(**sp["filter"]), GridSpec(**sp["grid"])


def derive_seed(root_seed: int, task: str) -> int:
    """Per-task seed: first 8 bytes of sha256("<root>:<task>")."""
    digest = hashlib.sha256(f"{root_seed}:{task}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
