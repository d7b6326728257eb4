"""Configuration files and dotted-key command-line overrides.

A pipeline configuration is a YAML mapping that mirrors PipelineConfig:
top-level keys (mode, superpixels, hypotheses, max_disparity, seed) plus an
`energy` mapping with the EnergyParams fields.  Any key can be overridden
with `--set section.key=value`; values are coerced to the target field's
type.  `lambda` is accepted as an alias for the energy field `lam`.
"""

import dataclasses

import yaml

from .errors import ConfigError
from .pipeline import PipelineConfig
from .sceneflow import EnergyParams

_ALIASES = {"lambda": "lam"}

_ENERGY_FIELDS = {f.name: f.type for f in dataclasses.fields(EnergyParams)}
_TOP_FIELDS = {
    "mode": str,
    "superpixels": int,
    "hypotheses": int,
    "max_disparity": int,
    "seed": int,
}

_SCENE_FIELDS = {
    "preset": str,
    "width": int,
    "height": int,
    "seed": int,
    "noise_sigma": float,
    "blur_model": str,
    "mode": str,
    "motion_scale": float,
}


def _coerce(value, typ, key):
    if typ is float:
        if isinstance(value, bool) or isinstance(value, (list, dict)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key} expects a number, got {value!r}") from exc
    if typ is int:
        if isinstance(value, bool):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        if isinstance(value, float) and value != int(value):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        try:
            return int(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key} expects an integer, got {value!r}") from exc
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key} expects a string, got {value!r}")
        return value
    raise ConfigError(f"unsupported field type for {key}")


def config_to_dict(config):
    energy = {f.name: getattr(config.energy, f.name)
              for f in dataclasses.fields(EnergyParams)}
    out = {name: getattr(config, name) for name in _TOP_FIELDS}
    out["energy"] = energy
    return out


def config_from_dict(data):
    """Build a validated PipelineConfig from a nested mapping."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("configuration root must be a mapping")
    energy_data = dict(data.get("energy") or {})
    top = {}
    for key, value in data.items():
        if key == "energy":
            continue
        if key not in _TOP_FIELDS:
            raise ConfigError(f"unknown configuration key {key!r}")
        top[key] = _coerce(value, _TOP_FIELDS[key], key)
    energy_kwargs = {}
    for key, value in energy_data.items():
        name = _ALIASES.get(key, key)
        if name not in _ENERGY_FIELDS:
            raise ConfigError(f"unknown configuration key energy.{key}")
        energy_kwargs[name] = _coerce(value, _ENERGY_FIELDS[name], f"energy.{key}")
    try:
        energy = EnergyParams(**energy_kwargs)
        return PipelineConfig(energy=energy, **top)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _read_yaml(path):
    try:
        with open(path) as handle:
            data = yaml.safe_load(handle)
    except FileNotFoundError as exc:
        raise ConfigError(f"configuration file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping")
    return data


def apply_overrides(data, overrides):
    """Apply `section.key=value` strings onto a nested mapping, in order."""
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override must look like key=value: {item!r}")
        parts = key.split(".")
        node = data
        for part in parts[:-1]:
            nxt = node.get(part)
            if nxt is None:
                nxt = node[part] = {}
            if not isinstance(nxt, dict):
                raise ConfigError(f"cannot override through scalar key {part!r}")
            node = nxt
        node[parts[-1]] = value
    return data


def load_config(path=None, overrides=(), seed=None):
    """Configuration from an optional file, overrides and a seed flag."""
    data = _read_yaml(path) if path else {}
    apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = seed
    return config_from_dict(data)


def load_scene_request(path, overrides=(), seed=None):
    """Scene-synthesis request: preset name plus generation parameters."""
    data = _read_yaml(path) if path else {}
    apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = seed
    out = {}
    for key, value in data.items():
        if key not in _SCENE_FIELDS:
            raise ConfigError(f"unknown scene key {key!r}")
        out[key] = _coerce(value, _SCENE_FIELDS[key], key)
    out.setdefault("preset", "two_object")
    return out
