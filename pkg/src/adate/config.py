"""Run configuration: YAML file plus ``key=value`` overrides, resolved and validated.

A config names a grid preset (or an inline grid), the naturalistic policy,
the surrogate set, the vehicle under test, learner and campaign settings,
the master seed and an output directory. Presets fill in policy and
initial-state defaults suited to their grid.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import yaml

from .mdp import (MODEL_LIBRARY, DiscreteChain, DriverModelParams, GridSpec, MixedDriver, ValidationError, build_chain,
                  make_grid, naturalistic_table)
from .mixture import AdateConfig
from .testing import CampaignConfig, InitialDistribution

DESK_BOX = {"v_BV": [15.0, 30.0], "R1": [20.0, 50.0], "R1dot": [-4.0, 4.0], "R2": [15.0, 50.0], "R2dot": [-4.0, 1.0]}

PRESET_DEFAULTS = {
    "tiny": {"policy": {"sigma": 3.0, "floor": 0.1}, "campaign": {"init": "all"}},
    "desk": {"policy": {"sigma": 1.0, "floor": 1e-3}, "campaign": {"init": {"box": DESK_BOX}}},
}

DEFAULTS = {
    "grid": "tiny",
    "policy": {"sigma": 1.0, "floor": 1e-3, "lv": "lv", "bv": "bv"},
    "surrogates": ["sm1", "sm2", "sm3"],
    "av": "av1",
    "learner": {"c": 2.0, "omega": 0.6, "gamma": 1.0, "delta": 10, "asd_threshold": 0.02,
                "max_iterations": 200_000, "min_iterations": 50_000, "solve_interval": 1,
                "behavior": "adaptive", "truncate": True},
    "campaign": {"epsilon": 0.1, "episodes": 100_000, "rhw_threshold": 0.3, "confidence": 0.95,
                 "bootstrap_reps": 100, "n_min": 100, "chunk_size": 10_000, "init": "all"},
    "seed": 0,
    "out": "runs/default",
}

TOP_KEYS = set(DEFAULTS)


class ConfigError(ValidationError):
    """Configuration problem addressed by field path or file line."""

    def __init__(self, where: str, message: str):
        super().__init__(f"{where}: {message}")
        self.where = where


def derive_seed(master: int, label: str) -> int:
    """Per-purpose 64-bit seed from the master seed by labeled hashing."""
    digest = hashlib.sha256(f"{int(master)}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text: str) -> tuple[list, object]:
    """``a.b=value`` with the value parsed as YAML (numbers, lists, booleans)."""
    if "=" not in text:
        raise ConfigError("--set", f"expected KEY=VALUE, got {text!r}")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError("--set", f"empty key in {text!r}")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as exc:
        raise ConfigError(f"--set {key}", f"cannot parse value {raw!r}: {exc}") from None
    return key.split("."), value


def apply_overrides(raw: dict, overrides) -> dict:
    out = copy.deepcopy(raw)
    for item in overrides or ():
        path, value = parse_override(item)
        node = out
        for part in path[:-1]:
            nxt = node.get(part)
            if nxt is None:
                nxt = node[part] = {}
            elif not isinstance(nxt, dict):
                # a scalar such as ``grid: tiny`` becomes a mapping with that preset
                nxt = node[part] = {"preset": nxt} if part == "grid" else {}
            node = nxt
        node[path[-1]] = value
    return out


def load_yaml(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path} line {mark.line + 1}" if mark is not None else str(path)
        raise ConfigError(where, getattr(exc, "problem", None) or str(exc)) from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(str(path), "top level must be a mapping")
    return data


# ---------------------------------------------------------------------------
# model and grid resolution


def resolve_model(spec, where: str):
    """Library name, inline parameter mapping or ``{mix: [[weight, spec], ...]}``."""
    if isinstance(spec, str):
        if spec not in MODEL_LIBRARY:
            raise ConfigError(where, f"unknown model {spec!r}; library has {sorted(MODEL_LIBRARY)}")
        return MODEL_LIBRARY[spec]
    if isinstance(spec, dict) and "mix" in spec:
        items = spec["mix"]
        if not isinstance(items, list) or not items:
            raise ConfigError(where + ".mix", "expected a non-empty list of [weight, model]")
        weights, models = [], []
        for i, item in enumerate(items):
            if not isinstance(item, (list, tuple)) or len(item) != 2:
                raise ConfigError(f"{where}.mix[{i}]", "expected [weight, model]")
            weights.append(float(item[0]))
            models.append(resolve_model(item[1], f"{where}.mix[{i}]"))
        try:
            return MixedDriver(tuple(models), tuple(weights), spec.get("name", "mixed"))
        except ValidationError as exc:
            raise ConfigError(where, str(exc)) from None
    if isinstance(spec, dict):
        d = dict(spec)
        base = d.pop("base", None)
        params = asdict(resolve_model(base, where + ".base")) if base is not None else {}
        known = {f.name for f in fields(DriverModelParams)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(where, f"unknown model fields {sorted(unknown)}")
        params.update(d)
        try:
            return DriverModelParams(**params)
        except (ValidationError, TypeError) as exc:
            raise ConfigError(where, str(exc)) from None
    raise ConfigError(where, f"cannot interpret model spec {spec!r}")


def model_to_dict(model) -> dict:
    if isinstance(model, MixedDriver):
        return {"mix": [[float(w), model_to_dict(m)] for w, m in model.branches()], "name": model.name}
    return model.to_dict()


def _grid_preset(spec) -> str | None:
    if isinstance(spec, str):
        return spec
    if isinstance(spec, dict):
        return spec.get("preset")
    return None


def resolve_grid(spec) -> GridSpec:
    try:
        if isinstance(spec, str):
            return make_grid(spec)
        if isinstance(spec, dict):
            return GridSpec.from_dict(spec)
    except (ValidationError, TypeError, KeyError) as exc:
        raise ConfigError("grid", str(exc)) from None
    raise ConfigError("grid", "expected a preset name or a mapping")


# ---------------------------------------------------------------------------
# resolved configuration


@dataclass
class RunConfig:
    grid: GridSpec
    sigma: float
    floor: float
    lv: DriverModelParams
    bv: DriverModelParams
    surrogates: dict
    av: object
    learner: AdateConfig
    campaign: CampaignConfig
    bootstrap_reps: int
    init: object
    seed: int
    out: Path
    raw: dict

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config", "top level must be a mapping")
        unknown = set(data) - TOP_KEYS
        if unknown:
            raise ConfigError("config", f"unknown keys {sorted(unknown)}")
        g = data.get("grid", DEFAULTS["grid"])
        if isinstance(g, dict) and "edges" not in g and "preset" not in g:
            data = {**data, "grid": {"preset": DEFAULTS["grid"], **g}}
        preset = _grid_preset(data.get("grid", DEFAULTS["grid"]))
        base = _deep_merge(DEFAULTS, PRESET_DEFAULTS.get(preset, {}))
        raw = _deep_merge(base, data)
        for section in ("policy", "learner", "campaign"):
            if not isinstance(raw[section], dict):
                raise ConfigError(section, "expected a mapping")
            extra = set(raw[section]) - set(DEFAULTS[section])
            if extra:
                raise ConfigError(section, f"unknown keys {sorted(extra)}")

        grid = resolve_grid(raw["grid"])
        pol = raw["policy"]
        sigma, floor = _number(pol, "sigma", "policy"), _number(pol, "floor", "policy")
        if sigma <= 0:
            raise ConfigError("policy.sigma", "must be > 0")
        if not 0 < floor < 1.0 / grid.n_accel:
            raise ConfigError("policy.floor", f"must lie in (0, {1.0 / grid.n_accel:g}) for full support")
        lv = resolve_model(pol["lv"], "policy.lv")
        bv = resolve_model(pol["bv"], "policy.bv")

        sms = raw["surrogates"]
        if not isinstance(sms, list) or not sms:
            raise ConfigError("surrogates", "expected a non-empty list")
        surrogates = {}
        for i, spec in enumerate(sms):
            model = resolve_model(spec, f"surrogates[{i}]")
            label = spec if isinstance(spec, str) else (model_name(model) or f"sm{i + 1}")
            if label in surrogates:
                label = f"{label}_{i + 1}"
            surrogates[label] = model
        av = resolve_model(raw["av"], "av")

        try:
            learner = AdateConfig(**raw["learner"], seed=0)
        except (ValidationError, TypeError) as exc:
            raise ConfigError("learner", str(exc)) from None
        camp = dict(raw["campaign"])
        reps = camp.pop("bootstrap_reps")
        init = camp.pop("init")
        if not isinstance(reps, int) or reps < 1:
            raise ConfigError("campaign.bootstrap_reps", "must be a positive integer")
        try:
            campaign = CampaignConfig(**camp)
        except (ValidationError, TypeError) as exc:
            raise ConfigError("campaign", str(exc)) from None
        _check_init(init, grid)
        seed = raw["seed"]
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed", "must be a nonnegative integer")
        return cls(grid, sigma, floor, lv, bv, surrogates, av, learner, campaign, reps, init, seed,
                   Path(str(raw["out"])), raw)

    @classmethod
    def load(cls, path=None, overrides=(), seed: int | None = None, out=None) -> "RunConfig":
        data = load_yaml(path) if path is not None else {}
        data = apply_overrides(data, overrides)
        if seed is not None:
            data["seed"] = seed
        if out is not None:
            data["out"] = str(out)
        return cls.from_dict(data)

    # derived objects

    def canonical(self) -> dict:
        """Fully resolved settings that define the experiment (seed and output excluded)."""
        return {
            "grid": self.grid.to_dict() | {"name": self.grid.name},
            "policy": {"sigma": self.sigma, "floor": self.floor, "lv": model_to_dict(self.lv),
                       "bv": model_to_dict(self.bv)},
            "surrogates": {k: model_to_dict(m) for k, m in self.surrogates.items()},
            "av": model_to_dict(self.av),
            "learner": {k: v for k, v in asdict(self.learner).items() if k != "seed"},
            "campaign": asdict(self.campaign) | {"bootstrap_reps": self.bootstrap_reps, "init": self.init},
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def seed_for(self, label: str) -> int:
        return derive_seed(self.seed, label)

    def rng(self, label: str) -> np.random.Generator:
        return np.random.default_rng(self.seed_for(label))

    def phi(self) -> np.ndarray:
        return naturalistic_table(self.grid, self.lv, self.bv, self.sigma, self.floor)

    def chain(self, model) -> DiscreteChain:
        return build_chain(self.grid, model)

    def initial(self) -> InitialDistribution:
        if self.init == "all":
            return InitialDistribution.uniform(self.grid)
        return InitialDistribution.box(self.grid, self.init["box"])

    def learner_config(self) -> AdateConfig:
        d = asdict(self.learner)
        d["seed"] = self.seed_for("learning")
        return AdateConfig(**d)


def model_name(model) -> str:
    return getattr(model, "name", "") or ""


def _number(d: dict, key: str, section: str) -> float:
    v = d.get(key)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{section}.{key}", f"expected a number, got {v!r}")
    return float(v)


def _check_init(init, grid: GridSpec) -> None:
    if init == "all":
        return
    if not isinstance(init, dict) or set(init) != {"box"} or not isinstance(init["box"], dict):
        raise ConfigError("campaign.init", "expected 'all' or {box: {field: [lo, hi], ...}}")
    for name, bounds in init["box"].items():
        if not isinstance(bounds, list) or len(bounds) != 2 or bounds[0] > bounds[1]:
            raise ConfigError(f"campaign.init.box.{name}", "expected [lo, hi] with lo <= hi")
    try:
        InitialDistribution.box(grid, init["box"])
    except ValidationError as exc:
        raise ConfigError("campaign.init.box", str(exc)) from None
