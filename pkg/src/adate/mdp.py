"""Discretized overtaking scenario: kinematics, driver models, grid and chain.

The scenario has three vehicles on one longitudinal axis: a leading vehicle
(LV), a background vehicle (BV) following it, and the vehicle under test (AV)
following the BV. The background vehicles pick accelerations from a grid; the
AV reacts through a car-following model. The state seen by the testing
environment is ``[v_BV, R1, R1dot, R2, R2dot]``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

CRASH_FLAG = "CRASH"
EXIT_FLAG = "EXIT"
HORIZON_FLAG = "HORIZON"

EPS_GAP = 0.1

STATE_FIELDS = ("v_BV", "R1", "R1dot", "R2", "R2dot")


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


# ---------------------------------------------------------------------------
# state types


@dataclass(frozen=True)
class KinematicState:
    x_LV: float
    x_BV: float
    x_AV: float
    v_LV: float
    v_BV: float
    v_AV: float

    def scenario(self) -> "ScenarioState":
        return ScenarioState(
            v_BV=self.v_BV,
            R1=self.x_LV - self.x_BV,
            R1dot=self.v_LV - self.v_BV,
            R2=self.x_BV - self.x_AV,
            R2dot=self.v_BV - self.v_AV,
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.x_LV, self.x_BV, self.x_AV, self.v_LV, self.v_BV, self.v_AV])


@dataclass(frozen=True)
class ScenarioState:
    v_BV: float
    R1: float
    R1dot: float
    R2: float
    R2dot: float

    def as_array(self) -> np.ndarray:
        return np.array([self.v_BV, self.R1, self.R1dot, self.R2, self.R2dot])

    def kinematic(self, v_max: float = math.inf) -> KinematicState:
        """Place the BV at the origin and recover absolute speeds.

        Speeds are clipped to ``[0, v_max]``; a scenario state whose implied
        LV or AV speed is negative cannot be represented exactly.
        """
        return KinematicState(
            x_LV=self.R1,
            x_BV=0.0,
            x_AV=-self.R2,
            v_LV=float(np.clip(self.v_BV + self.R1dot, 0.0, v_max)),
            v_BV=float(np.clip(self.v_BV, 0.0, v_max)),
            v_AV=float(np.clip(self.v_BV - self.R2dot, 0.0, v_max)),
        )


@dataclass(frozen=True)
class JointAction:
    a_LV: float
    a_BV: float


# ---------------------------------------------------------------------------
# driver models


class DriverModel(Protocol):
    """Anything that maps (gap, own speed, leader speed) to an acceleration.

    Implementations must accept numpy arrays and broadcast.
    """

    def accel(self, gap, v_self, v_lead): ...


@dataclass(frozen=True)
class DriverModelParams:
    """Parameters of a car-following model.

    ``kind`` selects the formula: ``"idm"``, ``"fvdm"`` or ``"scripted"``
    (a linear gap/speed controller). Fields not used by a kind are ignored.
    """

    kind: str = "idm"
    name: str = ""
    # IDM
    v0: float = 33.3
    time_headway: float = 1.5
    accel_max: float = 2.0
    decel_comf: float = 2.0
    s0: float = 2.0
    delta: float = 4.0
    # FVDM
    kappa: float = 0.41
    lam: float = 0.5
    b_opt: float = 6.75
    c_opt: float = 1.57
    # scripted controller
    k_gap: float = 0.2
    k_speed: float = 0.6
    # output clamp
    a_min: float = -4.0
    a_max: float = 2.0

    def __post_init__(self):
        if self.kind not in ("idm", "fvdm", "scripted"):
            raise ValidationError(f"unknown driver model kind {self.kind!r}")
        if not self.a_min < 0.0 < self.a_max:
            raise ValidationError("driver model needs a_min < 0 < a_max")
        rates = {"idm": ("v0", "time_headway", "accel_max", "decel_comf", "delta"),
                 "fvdm": ("v0", "kappa", "lam", "b_opt"),
                 "scripted": ()}[self.kind]
        for name in rates:
            if not getattr(self, name) > 0.0:
                raise ValidationError(f"{self.kind} parameter {name} must be > 0")

    @classmethod
    def idm(cls, **kw) -> "DriverModelParams":
        return cls(kind="idm", **kw)

    @classmethod
    def fvdm(cls, **kw) -> "DriverModelParams":
        return cls(kind="fvdm", **kw)

    @classmethod
    def scripted(cls, **kw) -> "DriverModelParams":
        return cls(kind="scripted", **kw)

    def v_opt(self, gap):
        """Optimal-velocity function of the FVDM."""
        gap = np.asarray(gap, dtype=float)
        return 0.5 * self.v0 * (np.tanh(gap / self.b_opt - self.c_opt) + np.tanh(self.c_opt))

    def accel(self, gap, v_self, v_lead):
        return model_accel(self, gap, v_self, v_lead)

    def to_dict(self) -> dict:
        return asdict(self)


def model_accel(params: DriverModelParams, gap, v_self, v_lead):
    """Car-following acceleration, clamped to ``[a_min, a_max]``.

    ``gap`` is the bumper-to-bumper distance; ``np.inf`` means free driving.
    Non-positive finite gaps are replaced by ``EPS_GAP``.
    """
    gap = np.asarray(gap, dtype=float)
    v = np.asarray(v_self, dtype=float)
    v_lead = np.asarray(v_lead, dtype=float)
    gap = np.where(gap <= 0.0, EPS_GAP, gap)
    p = params
    if p.kind == "idm":
        dv = v - v_lead
        s_star = p.s0 + v * p.time_headway + v * dv / (2.0 * math.sqrt(p.accel_max * p.decel_comf))
        with np.errstate(invalid="ignore", over="ignore"):
            interaction = np.where(np.isinf(gap), 0.0, (s_star / gap) ** 2)
        acc = p.accel_max * (1.0 - (v / p.v0) ** p.delta - interaction)
    elif p.kind == "fvdm":
        acc = p.kappa * (p.v_opt(gap) - v) + p.lam * (v_lead - v)
    else:
        with np.errstate(invalid="ignore"):
            spacing = np.where(np.isinf(gap), 0.0, gap - p.s0 - p.time_headway * v)
        acc = p.k_gap * spacing + p.k_speed * (v_lead - v)
    out = np.clip(acc, p.a_min, p.a_max)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class MixedDriver:
    """A stochastic AV that follows ``models[k]`` with probability ``weights[k]``.

    The draw happens independently at every decision epoch.
    """

    models: tuple
    weights: tuple
    name: str = "mixed"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if len(self.models) != len(w) or len(w) == 0:
            raise ValidationError("MixedDriver needs one weight per model")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValidationError("MixedDriver weights must lie on the simplex")

    def branches(self):
        return list(zip(self.weights, self.models))


def driver_branches(av) -> list:
    if isinstance(av, MixedDriver):
        return av.branches()
    return [(1.0, av)]


def model_name(av) -> str:
    name = getattr(av, "name", "")
    return name or getattr(av, "kind", type(av).__name__)


# named models used throughout (SM-I..III, AV-I..III)

IDM_DEFAULT = DriverModelParams.idm(name="IDM")
IDM_CALIBRATED = DriverModelParams.idm(
    name="IDM-calibrated", v0=30.0, time_headway=1.1, accel_max=1.5, decel_comf=2.5, s0=1.5, a_min=-5.0,
    a_max=1.5,
)
FVDM_AGGRESSIVE = DriverModelParams.fvdm(name="FVDM-amin1", a_min=-1.0, a_max=2.0)
FVDM_CONSERVATIVE = DriverModelParams.fvdm(name="FVDM-amin6", a_min=-6.0, a_max=2.0)
SCRIPTED_ACC = DriverModelParams.scripted(name="scripted-ACC", time_headway=1.2, s0=3.0, a_min=-5.0)

LV_DEFAULT = DriverModelParams.idm(name="LV", v0=25.0, a_min=-4.0)
BV_DEFAULT = DriverModelParams.idm(name="BV", a_min=-4.0)

MODEL_LIBRARY = {
    "sm1": IDM_DEFAULT,
    "sm2": FVDM_AGGRESSIVE,
    "sm3": FVDM_CONSERVATIVE,
    "av1": IDM_DEFAULT,
    "av2": IDM_CALIBRATED,
    "av3": SCRIPTED_ACC,
    "lv": LV_DEFAULT,
    "bv": BV_DEFAULT,
}

SURROGATES = (IDM_DEFAULT, FVDM_AGGRESSIVE, FVDM_CONSERVATIVE)


# ---------------------------------------------------------------------------
# grid


def _edges(lo: float, hi: float, n: int) -> tuple:
    return tuple(float(x) for x in np.linspace(lo, hi, n + 1))


@dataclass(frozen=True)
class GridSpec:
    """Bin edges for the five state dimensions plus simulation constants.

    Each decision epoch holds the background accelerations for ``substeps``
    integration steps of length ``dt``; ``horizon`` counts decision epochs.
    """

    edges: tuple
    accel_grid: tuple = (-6.0, -4.0, -2.0, 0.0, 2.0)
    dt: float = 0.1
    substeps: int = 10
    horizon: int = 20
    length: float = 5.0
    v_max: float = 40.0
    r_max: float = 65.0
    name: str = "custom"

    def __post_init__(self):
        if len(self.edges) != 5:
            raise ValidationError("GridSpec needs bin edges for exactly 5 state dimensions")
        edges = tuple(tuple(float(e) for e in dim) for dim in self.edges)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "accel_grid", tuple(float(a) for a in self.accel_grid))
        for name, dim in zip(STATE_FIELDS, edges):
            if len(dim) < 2 or np.any(np.diff(dim) <= 0):
                raise ValidationError(f"bin edges for {name} must be strictly increasing")
        if len(self.accel_grid) == 0 or np.any(np.diff(self.accel_grid) <= 0):
            raise ValidationError("acceleration grid must be non-empty and sorted")
        if self.dt <= 0 or self.substeps < 1 or self.horizon < 1:
            raise ValidationError("dt, substeps and horizon must be positive")

    @property
    def shape(self) -> tuple:
        return tuple(len(e) - 1 for e in self.edges)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.shape))

    @property
    def n_states(self) -> int:
        return self.n_cells + 2

    @property
    def crash(self) -> int:
        return self.n_cells

    @property
    def exit(self) -> int:
        return self.n_cells + 1

    @property
    def n_accel(self) -> int:
        return len(self.accel_grid)

    @property
    def n_actions(self) -> int:
        return self.n_accel ** 2

    def is_terminal(self, s) -> np.ndarray | bool:
        return np.asarray(s) >= self.n_cells

    def action(self, index: int) -> JointAction:
        i, j = divmod(int(index), self.n_accel)
        return JointAction(self.accel_grid[i], self.accel_grid[j])

    def action_index(self, action: JointAction) -> int:
        try:
            i = self.accel_grid.index(float(action.a_LV))
            j = self.accel_grid.index(float(action.a_BV))
        except ValueError:
            raise ValidationError(f"{action} is not on the acceleration grid") from None
        return i * self.n_accel + j

    def action_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(a_LV, a_BV) for every joint-action index, LV-major."""
        acc = np.asarray(self.accel_grid)
        return np.repeat(acc, self.n_accel), np.tile(acc, self.n_accel)

    def bin_centers(self) -> list:
        return [0.5 * (np.asarray(e[:-1]) + np.asarray(e[1:])) for e in self.edges]

    def centers(self) -> np.ndarray:
        """Cell centers, shape ``(n_cells, 5)``, in row-major index order."""
        mids = self.bin_centers()
        mesh = np.meshgrid(*mids, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def center(self, s: int) -> ScenarioState:
        if not 0 <= s < self.n_cells:
            raise ValidationError(f"state {s} has no cell center")
        idx = np.unravel_index(int(s), self.shape)
        mids = self.bin_centers()
        return ScenarioState(*(float(mids[d][idx[d]]) for d in range(5)))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "edges": [list(e) for e in self.edges],
            "accel_grid": list(self.accel_grid),
            "dt": self.dt,
            "substeps": self.substeps,
            "horizon": self.horizon,
            "length": self.length,
            "v_max": self.v_max,
            "r_max": self.r_max,
        }

    def grid_hash(self) -> str:
        d = self.to_dict()
        d.pop("name")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        d = dict(d)
        if "preset" in d:
            base = make_grid(d.pop("preset"))
            merged = base.to_dict()
            merged.update(d)
            d = merged
        d["edges"] = tuple(tuple(e) for e in d["edges"])
        d["accel_grid"] = tuple(d.get("accel_grid", cls.accel_grid))
        return cls(**d)


def desk_grid(**overrides) -> GridSpec:
    L = overrides.get("length", 5.0)
    r_max = overrides.get("r_max", 65.0)
    kw = dict(
        edges=(
            _edges(10.0, 35.0, 10),
            _edges(L, r_max, 12),
            _edges(-12.0, 12.0, 7),
            _edges(L, r_max, 12),
            _edges(-12.0, 12.0, 7),
        ),
        name="desk",
    )
    kw.update(overrides)
    return GridSpec(**kw)


def tiny_grid(**overrides) -> GridSpec:
    L = overrides.get("length", 5.0)
    kw = dict(
        edges=(
            _edges(15.0, 25.0, 2),
            _edges(L, 35.0, 3),
            _edges(-6.0, 6.0, 3),
            _edges(L, 25.0, 5),
            _edges(-9.0, 9.0, 3),
        ),
        horizon=6,
        r_max=35.0,
        name="tiny",
    )
    kw.update(overrides)
    return GridSpec(**kw)


PRESETS = {"desk": desk_grid, "tiny": tiny_grid}


def make_grid(name: str, **overrides) -> GridSpec:
    try:
        return PRESETS[name](**overrides)
    except KeyError:
        raise ValidationError(f"unknown grid preset {name!r}; choose from {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# crash predicate, discretization, kinematics


def is_crash(state: ScenarioState, grid: GridSpec) -> bool:
    return bool(state.R2 <= grid.length)


def discretize_array(states: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Vectorized ``discretize`` for an ``(n, 5)`` array of scenario states."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    n = len(states)
    idx = np.zeros(n, dtype=np.int64)
    inside = np.ones(n, dtype=bool)
    for d, e in enumerate(grid.edges):
        e = np.asarray(e)
        col = states[:, d]
        b = np.searchsorted(e, col, side="right") - 1
        # the top edge belongs to the last bin
        b = np.where(col == e[-1], len(e) - 2, b)
        inside &= (b >= 0) & (b < len(e) - 1)
        idx = idx * (len(e) - 1) + np.clip(b, 0, len(e) - 2)
    # BV-LV contact and out-of-range states leave the scenario
    inside &= states[:, 1] > grid.length
    out = np.where(inside, idx, grid.exit)
    return np.where(states[:, 3] <= grid.length, grid.crash, out)


def discretize(state: ScenarioState, grid: GridSpec) -> int:
    """Row-major cell index of ``state``; CRASH/EXIT for terminal states."""
    return int(discretize_array(state.as_array()[None, :], grid)[0])


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValidationError("non-finite state or action")


def _advance(x, v, acc, grid: GridSpec):
    x = x + v * grid.dt + 0.5 * acc * grid.dt ** 2
    v = np.clip(v + acc * grid.dt, 0.0, grid.v_max)
    return x, v


def _terminal_code(x_LV, x_BV, x_AV, grid: GridSpec) -> np.ndarray:
    """0 = running, 1 = crash, 2 = exit."""
    r1 = x_LV - x_BV
    r2 = x_BV - x_AV
    crash = r2 <= grid.length
    exit_ = (r1 <= grid.length) | (r2 > grid.r_max) | (r1 > grid.r_max)
    return np.where(crash, 1, np.where(exit_, 2, 0))


def av_accel(av, x_BV, x_AV, v_BV, v_AV, grid: GridSpec):
    return av.accel(x_BV - x_AV - grid.length, v_AV, v_BV)


def step(state: KinematicState, action: JointAction, av_model, grid: GridSpec) -> tuple:
    """Advance one integration step of length ``grid.dt``.

    Returns ``(next_state, flag)`` with flag ``CRASH``, ``EXIT`` or ``None``.
    """
    arr = state.as_array()
    _check_finite(arr, [action.a_LV, action.a_BV])
    x_LV, x_BV, x_AV, v_LV, v_BV, v_AV = arr
    a_AV = av_accel(av_model, x_BV, x_AV, v_BV, v_AV, grid)
    x_LV, v_LV = _advance(x_LV, v_LV, action.a_LV, grid)
    x_BV, v_BV = _advance(x_BV, v_BV, action.a_BV, grid)
    x_AV, v_AV = _advance(x_AV, v_AV, a_AV, grid)
    code = int(_terminal_code(x_LV, x_BV, x_AV, grid))
    nxt = KinematicState(float(x_LV), float(x_BV), float(x_AV), float(v_LV), float(v_BV), float(v_AV))
    return nxt, (None, CRASH_FLAG, EXIT_FLAG)[code]


def decision_step(state: KinematicState, action: JointAction, av_model, grid: GridSpec) -> tuple:
    """Hold ``action`` for ``grid.substeps`` integration steps, stopping early on a terminal event."""
    flag = None
    for _ in range(grid.substeps):
        state, flag = step(state, action, av_model, grid)
        if flag is not None:
            break
    return state, flag


def successor_states(grid: GridSpec, av_model) -> np.ndarray:
    """Successor cell of every (cell, joint action) for a deterministic AV.

    Starts from the cell center (speeds clipped to ``[0, v_max]``), holds the
    joint action for one decision epoch and snaps the result back to the grid.
    Returns an int array of shape ``(n_cells, n_actions)``.
    """
    c = grid.centers()
    a_lv, a_bv = grid.action_arrays()
    n, m = grid.n_cells, grid.n_actions
    v_BV = np.clip(c[:, 0], 0.0, grid.v_max)[:, None].repeat(m, 1)
    v_LV = np.clip(c[:, 0] + c[:, 2], 0.0, grid.v_max)[:, None].repeat(m, 1)
    v_AV = np.clip(c[:, 0] - c[:, 4], 0.0, grid.v_max)[:, None].repeat(m, 1)
    x_BV = np.zeros((n, m))
    x_LV = c[:, 1][:, None].repeat(m, 1)
    x_AV = -c[:, 3][:, None].repeat(m, 1)
    a_lv = np.broadcast_to(a_lv, (n, m))
    a_bv = np.broadcast_to(a_bv, (n, m))
    code = np.zeros((n, m), dtype=np.int64)
    for _ in range(grid.substeps):
        live = code == 0
        acc = av_accel(av_model, x_BV, x_AV, v_BV, v_AV, grid)
        nx_LV, nv_LV = _advance(x_LV, v_LV, a_lv, grid)
        nx_BV, nv_BV = _advance(x_BV, v_BV, a_bv, grid)
        nx_AV, nv_AV = _advance(x_AV, v_AV, acc, grid)
        x_LV, v_LV = np.where(live, nx_LV, x_LV), np.where(live, nv_LV, v_LV)
        x_BV, v_BV = np.where(live, nx_BV, x_BV), np.where(live, nv_BV, v_BV)
        x_AV, v_AV = np.where(live, nx_AV, x_AV), np.where(live, nv_AV, v_AV)
        code = np.where(live, _terminal_code(x_LV, x_BV, x_AV, grid), code)
        if not np.any(code == 0):
            break
    scen = np.stack([v_BV, x_LV - x_BV, v_LV - v_BV, x_BV - x_AV, v_BV - v_AV], axis=-1)
    nxt = discretize_array(scen.reshape(-1, 5), grid).reshape(n, m)
    nxt = np.where(code == 1, grid.crash, nxt)
    return np.where(code == 2, grid.exit, nxt)


# ---------------------------------------------------------------------------
# naturalistic policy


def _marginal(mean: np.ndarray, grid: GridSpec, sigma: float, floor: float) -> np.ndarray:
    acc = np.asarray(grid.accel_grid)
    z2 = ((acc[None, :] - np.asarray(mean, dtype=float)[:, None]) / sigma) ** 2
    # shift by the row minimum so far-off means cannot underflow every entry
    dens = np.exp(-0.5 * (z2 - z2.min(axis=1, keepdims=True)))
    p = dens / dens.sum(axis=1, keepdims=True)
    p = np.maximum(p, floor)
    return p / p.sum(axis=1, keepdims=True)


def background_means(grid: GridSpec, lv_params, bv_params) -> tuple[np.ndarray, np.ndarray]:
    """Car-following accelerations of LV (free road) and BV (behind LV) at every cell center."""
    c = grid.centers()
    v_BV = np.clip(c[:, 0], 0.0, grid.v_max)
    v_LV = np.clip(c[:, 0] + c[:, 2], 0.0, grid.v_max)
    a_lv = lv_params.accel(np.full(len(c), np.inf), v_LV, v_LV)
    a_bv = bv_params.accel(c[:, 1] - grid.length, v_BV, v_LV)
    return np.atleast_1d(a_lv), np.atleast_1d(a_bv)


def naturalistic_table(
    grid: GridSpec,
    lv_params=LV_DEFAULT,
    bv_params=BV_DEFAULT,
    sigma: float = 1.0,
    floor: float = 1e-3,
) -> np.ndarray:
    """Naturalistic joint-action distribution for every state.

    Each background vehicle's marginal is a Gaussian over the acceleration
    grid centred on its car-following acceleration, floored at ``floor`` and
    renormalized; the joint is the product. Terminal rows are uniform so
    every row is a distribution; they are never sampled.
    """
    if sigma <= 0 or floor < 0:
        raise ValidationError("need sigma > 0 and floor >= 0")
    m_lv, m_bv = background_means(grid, lv_params, bv_params)
    p_lv = _marginal(m_lv, grid, sigma, floor)
    p_bv = _marginal(m_bv, grid, sigma, floor)
    joint = (p_lv[:, :, None] * p_bv[:, None, :]).reshape(grid.n_cells, grid.n_actions)
    phi = np.full((grid.n_states, grid.n_actions), 1.0 / grid.n_actions)
    phi[: grid.n_cells] = joint
    return phi


def naturalistic_policy(
    s: int,
    grid: GridSpec,
    lv_params=LV_DEFAULT,
    bv_params=BV_DEFAULT,
    sigma: float = 1.0,
    floor: float = 1e-3,
) -> np.ndarray:
    if grid.is_terminal(s):
        raise ValidationError("naturalistic policy is undefined on terminal states")
    c = grid.center(s)
    v_LV = min(max(c.v_BV + c.R1dot, 0.0), grid.v_max)
    v_BV = min(max(c.v_BV, 0.0), grid.v_max)
    m_lv = lv_params.accel(np.inf, v_LV, v_LV)
    m_bv = bv_params.accel(c.R1 - grid.length, v_BV, v_LV)
    p_lv = _marginal(np.atleast_1d(m_lv), grid, sigma, floor)[0]
    p_bv = _marginal(np.atleast_1d(m_bv), grid, sigma, floor)[0]
    return np.outer(p_lv, p_bv).ravel()


# ---------------------------------------------------------------------------
# the finite chain


@dataclass
class DiscreteChain:
    """Finite MDP over grid cells plus the CRASH and EXIT absorbing states.

    ``succ[s, a, k]`` is the k-th possible successor with probability
    ``prob[s, a, k]``; rows of terminal states are never read.
    """

    grid: GridSpec
    succ: np.ndarray
    prob: np.ndarray
    horizon: int
    label: str = ""
    _cum: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.succ.ndim == 2:
            self.succ = self.succ[:, :, None]
        if self.prob is None:
            self.prob = np.ones(self.succ.shape)
        if self.succ.shape != self.prob.shape:
            raise ValidationError("successor and probability tables disagree in shape")
        self._cum = np.cumsum(self.prob, axis=2)

    @property
    def n_states(self) -> int:
        return self.succ.shape[0]

    @property
    def n_actions(self) -> int:
        return self.succ.shape[1]

    @property
    def crash(self) -> int:
        return self.grid.crash

    @property
    def exit(self) -> int:
        return self.grid.exit

    @property
    def deterministic(self) -> bool:
        return self.succ.shape[2] == 1

    def is_terminal(self, s):
        return np.asarray(s) >= self.grid.n_cells

    def next_state(self, s, a, rng: np.random.Generator):
        """Sample successors for (arrays of) states and actions."""
        s = np.asarray(s)
        a = np.asarray(a)
        if self.deterministic:
            return self.succ[s, a, 0]
        u = rng.random(s.shape)
        k = (self._cum[s, a] < u[..., None]).sum(axis=-1)
        k = np.minimum(k, self.succ.shape[2] - 1)
        return self.succ[s, a, k]


def build_chain(grid: GridSpec, av_model, horizon: int | None = None) -> DiscreteChain:
    """Discretized transition kernel with ``av_model`` as the vehicle under test."""
    branches = driver_branches(av_model)
    n, m = grid.n_states, grid.n_actions
    succ = np.empty((n, m, len(branches)), dtype=np.int64)
    prob = np.empty((n, m, len(branches)))
    for k, (w, model) in enumerate(branches):
        succ[: grid.n_cells, :, k] = successor_states(grid, model)
        prob[:, :, k] = w
    succ[grid.n_cells:] = np.arange(grid.n_cells, n)[:, None, None]
    return DiscreteChain(grid, succ, prob, grid.horizon if horizon is None else horizon,
                         label=model_name(av_model))


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    states: list
    actions: list
    av_accels: list
    terminal_state: ScenarioState
    terminal_flag: str

    def __len__(self) -> int:
        return len(self.actions)

    def rows(self, grid: GridSpec) -> Iterable[dict]:
        T = grid.dt * grid.substeps
        for t, (s, a, acc) in enumerate(zip(self.states, self.actions, self.av_accels)):
            yield {"t": round(t * T, 10), **asdict(s), "a_LV": a.a_LV, "a_BV": a.a_BV,
                   "a_AV": acc, "terminal_flag": ""}
        yield {"t": round(len(self.actions) * T, 10), **asdict(self.terminal_state),
               "a_LV": "", "a_BV": "", "a_AV": "", "terminal_flag": self.terminal_flag}

    def to_csv(self, path, grid: GridSpec) -> None:
        cols = ["t", *STATE_FIELDS, "a_LV", "a_BV", "a_AV", "terminal_flag"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for row in self.rows(grid):
                w.writerow(row)


def trajectory_from_indices(states: Sequence[int], actions: Sequence[int], grid: GridSpec, av_model,
                            horizon_hit: bool = False) -> Trajectory:
    """Rebuild a continuous-valued trajectory from a logged index path.

    Visited cells are reported at their centers. A CRASH or EXIT ending is
    re-simulated from the last center so that the final row carries the
    actual post-step ranges. ``av_accel`` uses the first branch of a mixed
    driver.
    """
    if len(states) != len(actions) + 1:
        raise ValidationError("a path needs exactly one more state than actions")
    model = driver_branches(av_model)[0][1]
    cells = [grid.center(s) for s in states[:-1]]
    acts = [grid.action(a) for a in actions]
    accs = []
    for sc in cells:
        k = sc.kinematic(grid.v_max)
        accs.append(float(av_accel(model, k.x_BV, k.x_AV, k.v_BV, k.v_AV, grid)))
    last = int(states[-1])
    if last >= grid.n_cells:
        if not cells:
            raise ValidationError("a path cannot start in an absorbing state")
        flag = CRASH_FLAG if last == grid.crash else EXIT_FLAG
        end, _ = decision_step(cells[-1].kinematic(grid.v_max), acts[-1], model, grid)
        terminal = end.scenario()
    else:
        flag = HORIZON_FLAG if horizon_hit else ""
        terminal = grid.center(last)
    return Trajectory(cells, acts, accs, terminal, flag)
