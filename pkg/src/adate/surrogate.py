"""Exact maneuver-challenge tables on the discretized chain.

Values are probabilities of a future crash: a reward of 1 is collected on
entering CRASH and rows of the absorbing states are zero.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .mdp import DiscreteChain, ValidationError

MAGIC = b"ADQT"
VERSION = 1
_HEADER = struct.Struct("<4sI16sdqQQ")


@dataclass
class QTable:
    """Dense (state, joint action) value table.

    ``horizon`` is the number of remaining decision epochs the values refer
    to, or ``None`` for a stationary (converged) table.
    """

    values: np.ndarray
    gamma: float = 1.0
    horizon: int | None = None
    grid_hash: str = ""
    label: str = ""

    @property
    def n_states(self) -> int:
        return self.values.shape[0]

    @property
    def n_actions(self) -> int:
        return self.values.shape[1]

    @property
    def stationary(self) -> bool:
        return self.horizon is None

    def save(self, path) -> None:
        gh = self.grid_hash.encode().ljust(16, b"\0")[:16]
        hz = -1 if self.horizon is None else int(self.horizon)
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, gh, float(self.gamma), hz, self.n_states, self.n_actions))
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path, label: str = "") -> "QTable":
        blob = Path(path).read_bytes()
        if len(blob) < _HEADER.size:
            raise ValidationError(f"{path}: truncated table header")
        magic, version, gh, gamma, hz, n, m = _HEADER.unpack_from(blob)
        if magic != MAGIC or version != VERSION:
            raise ValidationError(f"{path}: not a Q-table file (magic {magic!r}, version {version})")
        data = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size)
        if data.size != n * m:
            raise ValidationError(f"{path}: expected {n * m} values, found {data.size}")
        return cls(data.reshape(n, m).copy(), gamma, None if hz < 0 else hz,
                   gh.rstrip(b"\0").decode(), label or Path(path).stem)

    def to_csv(self, path, nonzero_only: bool = False) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["state_index", "action_index", "value"])
            for s, a in np.ndindex(*self.values.shape):
                v = self.values[s, a]
                if nonzero_only and v == 0.0:
                    continue
                w.writerow([s, a, repr(float(v))])


@dataclass
class ValueTable:
    values: np.ndarray


@dataclass
class CriticalSet:
    mask: np.ndarray
    mean_value: np.ndarray = field(repr=False)

    @property
    def states(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def __contains__(self, s) -> bool:
        return bool(self.mask[s])

    def __len__(self) -> int:
        return int(self.mask.sum())


def _backup(chain: DiscreteChain, v_next: np.ndarray, gamma: float) -> np.ndarray:
    """One Bellman evaluation sweep: Q(s,a) = E[1{s'=CRASH} + gamma * V(s') 1{s' live}]."""
    succ = chain.succ
    target = np.where(succ == chain.crash, 1.0, gamma * v_next[succ])
    target = np.where(succ == chain.exit, 0.0, target)
    q = (chain.prob * target).sum(axis=2)
    q[chain.grid.n_cells:] = 0.0
    return q


def evaluate(chain: DiscreteChain, weights: np.ndarray, gamma: float = 1.0, horizon: int | None = None,
             return_sweeps: bool = False):
    """Finite-horizon evaluation with per-(state, action) weights.

    With ``weights = phi`` this is ordinary policy evaluation. Other weights
    give importance-sampling moments, e.g. ``phi**2 / q`` for the second
    moment of the weighted crash indicator. Returns ``(Q, V)`` for
    ``horizon`` remaining epochs, plus the list of V per sweep if asked.
    """
    horizon = chain.horizon if horizon is None else horizon
    v = np.zeros(chain.n_states)
    q = np.zeros((chain.n_states, chain.n_actions))
    sweeps = [v]
    for _ in range(horizon):
        q = _backup(chain, v, gamma)
        v = (q * weights).sum(axis=1)
        v[chain.grid.n_cells:] = 0.0
        if return_sweeps:
            sweeps.append(v)
    if return_sweeps:
        return q, v, sweeps
    return q, v


def backward_induction_q(chain: DiscreteChain, phi: np.ndarray, gamma: float = 1.0,
                         horizon: int | None = None) -> QTable:
    """Exact maneuver challenge with ``horizon`` decision epochs to go."""
    horizon = chain.horizon if horizon is None else horizon
    q, _ = evaluate(chain, phi, gamma, horizon)
    return QTable(q, gamma, horizon, chain.grid.grid_hash(), chain.label)


def stationary_q(chain: DiscreteChain, phi: np.ndarray, gamma: float = 1.0, tol: float = 1e-13,
                 max_sweeps: int = 100_000) -> QTable:
    """Fixed point of the evaluation operator reached from Q = 0.

    This is what a learner that bootstraps through horizon cut-offs converges
    to. Sweeps stop once the largest change is below ``tol``.
    """
    v = np.zeros(chain.n_states)
    q = np.zeros((chain.n_states, chain.n_actions))
    for _ in range(max_sweeps):
        q_new = _backup(chain, v, gamma)
        v = (q_new * phi).sum(axis=1)
        v[chain.grid.n_cells:] = 0.0
        done = np.max(np.abs(q_new - q)) < tol
        q = q_new
        if done:
            break
    return QTable(q, gamma, None, chain.grid.grid_hash(), chain.label)


def criticality(q: QTable | np.ndarray, phi: np.ndarray) -> ValueTable:
    values = q.values if isinstance(q, QTable) else np.asarray(q)
    return ValueTable((values * phi).sum(axis=1))


def mean_table(q_tables: Sequence[QTable]) -> np.ndarray:
    if len(q_tables) == 0:
        raise ValidationError("need at least one surrogate table")
    return sum(q.values for q in q_tables) / len(q_tables)


def critical_set(q_tables: Sequence[QTable], phi: np.ndarray, n_cells: int | None = None) -> CriticalSet:
    """States whose mean surrogate criticality is strictly positive."""
    qbar = mean_table(q_tables)
    vbar = (qbar * phi).sum(axis=1)
    mask = vbar > 0.0
    if n_cells is not None:
        mask[n_cells:] = False
    return CriticalSet(mask, vbar)


def importance_table(q: QTable | np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Importance policy Q*phi/V for every state; phi where V = 0."""
    values = q.values if isinstance(q, QTable) else np.asarray(q)
    joint = values * phi
    v = joint.sum(axis=1, keepdims=True)
    safe = np.where(v > 0.0, v, 1.0)
    return np.where(v > 0.0, joint / safe, phi)


def importance_policy(q: QTable | np.ndarray, phi: np.ndarray, s: int) -> np.ndarray:
    values = q.values if isinstance(q, QTable) else np.asarray(q)
    joint = values[s] * phi[s]
    v = joint.sum()
    return joint / v if v > 0.0 else phi[s].copy()


def _check_alpha(alpha, n: int) -> np.ndarray:
    alpha = np.asarray(getattr(alpha, "alpha", alpha), dtype=float)
    if alpha.shape != (n,):
        raise ValidationError(f"expected {n} mixture weights, got shape {alpha.shape}")
    return alpha


def mixture_policy(alpha, psi_list: Sequence[np.ndarray], s: int | None = None) -> np.ndarray:
    """Convex combination of importance policies (one state or whole tables)."""
    alpha = _check_alpha(alpha, len(psi_list))
    shapes = {np.shape(p) for p in psi_list}
    if len(shapes) != 1:
        raise ValidationError("importance policies disagree in shape")
    rows = [p if s is None else p[s] for p in psi_list]
    return sum(a * r for a, r in zip(alpha, rows))


def mixture_table(alpha, q_tables: Sequence[QTable]) -> np.ndarray:
    """Mixed maneuver challenge sum_j alpha_j Q_j."""
    alpha = _check_alpha(alpha, len(q_tables))
    return sum(a * q.values for a, q in zip(alpha, q_tables))


def coverage_violations(oracle: QTable, q_tables: Sequence[QTable], phi: np.ndarray) -> np.ndarray:
    """States that can crash under the real vehicle but look safe to every surrogate."""
    v_true = criticality(oracle, phi).values
    vbar = critical_set(q_tables, phi).mean_value
    n_cells = oracle.n_states - 2
    bad = (v_true > 0.0) & (vbar == 0.0)
    bad[n_cells:] = False
    return np.flatnonzero(bad)
