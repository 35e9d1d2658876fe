"""Simplex-constrained regression of the learned table onto the surrogate tables.

The coefficients solve

    min 1/2 ||M alpha - y||^2   s.t.  sum(alpha) = 1, alpha >= 0

where each row of ``M`` holds the surrogate values of one visited critical
state-action pair and ``y`` the learned value there. The loop in
:func:`adate_generate` alternates one learning episode with one solve and
stops on the average sliding difference of the coefficient history.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .densrl import BEHAVIORS, LearnerState, run_episode
from .mdp import DiscreteChain, ValidationError
from .surrogate import QTable, critical_set

log = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-9


@dataclass
class MixtureWeights:
    alpha: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        if self.alpha.ndim != 1 or self.alpha.size == 0:
            raise ValidationError("mixture weights must be a non-empty vector")
        if np.any(self.alpha < 0) or abs(self.alpha.sum() - 1.0) > SIMPLEX_TOL:
            raise ValidationError(f"mixture weights {self.alpha} are not on the simplex")

    @classmethod
    def uniform(cls, J: int) -> "MixtureWeights":
        return cls(np.full(J, 1.0 / J))

    def __len__(self) -> int:
        return len(self.alpha)


class RegressionSystem:
    """Normal equations of the regression, grown as pairs are visited.

    Keeps ``G = M^T M`` and ``b = M^T y`` together with the cached ``y`` of
    every row, so that a change of the learned value at a known pair is an
    O(J) correction.
    """

    def __init__(self, J: int):
        if J < 1:
            raise ValidationError("need at least one surrogate")
        self.J = J
        self.G = np.zeros((J, J))
        self.b = np.zeros(J)
        self.yy = 0.0
        self.rows: dict = {}
        self._M: list = []
        self._y: list = []

    @classmethod
    def from_arrays(cls, M, y) -> "RegressionSystem":
        M = np.atleast_2d(np.asarray(M, dtype=float))
        y = np.asarray(y, dtype=float)
        if M.shape[0] != y.shape[0]:
            raise ValidationError("design matrix and target disagree in length")
        sys_ = cls(M.shape[1])
        for i in range(len(y)):
            sys_.set_pair(i, M[i], y[i])
        return sys_

    @property
    def size(self) -> int:
        return len(self._y)

    @property
    def M(self) -> np.ndarray:
        return np.array(self._M).reshape(-1, self.J)

    @property
    def y(self) -> np.ndarray:
        return np.array(self._y)

    def set_pair(self, key, row, value: float) -> None:
        value = float(value)
        i = self.rows.get(key)
        if i is None:
            row = np.asarray(row, dtype=float)
            self.rows[key] = len(self._y)
            self._M.append(row)
            self._y.append(value)
            self.G += np.outer(row, row)
            self.b += row * value
            self.yy += value * value
            return
        old = self._y[i]
        if old != value:
            self.b += self._M[i] * (value - old)
            self.yy += value * value - old * old
            self._y[i] = value

    def refresh(self) -> None:
        """Recompute the accumulated products from the stored rows."""
        M, y = self.M, self.y
        self.G = M.T @ M
        self.b = M.T @ y
        self.yy = float(y @ y)

    def objective(self, alpha) -> float:
        alpha = np.asarray(alpha, dtype=float)
        return 0.5 * float(alpha @ self.G @ alpha) - float(self.b @ alpha) + 0.5 * self.yy


def _kkt_solve(G: np.ndarray, grad0: np.ndarray, free: np.ndarray):
    """Solve G_FF x - lam 1 = rhs, 1^T x = 1 with a minimum-norm fallback."""
    k = len(free)
    K = np.zeros((k + 1, k + 1))
    K[:k, :k] = G[np.ix_(free, free)]
    K[:k, k] = -1.0
    K[k, :k] = 1.0
    rhs = np.append(grad0[free], 1.0)
    try:
        sol = np.linalg.solve(K, rhs)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:k], sol[k]


def _enumerate(G: np.ndarray, b: np.ndarray, tol: float) -> np.ndarray:
    J = len(b)
    best, best_obj = None, np.inf
    for size in range(1, J + 1):
        for free in itertools.combinations(range(J), size):
            free = np.array(free)
            x_f, lam = _kkt_solve(G, b, free)
            if np.any(x_f < -tol):
                continue
            x = np.zeros(J)
            x[free] = np.maximum(x_f, 0.0)
            grad = G @ x - b
            scale = tol * (1.0 + np.abs(grad).max())
            if np.any(grad < lam - scale):
                continue
            obj = 0.5 * x @ G @ x - b @ x
            if best is None or obj < best_obj - 1e-15 * (1.0 + abs(best_obj)):
                best, best_obj = x, obj
    if best is None:
        raise RuntimeError("no KKT point found; the system is numerically degenerate")
    return best


def _active_set(G: np.ndarray, b: np.ndarray, tol: float, max_iter: int = 500) -> np.ndarray:
    """Primal active-set iteration started from the barycenter."""
    J = len(b)
    x = np.full(J, 1.0 / J)
    fixed = np.zeros(J, dtype=bool)
    for _ in range(max_iter):
        free = np.flatnonzero(~fixed)
        grad = G @ x - b
        # step p on the free block with sum(p) = 0
        k = len(free)
        K = np.zeros((k + 1, k + 1))
        K[:k, :k] = G[np.ix_(free, free)]
        K[:k, k] = -1.0
        K[k, :k] = 1.0
        rhs = np.append(-grad[free], 0.0)
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
        p = np.zeros(J)
        p[free] = sol[:k]
        if np.abs(p).max() <= tol:
            lam = float(np.mean(grad[free] + G[np.ix_(free, free)] @ p[free]))
            mult = grad - lam
            mult[~fixed] = 0.0
            if not fixed.any() or mult[fixed].min() >= -tol * (1.0 + np.abs(grad).max()):
                return x
            j = np.flatnonzero(fixed)[np.argmin(mult[fixed])]
            fixed[j] = False
            continue
        step, block = 1.0, -1
        for i in free:
            if p[i] < 0 and -x[i] / p[i] < step:
                step, block = -x[i] / p[i], i
        x = x + step * p
        if block >= 0:
            x[block] = 0.0
            fixed[block] = True
    raise RuntimeError("active-set iteration did not terminate")


def _finish(x: np.ndarray) -> np.ndarray:
    x = np.where(x < 1e-12, 0.0, x)
    return x / x.sum()


def solve_simplex_lsq(sys_: RegressionSystem, method: str = "auto", tol: float = 1e-12) -> MixtureWeights:
    """Global minimizer of the regression objective over the simplex.

    ``method="enumerate"`` tries every free set and keeps the best KKT point
    (used for J <= 8 under ``"auto"``); ``"active-set"`` runs the primal
    active-set iteration.
    """
    if sys_.J == 0 or sys_.size == 0:
        raise ValidationError("regression needs at least one surrogate and one visited pair")
    if method == "auto":
        method = "enumerate" if sys_.J <= 8 else "active-set"
    if method == "enumerate":
        x = _enumerate(sys_.G, sys_.b, 1e-10)
    elif method == "active-set":
        x = _active_set(sys_.G, sys_.b, tol)
    else:
        raise ValidationError(f"unknown solver method {method!r}")
    return MixtureWeights(_finish(x))


def kkt_violation(M, y, alpha) -> float:
    """Largest violation of the simplex KKT conditions at ``alpha``.

    The shared multiplier is the mean gradient over the support; free
    coordinates must match it and zero coordinates must not fall below it.
    """
    M = np.asarray(M, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    grad = M.T @ (M @ alpha - np.asarray(y, dtype=float))
    support = alpha > 0
    lam = grad[support].mean()
    worst = np.abs(grad[support] - lam).max()
    if (~support).any():
        worst = max(worst, max(0.0, float((lam - grad[~support]).max())))
    return float(worst)


# ---------------------------------------------------------------------------
# stopping rule


@dataclass
class CoefficientHistory:
    """Coefficients per iteration, starting at k = 1."""

    delta: int = 10
    threshold: float = 0.02
    alphas: list = field(default_factory=list)
    asd_values: list = field(default_factory=list)

    def alpha_at(self, k: int) -> np.ndarray:
        return self.alphas[max(k, 1) - 1]

    def append(self, alpha) -> float:
        self.alphas.append(np.asarray(getattr(alpha, "alpha", alpha), dtype=float).copy())
        value = asd(self, len(self.alphas))
        self.asd_values.append(value)
        return value

    def __len__(self) -> int:
        return len(self.alphas)

    def to_csv(self, path, header: str | None = None) -> None:
        J = len(self.alphas[0]) if self.alphas else 0
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.writer(fh)
            w.writerow(["k", *[f"alpha_{j + 1}" for j in range(J)], "asd"])
            for k, (a, d) in enumerate(zip(self.alphas, self.asd_values), start=1):
                w.writerow([k, *[repr(float(v)) for v in a], repr(float(d))])


def asd(history: CoefficientHistory, k: int) -> float:
    """Average sliding difference of the coefficients at iteration ``k``."""
    if not 1 <= k <= len(history):
        raise ValidationError(f"history holds iterations 1..{len(history)}, asked for {k}")
    D = history.delta
    total = np.zeros_like(history.alpha_at(1))
    for kp in range(k - D + 1, k + 1):
        total += history.alpha_at(kp) - history.alpha_at(kp - D)
    return float(np.abs(total).mean())


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class AdateConfig:
    c: float = 2.0
    omega: float = 0.6
    gamma: float = 1.0
    delta: int = 10
    asd_threshold: float = 0.02
    max_iterations: int = 200_000
    min_iterations: int | None = None
    solve_interval: int = 1
    behavior: str = "adaptive"
    truncate: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.delta < 1 or self.max_iterations < 1 or self.solve_interval < 1:
            raise ValidationError("delta, max_iterations and solve_interval must be positive")
        if self.c < 0 or self.omega <= 0 or not 0 < self.gamma <= 1:
            raise ValidationError("need c >= 0, omega > 0 and gamma in (0, 1]")
        if self.min_iterations is not None and self.min_iterations < 0:
            raise ValidationError("min_iterations must be nonnegative")
        if self.behavior not in BEHAVIORS:
            raise ValidationError(f"unknown behavior {self.behavior!r}; choose from {sorted(BEHAVIORS)}")

    @property
    def burn_in(self) -> int:
        """Iterations before the ASD rule may stop the loop (2 * delta unless set)."""
        return max(2 * self.delta, self.min_iterations or 0)


class SurrogateMixture:
    """Row access to sum_j alpha_j Q_j without materializing the full table."""

    def __init__(self, q_tables: Sequence[QTable], alpha):
        self.stack = np.stack([q.values for q in q_tables])
        self.alpha = np.asarray(getattr(alpha, "alpha", alpha), dtype=float)

    def __getitem__(self, s):
        return self.alpha @ self.stack[:, s, :]

    def table(self) -> np.ndarray:
        return np.tensordot(self.alpha, self.stack, axes=1)


@dataclass
class AdateResult:
    weights: MixtureWeights
    history: CoefficientHistory
    learner: LearnerState
    terminated_by: str
    system: RegressionSystem = field(repr=False, default=None)

    @property
    def converged(self) -> bool:
        return self.terminated_by == "asd"

    def summary(self, **extra) -> dict:
        return {"alpha": [float(a) for a in self.weights.alpha], "iterations": len(self.history),
                "terminated_by": self.terminated_by, **extra}

    def write(self, out_dir, header: str | None = None, **extra) -> None:
        from pathlib import Path
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.history.to_csv(out / "alpha_history.csv", header)
        with open(out / "alpha_final.json", "w") as fh:
            json.dump(self.summary(**extra), fh, indent=2, sort_keys=True)
            fh.write("\n")


def adate_generate(sm_tables: Sequence[QTable], chain: DiscreteChain, phi: np.ndarray,
                   config: AdateConfig | None = None, rng: np.random.Generator | None = None) -> AdateResult:
    """Learn the vehicle's table and fit mixture coefficients until the ASD rule fires."""
    cfg = config or AdateConfig()
    J = len(sm_tables)
    if J < 1:
        raise ValidationError("need at least one surrogate table")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    crit = critical_set(sm_tables, phi, chain.grid.n_cells)
    learner = LearnerState.fresh(chain.n_states, chain.n_actions, crit, c=cfg.c, omega=cfg.omega, gamma=cfg.gamma)
    stack = np.stack([q.values for q in sm_tables])
    weights = MixtureWeights.uniform(J)
    mix = SurrogateMixture(sm_tables, weights)
    system = RegressionSystem(J)
    history = CoefficientHistory(cfg.delta, cfg.asd_threshold)
    terminated_by = "max_iterations"
    for k in range(1, cfg.max_iterations + 1):
        learner.touched.clear()
        run_episode(learner, chain, mix, phi, rng, behavior=cfg.behavior, truncate=cfg.truncate)
        for s, a in learner.touched:
            system.set_pair((s, a), stack[:, s, a], learner.q[s, a])
        if system.size and k % cfg.solve_interval == 0:
            weights = solve_simplex_lsq(system)
            mix.alpha = weights.alpha
        value = history.append(weights)
        if k >= cfg.burn_in and value < cfg.asd_threshold:
            terminated_by = "asd"
            break
    else:
        log.warning("ASD rule did not fire within %d iterations", cfg.max_iterations)
    return AdateResult(weights, history, learner, terminated_by, system)
