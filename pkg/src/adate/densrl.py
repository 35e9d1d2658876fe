"""Dense tabular learning of the crash-probability table for the vehicle under test.

Only critical states are ever updated, episodes start in the critical set
and stop once they leave it. Actions come from a gap-driven upper-confidence
rule that favours pairs where the learned values disagree with the current
surrogate mixture.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .mdp import CRASH_FLAG, EXIT_FLAG, HORIZON_FLAG, DiscreteChain, ValidationError
from .surrogate import CriticalSet, QTable

TRUNCATED_FLAG = "TRUNCATED"


@dataclass
class Transition:
    s: int
    a: int
    r: float
    s_next: int
    terminal: bool


@dataclass
class EpisodePath:
    """Index-level record of one episode: ``len(states) == len(actions) + 1``."""

    states: list
    actions: list
    flag: str

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class LearnerState:
    q: np.ndarray
    counts: np.ndarray
    critical: np.ndarray
    c: float = 2.0
    omega: float = 0.6
    gamma: float = 1.0
    episodes: int = 0
    steps: int = 0
    touched: list = field(default_factory=list, repr=False)

    @classmethod
    def fresh(cls, n_states: int, n_actions: int, critical: CriticalSet | np.ndarray, **kw) -> "LearnerState":
        mask = critical.mask if isinstance(critical, CriticalSet) else np.asarray(critical, dtype=bool)
        if mask.shape != (n_states,):
            raise ValidationError("critical mask does not match the state count")
        return cls(np.zeros((n_states, n_actions)), np.zeros((n_states, n_actions), dtype=np.int64),
                   mask.copy(), **kw)

    def visit(self, s: int, a: int) -> None:
        self.counts[s, a] += 1
        self.steps += 1

    def table(self, grid_hash: str = "", label: str = "learned") -> QTable:
        return QTable(self.q.copy(), self.gamma, None, grid_hash, label)

    def visited_critical_pairs(self) -> np.ndarray:
        """Mask of the regression set: critical states with at least one visit."""
        return (self.counts > 0) & self.critical[:, None]

    def save(self, prefix, grid_hash: str = "", extra: dict | None = None) -> None:
        prefix = str(prefix)
        self.table(grid_hash).save(prefix + "_q.qtab")
        np.save(prefix + "_counts.npy", self.counts)
        summary = {"episodes": self.episodes, "steps": self.steps, "c": self.c, "omega": self.omega,
                   "gamma": self.gamma, **(extra or {})}
        with open(prefix + "_summary.json", "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")


def gap(q_real: float, q_mix: float) -> float:
    """Relative surrogate-to-real gap; 0 when both vanish, +inf if only the mixture does."""
    if q_real < 0 or q_mix < 0:
        raise ValidationError("values must be nonnegative")
    if q_mix > 0:
        return abs(q_real - q_mix) / q_mix
    return 0.0 if q_real == 0 else math.inf


def gap_array(q_real: np.ndarray, q_mix: np.ndarray) -> np.ndarray:
    q_real = np.asarray(q_real, dtype=float)
    q_mix = np.asarray(q_mix, dtype=float)
    pos = q_mix > 0
    with np.errstate(over="ignore"):
        out = np.abs(q_real - q_mix) / np.where(pos, q_mix, 1.0)
    return np.where(pos, out, np.where(q_real > 0, np.inf, 0.0))


def adaptive_scores(q_row: np.ndarray, q_mix_row: np.ndarray, n_row: np.ndarray, phi_row: np.ndarray,
                    c: float) -> tuple[np.ndarray, np.ndarray]:
    """Return (infinite-gap mask, U) for one state.

    U = (gap + c * sqrt(sum N) / (1 + N)) * phi; for infinite-gap actions U
    holds the finite exploration part only, used to order them among
    themselves.
    """
    g = gap_array(q_row, q_mix_row)
    explore = c * math.sqrt(n_row.sum()) / (1.0 + n_row)
    inf = np.isinf(g)
    u = (np.where(inf, 0.0, g) + explore) * phi_row
    return inf & (phi_row > 0), u


def _argmax_random(u: np.ndarray, rng: np.random.Generator) -> int:
    best = np.flatnonzero(u == u.max())
    if len(best) == 1:
        return int(best[0])
    return int(best[rng.integers(len(best))])


def adaptive_action(s: int, learner: LearnerState, q_mix, phi: np.ndarray, rng: np.random.Generator) -> int:
    """Greedy action of the gap-plus-exploration score at state ``s``.

    Actions with an infinite gap outrank every finite score; remaining ties
    are broken uniformly at random.
    """
    inf, u = adaptive_scores(learner.q[s], np.asarray(q_mix[s]), learner.counts[s], phi[s], learner.c)
    if inf.any():
        u = np.where(inf, u, -1.0)
    return _argmax_random(u, rng)


def uniform_action(s: int, learner: LearnerState, q_mix, phi: np.ndarray, rng: np.random.Generator) -> int:
    return int(rng.integers(learner.q.shape[1]))


BEHAVIORS = {"adaptive": adaptive_action, "uniform": uniform_action}


def bootstrap_value(learner: LearnerState, s_next: int, phi: np.ndarray, terminal: bool) -> float:
    if terminal:
        return 0.0
    return float(learner.q[s_next] @ phi[s_next])


def densrl_update(learner: LearnerState, tr: Transition, phi: np.ndarray) -> LearnerState:
    """Expected-backup update of Q(s, a), applied only at critical states.

    The step size is ``1 / N(s, a) ** omega`` with the visit count already
    incremented by the caller (a zero count is treated as one).
    """
    if not learner.critical[tr.s]:
        return learner
    n = max(int(learner.counts[tr.s, tr.a]), 1)
    nu = 1.0 / n ** learner.omega
    target = tr.r + learner.gamma * bootstrap_value(learner, tr.s_next, phi, tr.terminal)
    learner.q[tr.s, tr.a] += nu * (target - learner.q[tr.s, tr.a])
    learner.touched.append((tr.s, tr.a))
    return learner


def run_episode(learner: LearnerState, chain: DiscreteChain, q_mix, phi: np.ndarray, rng: np.random.Generator,
                behavior: str = "adaptive", truncate: bool = True, start: int | None = None,
                max_steps: int | None = None) -> tuple[EpisodePath, LearnerState]:
    """One learning episode started uniformly in the critical set.

    Ends on CRASH, EXIT, leaving the critical set (when ``truncate``), or
    after ``max_steps`` decision epochs (the chain horizon by default).
    """
    critical_states = np.flatnonzero(learner.critical)
    if len(critical_states) == 0:
        raise ValidationError("critical set is empty; the surrogates never crash on this grid")
    choose = BEHAVIORS[behavior]
    T = chain.horizon if max_steps is None else max_steps
    s = int(critical_states[rng.integers(len(critical_states))]) if start is None else int(start)
    states, actions = [s], []
    flag = HORIZON_FLAG
    succ0 = chain.succ[:, :, 0] if chain.deterministic else None
    crash, n_cells = chain.crash, chain.grid.n_cells
    for _ in range(T):
        a = choose(s, learner, q_mix, phi, rng)
        learner.visit(s, a)
        s_next = int(succ0[s, a]) if succ0 is not None else int(chain.next_state(s, a, rng))
        terminal = s_next >= n_cells
        r = 1.0 if s_next == crash else 0.0
        densrl_update(learner, Transition(s, a, r, s_next, terminal), phi)
        actions.append(a)
        states.append(s_next)
        s = s_next
        if terminal:
            flag = CRASH_FLAG if r else EXIT_FLAG
            break
        if truncate and not learner.critical[s]:
            flag = TRUNCATED_FLAG
            break
    learner.episodes += 1
    return EpisodePath(states, actions, flag), learner
