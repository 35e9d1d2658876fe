"""Crash-rate test campaigns: naturalistic and importance-sampled Monte Carlo.

An environment is a per-state sampling table plus a mask of controlled
states. Uncontrolled states sample from the naturalistic policy and leave
the likelihood ratio untouched; controlled states sample from the defensive
mixture ``(1 - eps) * psi_alpha + eps * phi`` and multiply the ratio by
``phi / psi``. Episodes run vectorized in fixed-size chunks, each chunk with
its own random stream, so results do not depend on the thread count.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Sequence

import numpy as np

from .mdp import DiscreteChain, GridSpec, ValidationError
from .surrogate import QTable, critical_set, evaluate, importance_table

NDE, NADE, ADATE, IS = "nde", "nade", "adate", "is"


def z_value(confidence: float) -> float:
    """Two-sided standard-normal quantile."""
    if not 0.0 < confidence < 1.0:
        raise ValidationError("confidence must lie in (0, 1)")
    return NormalDist().inv_cdf(0.5 + confidence / 2.0)


# ---------------------------------------------------------------------------
# samples and estimates


@dataclass(frozen=True)
class WeightedSample:
    crash: int
    weight: float = 1.0
    length: int = 0
    seed_tag: str = ""

    @property
    def term(self) -> float:
        return self.crash * self.weight


def _terms(samples) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        return samples.astype(float, copy=False)
    if len(samples) and isinstance(samples[0], WeightedSample):
        return np.array([s.term for s in samples], dtype=float)
    return np.asarray(samples, dtype=float)


@dataclass(frozen=True)
class Accumulator:
    """Streaming (count, mean, M2) summary that merges associatively."""

    n: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @classmethod
    def of(cls, terms) -> "Accumulator":
        x = _terms(terms)
        if x.size == 0:
            return cls()
        if np.all(x == x[0]):
            return cls(int(x.size), float(x[0]), 0.0)
        mean = float(x.mean())
        return cls(int(x.size), mean, float(((x - mean) ** 2).sum()))

    def merge(self, other: "Accumulator") -> "Accumulator":
        if other.n == 0:
            return self
        if self.n == 0:
            return other
        n = self.n + other.n
        d = other.mean - self.mean
        mean = self.mean + d * other.n / n
        m2 = self.m2 + other.m2 + d * d * self.n * other.n / n
        return Accumulator(n, mean, m2)

    def __add__(self, other: "Accumulator") -> "Accumulator":
        return self.merge(other)

    @property
    def var(self) -> float:
        return self.m2 / (self.n - 1) if self.n > 1 else 0.0

    def estimate(self, confidence: float = 0.95) -> "Estimate":
        if self.n == 0:
            raise ValidationError("cannot estimate from zero samples")
        return Estimate(self.n, self.mean, self.var, rhw(self.n, self.mean, self.var, confidence), confidence)


def rhw(n: int, mu: float, var: float, confidence: float = 0.95) -> float:
    """Relative half-width ``z * sigma / (sqrt(n) * mu)``; +inf when mu = 0."""
    if mu == 0.0:
        return math.inf
    return z_value(confidence) * math.sqrt(max(var, 0.0)) / (math.sqrt(n) * abs(mu))


@dataclass(frozen=True)
class Estimate:
    n: int
    mu: float
    var: float
    rhw: float
    confidence: float = 0.95

    @property
    def stderr(self) -> float:
        return math.sqrt(self.var / self.n)

    def interval(self, confidence: float | None = None) -> tuple[float, float]:
        half = z_value(confidence or self.confidence) * self.stderr
        return self.mu - half, self.mu + half

    def covers(self, value: float, confidence: float | None = None) -> bool:
        lo, hi = self.interval(confidence)
        return lo <= value <= hi

    def to_dict(self) -> dict:
        return {"n": self.n, "mu": self.mu, "var": self.var, "rhw": _json_float(self.rhw),
                "confidence": self.confidence}


def _json_float(x: float):
    return x if math.isfinite(x) else "inf"


def estimate(samples, confidence: float = 0.95) -> Estimate:
    """Sample mean, unbiased variance and RHW of the weighted crash terms."""
    x = _terms(samples)
    if x.size == 0:
        raise ValidationError("cannot estimate from zero samples")
    return Accumulator.of(x).estimate(confidence)


def running_stats(samples, confidence: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Running mean and RHW after each prefix (RHW is inf for n < 2 or mean 0)."""
    x = _terms(samples)
    n = np.arange(1, x.size + 1, dtype=float)
    total = np.cumsum(x)
    mean = total / n
    # variance from shifted sums; the mean above stays exact so zero prefixes are detected
    c = x - (x.mean() if x.size else 0.0)
    s1 = np.cumsum(c)
    s2 = np.cumsum(c * c)
    with np.errstate(divide="ignore", invalid="ignore"):
        var = np.maximum(s2 - s1 * s1 / n, 0.0) / np.maximum(n - 1, 1)
        r = z_value(confidence) * np.sqrt(var) / (np.sqrt(n) * np.abs(mean))
    r = np.where(total == 0.0, np.inf, r)
    r[:1] = np.inf
    return mean, r


def required_tests(samples, threshold: float = 0.3, n_min: int = 100, confidence: float = 0.95) -> int | None:
    """Smallest prefix length ``>= n_min`` whose running RHW is at most ``threshold``."""
    if threshold <= 0:
        raise ValidationError("threshold must be positive")
    _, r = running_stats(samples, confidence)
    idx = np.flatnonzero(r[max(n_min, 1) - 1:] <= threshold)
    return int(idx[0]) + max(n_min, 1) if idx.size else None


@dataclass
class BootstrapSummary:
    """Required-test counts over shuffled replicates; ``None`` marks a replicate that never converged."""

    values: list
    budget: int

    @property
    def reached(self) -> np.ndarray:
        return np.array([v for v in self.values if v is not None], dtype=float)

    @property
    def censored(self) -> int:
        return sum(v is None for v in self.values)

    def filled(self) -> np.ndarray:
        """Counts with unconverged replicates set to the budget (a lower bound for them)."""
        return np.array([self.budget if v is None else v for v in self.values], dtype=float)

    @property
    def mean(self) -> float:
        return float(self.filled().mean())

    @property
    def min(self) -> float:
        return float(self.filled().min())

    @property
    def max(self) -> float:
        return float(self.filled().max())

    def histogram(self, bins: int = 10) -> tuple[list, list]:
        counts, edges = np.histogram(self.filled(), bins=bins)
        return counts.tolist(), edges.tolist()

    def to_dict(self) -> dict:
        counts, edges = self.histogram()
        return {"reps": len(self.values), "mean": self.mean, "min": self.min, "max": self.max,
                "censored": self.censored, "budget": self.budget,
                "histogram": {"counts": counts, "edges": edges}, "values": self.values}


def bootstrap_required_tests(samples, threshold: float = 0.3, reps: int = 100, rng: np.random.Generator | None = None,
                             n_min: int = 100, confidence: float = 0.95,
                             permutations: Sequence[np.ndarray] | None = None) -> BootstrapSummary:
    """Shuffle the samples ``reps`` times and record the required tests of each order.

    ``permutations`` replaces the random shuffles when given, which lets
    paired comparisons reuse one set of orders.
    """
    x = _terms(samples)
    if permutations is None:
        if reps < 1:
            raise ValidationError("need at least one bootstrap replicate")
        rng = np.random.default_rng() if rng is None else rng
        permutations = [rng.permutation(x.size) for _ in range(reps)]
    values = [required_tests(x[p], threshold, n_min, confidence) for p in permutations]
    return BootstrapSummary(values, int(x.size))


def paired_confidence(a: BootstrapSummary, b: BootstrapSummary, rng: np.random.Generator,
                      resamples: int = 10_000) -> float:
    """Bootstrap confidence that mean required tests of ``a`` is below that of ``b``.

    Replicates are paired by index; pairs are resampled with replacement and
    the fraction of resamples with a negative mean difference is returned.
    """
    da, db = a.filled(), b.filled()
    if da.shape != db.shape:
        raise ValidationError("paired summaries need the same number of replicates")
    diff = da - db
    idx = rng.integers(len(diff), size=(resamples, len(diff)))
    return float((diff[idx].mean(axis=1) < 0).mean())


def aar(n_nde: float, n_env: float) -> int:
    """Acceleration ratio rounded half up."""
    if n_env <= 0:
        raise ValidationError("environment test count must be positive")
    return int(math.floor(n_nde / n_env + 0.5))


# ---------------------------------------------------------------------------
# environments


@dataclass
class InitialDistribution:
    """Probability vector over grid cells."""

    probs: np.ndarray
    label: str = "custom"

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or np.any(p < 0) or not np.isclose(p.sum(), 1.0, atol=1e-9):
            raise ValidationError("initial distribution must be a probability vector over cells")
        self.probs = p
        self._cum = np.cumsum(p)

    @classmethod
    def uniform(cls, grid: GridSpec) -> "InitialDistribution":
        return cls(np.full(grid.n_cells, 1.0 / grid.n_cells), "all")

    @classmethod
    def box(cls, grid: GridSpec, bounds: dict) -> "InitialDistribution":
        """Uniform over cells whose centers lie inside ``bounds`` (inclusive)."""
        from .mdp import STATE_FIELDS

        unknown = set(bounds) - set(STATE_FIELDS)
        if unknown:
            raise ValidationError(f"unknown state fields in box: {sorted(unknown)}")
        c = grid.centers()
        keep = np.ones(grid.n_cells, dtype=bool)
        for d, name in enumerate(STATE_FIELDS):
            if name in bounds:
                lo, hi = bounds[name]
                keep &= (c[:, d] >= lo) & (c[:, d] <= hi)
        if not keep.any():
            raise ValidationError("initial box contains no cell centers")
        return cls(keep / keep.sum(), "box")

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.probs)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        k = np.searchsorted(self._cum, rng.random(n) * self._cum[-1], side="right")
        return np.minimum(k, len(self.probs) - 1)


@dataclass
class TestEnvironment:
    """Sampling table plus the mask of states where the ratio is tracked."""

    __test__ = False  # keep pytest from collecting this class

    kind: str
    sampling: np.ndarray
    controlled: np.ndarray
    phi: np.ndarray
    epsilon: float = 0.0
    alpha: tuple = ()
    _cum: np.ndarray = field(default=None, repr=False)
    _ratio: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.sampling.shape != self.phi.shape or self.controlled.shape != (self.phi.shape[0],):
            raise ValidationError("environment tables disagree in shape")
        self._cum = np.cumsum(self.sampling, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(self.sampling > 0, self.phi / self.sampling, 0.0)
        self._ratio = np.where(self.controlled[:, None], ratio, 1.0)

    def ratio(self, s, a):
        return self._ratio[s, a]

    def oracle_weights(self, second_moment: bool = False) -> np.ndarray:
        """Per-(state, action) weights for exact evaluation of this estimator.

        First moment: ``phi`` where the action can be sampled, 0 elsewhere.
        Second moment: ``phi**2 / psi`` on controlled states, ``phi`` on the rest.
        """
        supported = self.sampling > 0
        if second_moment:
            return np.where(supported, self.phi * self._ratio, 0.0)
        return np.where(supported, self.phi, 0.0)


def nde_environment(phi: np.ndarray) -> TestEnvironment:
    return TestEnvironment(NDE, phi.copy(), np.zeros(phi.shape[0], dtype=bool), phi)


def is_environment(sm_tables: Sequence[QTable], alpha, phi: np.ndarray, epsilon: float = 0.1,
                   n_cells: int | None = None, kind: str = IS) -> TestEnvironment:
    """Defensive importance sampling with the mixture of surrogate importance policies.

    Controlled states are the critical set of ``sm_tables``. ``epsilon = 1``
    is accepted here and reduces to naturalistic sampling; configured
    campaigns keep it below 1.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValidationError("epsilon must lie in [0, 1]")
    alpha = np.asarray(getattr(alpha, "alpha", alpha), dtype=float)
    if alpha.shape != (len(sm_tables),):
        raise ValidationError(f"expected {len(sm_tables)} mixture weights, got {alpha.shape}")
    n_cells = phi.shape[0] - 2 if n_cells is None else n_cells
    crit = critical_set(sm_tables, phi, n_cells)
    psi = sum(a * importance_table(q, phi) for a, q in zip(alpha, sm_tables))
    mixed = (1.0 - epsilon) * psi + epsilon * phi
    sampling = np.where(crit.mask[:, None], mixed, phi)
    return TestEnvironment(kind, sampling, crit.mask.copy(), phi, epsilon, tuple(float(a) for a in alpha))


# ---------------------------------------------------------------------------
# campaigns


@dataclass
class CampaignConfig:
    kind: str = NDE
    epsilon: float = 0.1
    episodes: int = 100_000
    rhw_threshold: float = 0.3
    confidence: float = 0.95
    n_min: int = 100
    chunk_size: int = 10_000

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ValidationError("epsilon must lie in [0, 1)")
        if self.episodes < 1 or self.chunk_size < 1:
            raise ValidationError("episodes and chunk_size must be positive")
        if self.rhw_threshold <= 0:
            raise ValidationError("rhw_threshold must be positive")
        z_value(self.confidence)


@dataclass
class Campaign:
    """Per-episode outcomes of one campaign, in episode order."""

    crash: np.ndarray
    weight: np.ndarray
    length: np.ndarray
    kind: str = NDE
    paths: list | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.crash)

    @property
    def terms(self) -> np.ndarray:
        return self.crash * self.weight

    def samples(self) -> list:
        return [WeightedSample(int(c), float(w), int(k), f"{self.kind}:{i}")
                for i, (c, w, k) in enumerate(zip(self.crash, self.weight, self.length))]

    def estimate(self, confidence: float = 0.95) -> Estimate:
        return estimate(self.terms, confidence)

    def to_csv(self, path, header: str | None = None, confidence: float = 0.95) -> None:
        mu, r = running_stats(self.terms, confidence)
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.writer(fh)
            w.writerow(["episode_index", "crash", "weight", "term", "running_mu", "running_rhw"])
            for i in range(self.n):
                w.writerow([i, int(self.crash[i]), repr(float(self.weight[i])), repr(float(self.terms[i])),
                            repr(float(mu[i])), repr(float(r[i]))])


def simulate(chain: DiscreteChain, env: TestEnvironment, init: InitialDistribution, n: int,
             rng: np.random.Generator, log_paths: bool = False) -> Campaign:
    """Run ``n`` episodes of ``env`` side by side.

    Each episode starts from ``init``, draws joint actions from the sampling
    table and stops on CRASH, EXIT or the chain horizon.
    """
    n_cells = chain.grid.n_cells
    s = init.sample(n, rng)
    weight = np.ones(n)
    crash = np.zeros(n, dtype=np.int8)
    length = np.zeros(n, dtype=np.int32)
    alive = np.arange(n)
    trail_s, trail_a = ([s.copy()], []) if log_paths else (None, None)
    m = env.sampling.shape[1]
    for _ in range(chain.horizon):
        if alive.size == 0:
            break
        sa = s[alive]
        cum = env._cum[sa]
        u = rng.random(alive.size) * cum[:, -1]
        a = np.minimum((cum <= u[:, None]).sum(axis=1), m - 1)
        if np.any(env.sampling[sa, a] <= 0.0):
            raise AssertionError("sampled an action with zero sampling probability")
        weight[alive] *= env._ratio[sa, a]
        nxt = chain.next_state(sa, a, rng)
        length[alive] += 1
        crash[alive[nxt == chain.crash]] = 1
        s[alive] = nxt
        if log_paths:
            full = np.full(n, -1)
            full[alive] = a
            trail_a.append(full)
            trail_s.append(s.copy())
        alive = alive[nxt < n_cells]
    paths = None
    if log_paths:
        S = np.stack(trail_s, axis=1)
        A = np.stack(trail_a, axis=1) if trail_a else np.zeros((n, 0), dtype=int)
        paths = [(S[i, : length[i] + 1].tolist(), A[i, : length[i]].tolist()) for i in range(n)]
    return Campaign(crash, weight, length, env.kind, paths)


def run_campaign(chain: DiscreteChain, env: TestEnvironment, init: InitialDistribution, episodes: int,
                 seed: int, chunk_size: int = 10_000, threads: int = 1, log_paths: bool = False) -> Campaign:
    """Chunked campaign; chunk ``i`` draws from ``default_rng([seed, i])``."""
    sizes = [min(chunk_size, episodes - lo) for lo in range(0, episodes, chunk_size)]

    def one(i):
        return simulate(chain, env, init, sizes[i], np.random.default_rng([seed, i]), log_paths)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(one, range(len(sizes))))
    else:
        parts = [one(i) for i in range(len(sizes))]
    paths = None
    if log_paths:
        paths = [p for part in parts for p in part.paths]
    return Campaign(np.concatenate([p.crash for p in parts]), np.concatenate([p.weight for p in parts]),
                    np.concatenate([p.length for p in parts]), env.kind, paths)


def _single(chain, env, init, rng, seed_tag) -> WeightedSample:
    c = simulate(chain, env, init, 1, rng)
    return WeightedSample(int(c.crash[0]), float(c.weight[0]), int(c.length[0]), seed_tag)


def run_nde_episode(chain: DiscreteChain, phi: np.ndarray, init: InitialDistribution,
                    rng: np.random.Generator, seed_tag: str = "") -> WeightedSample:
    """One naturalistic episode; the weight is always 1."""
    return _single(chain, nde_environment(phi), init, rng, seed_tag)


def run_is_episode(chain: DiscreteChain, env: TestEnvironment, init: InitialDistribution,
                   rng: np.random.Generator, seed_tag: str = "") -> WeightedSample:
    """One importance-sampled episode with its accumulated likelihood ratio."""
    return _single(chain, env, init, rng, seed_tag)


def path_weight(path: tuple, env: TestEnvironment) -> float:
    """Likelihood ratio recomputed from a logged (states, actions) path."""
    states, actions = path
    w = 1.0
    for s, a in zip(states, actions):
        if env.controlled[s]:
            w *= env.phi[s, a] / env.sampling[s, a]
    return w


# ---------------------------------------------------------------------------
# exact oracles


@dataclass(frozen=True)
class OracleMoments:
    """Exact first and second moments of one estimator on the discretized chain."""

    mu_true: float
    mu_estimator: float
    second_moment: float

    @property
    def var(self) -> float:
        return max(self.second_moment - self.mu_estimator ** 2, 0.0)

    def predicted_required_tests(self, threshold: float = 0.3, confidence: float = 0.95) -> float:
        if self.mu_estimator == 0.0:
            return math.inf
        return (z_value(confidence) / threshold) ** 2 * self.var / self.mu_estimator ** 2

    def to_dict(self, threshold: float = 0.3, confidence: float = 0.95) -> dict:
        return {"mu_true": self.mu_true, "mu_estimator": self.mu_estimator, "second_moment": self.second_moment,
                "var": self.var,
                "predicted_required_tests": _json_float(self.predicted_required_tests(threshold, confidence))}


def oracle_mu(chain: DiscreteChain, phi: np.ndarray, init: InitialDistribution) -> float:
    """Crash probability of the naturalistic chain started from ``init``."""
    _, v = evaluate(chain, phi)
    return float(init.probs @ v[: chain.grid.n_cells])


def oracle_moments(chain: DiscreteChain, env: TestEnvironment, init: InitialDistribution) -> OracleMoments:
    """Exact mean and second moment of the weighted crash indicator under ``env``.

    The mean is the crash probability restricted to sampleable actions; it
    equals the true crash rate whenever the sampling table covers ``phi``.
    """
    n = chain.grid.n_cells
    _, v_true = evaluate(chain, env.phi)
    _, v_est = evaluate(chain, env.oracle_weights())
    _, v_sq = evaluate(chain, env.oracle_weights(second_moment=True))
    p = init.probs
    return OracleMoments(float(p @ v_true[:n]), float(p @ v_est[:n]), float(p @ v_sq[:n]))
