import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adate.mdp import ValidationError
from adate.mixture import (AdateConfig, CoefficientHistory, MixtureWeights, RegressionSystem, adate_generate,
                           asd, kkt_violation, solve_simplex_lsq)
from adate.surrogate import backward_induction_q


def barycentric_grid(step: float = 0.005) -> np.ndarray:
    """Every point of the 3-simplex whose coordinates are multiples of ``step``."""
    n = round(1 / step)
    i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    keep = i + j <= n
    i, j = i[keep], j[keep]
    return np.stack([i, j, n - i - j], axis=1) / n


def objective(M, y, alpha) -> np.ndarray:
    r = np.atleast_2d(alpha) @ M.T - y
    return 0.5 * (r * r).sum(axis=1)


# ---------------------------------------------------------------------------
# weights


def test_weights_validate_the_simplex():
    assert np.allclose(MixtureWeights.uniform(4).alpha, 0.25)
    MixtureWeights([0.5, 0.5 + 5e-10])
    for bad in ([0.5, 0.6], [-0.1, 1.1], []):
        with pytest.raises(ValidationError):
            MixtureWeights(bad)


# ---------------------------------------------------------------------------
# simplex least squares


def test_exact_vertex_fit():
    rng = np.random.default_rng(0)
    M = rng.random((20, 3))
    alpha = solve_simplex_lsq(RegressionSystem.from_arrays(M, M[:, 0])).alpha
    assert np.allclose(alpha, [1, 0, 0], atol=1e-12)


def test_exact_interior_fit():
    rng = np.random.default_rng(1)
    M = rng.random((20, 2))
    alpha = solve_simplex_lsq(RegressionSystem.from_arrays(M, 0.5 * M[:, 0] + 0.5 * M[:, 1])).alpha
    assert np.allclose(alpha, [0.5, 0.5], atol=1e-12)


@pytest.mark.parametrize("method", ["enumerate", "active-set"])
def test_random_instances_beat_the_barycentric_grid(method):
    grid = barycentric_grid()
    rng = np.random.default_rng(2)
    for _ in range(20):
        M, y = rng.random((50, 3)), rng.random(50)
        alpha = solve_simplex_lsq(RegressionSystem.from_arrays(M, y), method=method).alpha
        assert objective(M, y, alpha)[0] <= objective(M, y, grid).min() + 1e-6
        assert kkt_violation(M, y, alpha) <= 1e-8


def test_active_set_agrees_with_enumeration_for_larger_J():
    rng = np.random.default_rng(3)
    for _ in range(20):
        M, y = rng.random((40, 6)), rng.random(40)
        sys_ = RegressionSystem.from_arrays(M, y)
        a = solve_simplex_lsq(sys_, "enumerate").alpha
        b = solve_simplex_lsq(sys_, "active-set").alpha
        assert objective(M, y, a)[0] == pytest.approx(objective(M, y, b)[0], abs=1e-10)


def test_duplicate_columns_are_handled():
    rng = np.random.default_rng(4)
    col = rng.random(30)
    M = np.stack([col, col, rng.random(30)], axis=1)
    y = 0.7 * col + 0.3 * M[:, 2]
    alpha = solve_simplex_lsq(RegressionSystem.from_arrays(M, y)).alpha
    assert alpha[0] + alpha[1] == pytest.approx(0.7, abs=1e-9)
    assert alpha[2] == pytest.approx(0.3, abs=1e-9)
    assert kkt_violation(M, y, alpha) <= 1e-8


def test_empty_inputs_rejected():
    with pytest.raises(ValidationError):
        solve_simplex_lsq(RegressionSystem(3))
    with pytest.raises(ValidationError):
        RegressionSystem(0)
    with pytest.raises(ValidationError):
        solve_simplex_lsq(RegressionSystem.from_arrays(np.ones((2, 2)), [1, 1]), method="simplex")


def test_incremental_updates_match_a_fresh_build():
    rng = np.random.default_rng(5)
    M, y = rng.random((10, 3)), rng.random(10)
    sys_ = RegressionSystem.from_arrays(M, y)
    y2 = y.copy()
    y2[[2, 7]] = [0.9, 0.1]
    sys_.set_pair(2, M[2], 0.9)
    sys_.set_pair(7, M[7], 0.1)
    fresh = RegressionSystem.from_arrays(M, y2)
    assert np.allclose(sys_.b, fresh.b) and np.allclose(sys_.G, fresh.G)
    assert sys_.objective([0.2, 0.3, 0.5]) == pytest.approx(objective(M, y2, [0.2, 0.3, 0.5])[0])


instances = st.integers(0, 2**32 - 1).map(np.random.default_rng)


@settings(max_examples=50)
@given(instances, st.integers(1, 6), st.integers(1, 40))
def test_solution_on_simplex_and_kkt(rng, J, rows):
    M, y = rng.random((rows, J)), rng.random(rows)
    alpha = solve_simplex_lsq(RegressionSystem.from_arrays(M, y)).alpha
    assert np.all(alpha >= 0) and abs(alpha.sum() - 1) <= 1e-9
    assert kkt_violation(M, y, alpha) <= 1e-8


@settings(max_examples=50)
@given(instances, arrays(np.int64, 1, elements=st.integers(0, 2**16)))
def test_row_permutation_invariance(rng, perm_seed):
    M, y = rng.random((30, 3)), rng.random(30)
    p = np.random.default_rng(int(perm_seed[0])).permutation(30)
    a = solve_simplex_lsq(RegressionSystem.from_arrays(M, y)).alpha
    b = solve_simplex_lsq(RegressionSystem.from_arrays(M[p], y[p])).alpha
    assert np.allclose(a, b, atol=1e-10)


# ---------------------------------------------------------------------------
# stopping rule


def _history(alphas, delta):
    h = CoefficientHistory(delta=delta)
    for a in alphas:
        h.append(a)
    return h


def test_asd_hand_example():
    h = _history([(1, 0), (1, 0), (0.8, 0.2), (0.8, 0.2)], delta=2)
    assert asd(h, 4) == pytest.approx(0.4, abs=1e-12)
    assert h.asd_values[-1] == pytest.approx(0.4, abs=1e-12)


def test_asd_boundary_rule_uses_the_first_entry():
    # k = 2, delta = 2: terms alpha(1) - alpha(-1) and alpha(2) - alpha(0), both against alpha(1)
    h = _history([(1, 0), (0.6, 0.4)], delta=2)
    assert asd(h, 2) == pytest.approx(0.4, abs=1e-12)


def test_asd_constant_and_single_surrogate_histories_vanish():
    assert all(v == 0 for v in _history([(0.2, 0.8)] * 30, 10).asd_values)
    assert all(v == 0 for v in _history([(1.0,)] * 30, 10).asd_values)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.integers(1, 8))
def test_asd_matches_naive_sum(xs, delta):
    alphas = [(x, 1 - x) for x in xs]
    h = _history(alphas, delta)

    def at(k):
        return np.array(alphas[max(k, 1) - 1])

    for k in range(1, len(xs) + 1):
        total = sum(at(kp) - at(kp - delta) for kp in range(k - delta + 1, k + 1))
        assert h.asd_values[k - 1] == pytest.approx(np.abs(total).mean(), abs=1e-12)


def test_asd_rejects_out_of_range_k():
    h = _history([(1, 0)], 2)
    with pytest.raises(ValidationError):
        asd(h, 2)


def test_history_csv(tmp_path):
    h = _history([(1, 0), (0.5, 0.5)], 1)
    h.to_csv(tmp_path / "h.csv", header="run=x")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "# run=x"
    assert lines[1] == "k,alpha_1,alpha_2,asd"
    assert lines[3].startswith("2,0.5,0.5,")


# ---------------------------------------------------------------------------
# orchestration


def test_config_validation():
    for bad in (dict(delta=0), dict(c=-1), dict(omega=0), dict(gamma=0), dict(gamma=1.5),
                dict(min_iterations=-1), dict(behavior="greedy"), dict(max_iterations=0)):
        with pytest.raises(ValidationError):
            AdateConfig(**bad)
    assert AdateConfig().burn_in == 20
    assert AdateConfig(min_iterations=500).burn_in == 500


def test_single_surrogate_stops_at_burn_in(tiny):
    result = adate_generate(tiny["sms"][:1], tiny["chain"], tiny["phi"], AdateConfig(), np.random.default_rng(0))
    assert np.array_equal(result.weights.alpha, [1.0])
    assert result.converged and len(result.history) == 20


def test_cap_returns_best_so_far_with_flag(tiny):
    cfg = AdateConfig(max_iterations=30, asd_threshold=0.0)
    result = adate_generate(tiny["sms"], tiny["chain"], tiny["phi"], cfg, np.random.default_rng(0))
    assert result.terminated_by == "max_iterations" and not result.converged
    assert len(result.history) == 30


def test_fixed_seed_is_bit_reproducible(tiny):
    cfg = AdateConfig(max_iterations=400, min_iterations=400)
    a, b = (adate_generate(tiny["sms"], tiny["chain"], tiny["phi"], cfg, np.random.default_rng(3)) for _ in range(2))
    assert np.array_equal(np.array(a.history.alphas), np.array(b.history.alphas))
    assert np.array_equal(a.learner.q, b.learner.q)


def test_every_emitted_alpha_is_on_the_simplex_and_kkt(tiny_recovery):
    alphas = np.array(tiny_recovery.history.alphas)
    assert np.all(alphas >= 0) and np.all(np.abs(alphas.sum(axis=1) - 1) <= 1e-9)
    sys_ = tiny_recovery.system
    assert kkt_violation(sys_.M, sys_.y, tiny_recovery.weights.alpha) <= 1e-8


def test_regression_rows_are_visited_critical_pairs(tiny_recovery):
    learner = tiny_recovery.learner
    keys = np.array(list(tiny_recovery.system.rows))
    assert np.all(learner.critical[keys[:, 0]])
    assert np.all(learner.counts[keys[:, 0], keys[:, 1]] > 0)
    assert len(keys) == learner.visited_critical_pairs().sum()


def test_vehicle_identical_to_first_surrogate(tiny_recovery):
    assert tiny_recovery.converged
    assert tiny_recovery.weights.alpha[0] >= 0.9


def test_planted_mixture_identity_holds_exactly(planted):
    truth = backward_induction_q(planted["chain"], planted["phi"]).values
    planted_q = 0.3 * planted["sms"][0].values + 0.7 * planted["sms"][1].values
    assert np.abs(truth - planted_q).max() <= 1e-15


def test_planted_mixture_recovered(planted_recovery):
    assert planted_recovery.converged
    assert np.allclose(planted_recovery.weights.alpha, [0.3, 0.7], atol=0.05)
