from __future__ import annotations

import numpy as np
import pytest

from adate.config import RunConfig
from adate.mdp import (FVDM_AGGRESSIVE, FVDM_CONSERVATIVE, DiscreteChain, successor_states,
                       tiny_grid)
from adate.mixture import adate_generate
from adate.surrogate import backward_induction_q

# filled by tests/test_acceptance.py, printed at the end of the session
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def tiny_cfg() -> RunConfig:
    return RunConfig.load(overrides=["grid=tiny", "av=sm1"])


@pytest.fixture(scope="session")
def tiny(tiny_cfg):
    """Tiny preset with its naturalistic table, surrogate tables and the SM-1 chain."""
    cfg = tiny_cfg
    phi = cfg.phi()
    sms = [backward_induction_q(cfg.chain(m), phi) for m in cfg.surrogates.values()]
    return {"cfg": cfg, "grid": cfg.grid, "phi": phi, "sms": sms, "chain": cfg.chain(cfg.av)}


@pytest.fixture(scope="session")
def desk():
    cfg = RunConfig.load(overrides=["grid=desk", "av=sm1"])
    phi = cfg.phi()
    sms = [backward_induction_q(cfg.chain(m), phi) for m in cfg.surrogates.values()]
    return {"cfg": cfg, "grid": cfg.grid, "phi": phi, "sms": sms, "chain": cfg.chain(cfg.av)}


def one_step_chain(grid, models, weights, label="one-step") -> DiscreteChain:
    """Chain whose every successor is absorbing: CRASH if the model's step crashes, else EXIT.

    With a mixed driver the crash probability of each pair is then exactly
    the weighted sum of the single-model indicators.
    """
    n = grid.n_states
    succ = np.empty((n, grid.n_actions, len(models)), dtype=np.int64)
    prob = np.empty(succ.shape)
    for k, (model, w) in enumerate(zip(models, weights)):
        s = successor_states(grid, model)
        succ[: grid.n_cells, :, k] = np.where(s == grid.crash, grid.crash, grid.exit)
        prob[:, :, k] = w
    succ[grid.n_cells:] = np.arange(grid.n_cells, n)[:, None, None]
    return DiscreteChain(grid, succ, prob, 1, label)


@pytest.fixture(scope="session")
def planted(tiny):
    """Planted mixture: true values are 0.3 Q_1 + 0.7 Q_2 by construction."""
    grid, phi = tiny["grid"], tiny["phi"]
    models = (FVDM_AGGRESSIVE, FVDM_CONSERVATIVE)
    tables = [backward_induction_q(one_step_chain(grid, [m], [1.0]), phi) for m in models]
    chain = one_step_chain(grid, models, (0.3, 0.7), "planted")
    return {"grid": grid, "phi": phi, "sms": tables, "chain": chain}


@pytest.fixture
def grid():
    return tiny_grid()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_recovery(tiny):
    """Mixture learned for a vehicle identical to SM-1 on the tiny preset."""
    cfg = tiny["cfg"]
    return adate_generate(tiny["sms"], tiny["chain"], tiny["phi"], cfg.learner_config(), cfg.rng("learning"))


@pytest.fixture(scope="session")
def planted_recovery(tiny_cfg, planted):
    return adate_generate(planted["sms"], planted["chain"], planted["phi"], tiny_cfg.learner_config(),
                          np.random.default_rng(0))
