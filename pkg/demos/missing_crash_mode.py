# %% [markdown]
# # When a surrogate misses a crash mode
#
# An importance sampler built from a single conservative surrogate never
# proposes some actions that make an aggressive vehicle crash. Without
# defensive mixing those crashes are simply never sampled and the estimate
# settles on a value that is too low. Mixing a little of the naturalistic
# policy back in restores unbiasedness.

# %%
import numpy as np

from adate.config import RunConfig
from adate.surrogate import backward_induction_q, coverage_violations
from adate.testing import is_environment, oracle_moments, run_campaign

cfg = RunConfig.load(overrides=["grid=tiny", "av=sm2"])
phi = cfg.phi()
chain = cfg.chain(cfg.av)
init = cfg.initial()
conservative = backward_induction_q(cfg.chain(cfg.surrogates["sm3"]), phi)

# %% [markdown]
# ## Coverage check
#
# States where the vehicle can crash but the surrogate sees no danger at all.

# %%
truth = backward_induction_q(chain, phi)
missed = coverage_violations(truth, [conservative], phi)
print(f"{len(missed)} states where the conservative surrogate misses a crash of the aggressive vehicle")

# %% [markdown]
# ## Campaigns with and without defensive mixing

# %%
for eps in (0.0, 0.1):
    env = is_environment([conservative], [1.0], phi, eps, cfg.grid.n_cells)
    exact = oracle_moments(chain, env, init)
    est = run_campaign(chain, env, init, 100_000, cfg.seed_for(f"campaign/eps{eps}")).estimate()
    lo, hi = est.interval(0.99)
    print(f"epsilon {eps}: estimate {est.mu:.5f}, 99% CI [{lo:.5f}, {hi:.5f}], "
          f"estimator converges to {exact.mu_estimator:.5f}, true crash rate {exact.mu_true:.5f}")

# %% [markdown]
# With epsilon 0 the interval is tight around the wrong value; with epsilon 0.1
# it covers the true crash rate.
