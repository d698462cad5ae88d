"""Continuous-time filters for a two-state chain on a refining grid.

Run with ``python demos/continuous_time.py``.
"""

# %%
import numpy as np

from filterbench.continuous_filters import bayes_filter, ks_filter, simulate_observations, zakai_filter
from filterbench.markov_core import MarkovSpec

Q = np.array([[-1.0, 1.0], [1.0, -1.0]])
chain = MarkovSpec.generator([0.0, 1.0], Q)
h, gamma, p0 = np.array([0.0, 1.0]), 0.5, np.array([0.5, 0.5])

# %% [markdown]
# One observation path on a grid of 1e-4, summed into coarser grids. The
# normalized Zakai scheme, the Kushner-Stratonovich scheme and the exact filter
# of the sampled chain draw together as the grid refines. A single path is
# noisy; the test suite compares medians over 20 paths.

# %%
_, fine = simulate_observations(chain, h, gamma, 1.0, 1e-4, seed=0)
for factor in (100, 10, 1):
    obs = fine.coarsen(factor)
    z, _, _ = zakai_filter(Q, h, gamma, p0, obs)
    k = ks_filter(Q, h, gamma, p0, obs)
    b = bayes_filter(Q, h, gamma, p0, obs)
    print(
        f"dt {obs.dt:.0e}: Zakai-KS {0.5 * np.abs(z[-1] - k[-1]).sum():.5f}, "
        f"KS-exact {0.5 * np.abs(k[-1] - b[-1]).sum():.5f}, P(state 1) {b[-1, 1]:.3f}"
    )
