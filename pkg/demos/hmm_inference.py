"""Exact HMM inference, particle approximations and parameter learning.

Run with ``python demos/hmm_inference.py``.
"""

# %%
import numpy as np

from filterbench.hmm_discrete import DiscreteHMM, baum_welch_learn, forward_filter, simulate_hmm, smooth, viterbi
from filterbench.markov_core import MarkovSpec
from filterbench.particle import hmm_particle_model, particle_filter

lam = np.array([[0.8, 0.15, 0.05], [0.1, 0.8, 0.1], [0.05, 0.15, 0.8]])
hmm = DiscreteHMM(MarkovSpec.one_step([-1.0, 0.0, 1.0], lam), np.array([-1.0, 0.0, 1.0]), 0.8, np.full(3, 1 / 3))
idx, y = simulate_hmm(hmm, 200, seed=1)

# %% [markdown]
# Filter, smoother and Viterbi path on one simulated stream. The smoother uses
# future observations too, so it recovers the hidden state more often.

# %%
filt = forward_filter(hmm, y)
post = smooth(hmm, y).posterior
path = viterbi(hmm, y)
print(f"log-likelihood {filt.loglik:.2f}")
print(f"filter accuracy {np.mean(filt.pi.argmax(1) == idx):.2f}")
print(f"smoother accuracy {np.mean(post.argmax(1) == idx):.2f}")
print(f"Viterbi accuracy {np.mean(path == idx):.2f}")

# %% [markdown]
# The bootstrap particle filter converges to the exact filter as the number of
# particles grows, roughly like one over the square root of P.

# %%
states = hmm.chain.states
exact = filt.pi @ states
for P in (100, 1000, 10_000):
    est = particle_filter(hmm_particle_model(hmm), y, P, seed=2, g=lambda v: states[v]).estimate
    print(f"P={P:>6}: RMSE vs exact {np.sqrt(np.mean((est - exact) ** 2)):.4f}")

# %% [markdown]
# Baum-Welch from a vague start on a longer stream.

# %%
_, long_y = simulate_hmm(hmm, 3000, seed=3)
learned, ll = baum_welch_learn(hmm.with_transition(np.full((3, 3), 1 / 3)), long_y, max_iters=200)
print(f"{len(ll) - 1} iterations, log-likelihood {ll[0]:.1f} -> {ll[-1]:.1f}")
print(np.round(learned.transition, 3))
