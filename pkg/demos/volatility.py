"""Heston variance: simulation, grid filtering, realized variance and the VIX.

Run with ``python demos/volatility.py``.
"""

# %%
import numpy as np
from scipy import stats

from filterbench.heston_sv import (
    HestonParams,
    OptionCurve,
    expected_rv_and_premium,
    realized_variance,
    simulate_heston,
    sv_filter,
    vix_replication,
)

p = HestonParams(mu=0.05, kappa=2.0, xbar=0.04, gamma=0.3, rho=-0.5)
dt = 1 / 252
print(f"Feller condition holds: {p.feller}")

# %% [markdown]
# One year of daily log prices. The grid filter tracks the hidden variance far
# better than the long-run level does.

# %%
x, y = simulate_heston(p, dt, 252, seed=4)
est = sv_filter(p, y, dt)
print(f"RMSE filter {np.sqrt(np.mean((est - x) ** 2)):.4f}, long-run level {np.sqrt(np.mean((p.xbar - x) ** 2)):.4f}")
print(f"realized variance {realized_variance(y, 1.0):.4f}, integrated variance {x[:-1].mean():.4f}")

# %% [markdown]
# Model-free variance from a strip of Black-Scholes prices with 20% volatility,
# then the risk premium against the model forecast starting from today's filter.

# %%
forward, r, T = 100.0, 0.01, 0.25
strikes = np.linspace(20.0, 500.0, 2000)
sd = 0.2 * np.sqrt(T)
d1 = (np.log(forward / strikes) + 0.5 * sd**2) / sd
d2 = d1 - sd
disc = np.exp(-r * T)
calls = disc * (forward * stats.norm.cdf(d1) - strikes * stats.norm.cdf(d2))
puts = disc * (strikes * stats.norm.cdf(-d2) - forward * stats.norm.cdf(-d1))
v = vix_replication(OptionCurve(strikes, np.maximum(puts, 0), "put"), OptionCurve(strikes, np.maximum(calls, 0), "call"), forward, r, T)
erv, premium = expected_rv_and_premium(p, est[-1], T, v)
print(f"replicated variance {v:.5f} (VIX {100 * np.sqrt(v):.2f})")
print(f"expected realized variance {erv:.5f}, premium {premium:+.5f}")
