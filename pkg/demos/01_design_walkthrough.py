"""From a covariate table to an optimal rerandomization design.

Run with ``python3 demos/01_design_walkthrough.py``.
"""
# %%
import numpy as np

from optrerand import design_pool, optimize, rank_pool, standardize
from optrerand.tail import TailSpec

rng = np.random.default_rng(7)
n, p = 40, 3
X, mean, sd = standardize(rng.normal(size=(n, p)) * [1.0, 5.0, 0.2] + [0.0, 50.0, 3.0])
print("column means after standardizing:", np.round(X.mean(axis=0), 12))

# %% A mirror-closed pool: every assignment comes with its sign flip.
pool = design_pool(n, 4000, seed=1)
ranked = rank_pool(X, pool)
print(f"pool size {len(pool)}, best imbalance {ranked.imbalances[0]:.2e}, worst {ranked.imbalances[-1]:.3f}")

# %% Sweep prefix lengths and keep the one minimizing the 95% tail of the MSE.
res = optimize(X, pool, tail=TailSpec(q=0.95, strategy="normal"))
print(f"s* = {res.s_star} of {len(pool)}  (a* = {res.a_star:.4f})")

# the trace is flat near the optimum and climbs at both ends
rows = list(range(0, len(res.trace_s), 8)) + [len(res.trace_s) - 1]
for i in rows:
    print(f"  s={res.trace_s[i]:5d}  a={res.trace_a[i]:8.4f}  Q={res.trace_Q[i]:10.3f}")

# %% Keeping too few is as bad as keeping everything.
i = int(np.argmin(res.trace_Q))
print("relative criterion at s=2:", round(res.trace_Q[0] / res.trace_Q[i], 3),
      " at s=S:", round(res.trace_Q[-1] / res.trace_Q[i], 3))
