"""Run an experiment from a design, then test and bound the effect."""
# %%
import warnings

import numpy as np

from optrerand import ExperimentRecord, confidence_interval, design_pool, optimize, randomization_test

rng = np.random.default_rng(11)
n = 30
X = rng.standard_normal((n, 2))
X = (X - X.mean(0)) / X.std(0, ddof=1)

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    design = optimize(X, design_pool(n, 3000, seed=2))
print("design keeps", design.s_star, "assignments")

# %% Draw the assignment actually used and simulate a response with effect 0.8.
w = design.W_star[rng.integers(design.s_star)]
y = 0.8 * w + X @ [1.0, -0.5] + rng.standard_normal(n)
rec = ExperimentRecord(w, y, estimator="lr")

res = randomization_test(design, rec, R=2000, seed=5)
print(f"estimate {res.estimate:.3f}, p = {res.p_value:.4f}, replicates {res.R_used}")

# %% Inverting the test gives an interval for the effect.
lo, hi = confidence_interval(design, rec, R=2000, seed=5)
print(f"95% interval: [{lo:.3f}, {hi:.3f}]")

# the difference in means ignores covariates and is noisier here
dm = randomization_test(design, ExperimentRecord(w, y, estimator="dm"), R=2000, seed=5)
print(f"DM estimate {dm.estimate:.3f}, p = {dm.p_value:.4f}")
