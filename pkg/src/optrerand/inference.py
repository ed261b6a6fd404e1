"""Treatment-effect estimators and randomization-test inference.

Assignments use +/-1 coding, so the estimand is half the average
treatment effect. Inference only ever draws null replicates from the
design's own allocation set ``W_star``: the test must mirror the design
that produced ``w_exp``.
"""

from dataclasses import dataclass

import numpy as np

from ._parallel import chunk_bounds, pmap
from .design_space import check_assignments
from .errors import CollinearDesignError, DesignMismatchError, ParameterError, PreconditionError, ValidationError
from .moments import projection_cache

REPLICATE_CHUNK = 2048
TIE_RTOL = 1e-9


def _balanced(w):
    w = np.asarray(w)
    if np.any(np.atleast_2d(w).sum(axis=-1) != 0):
        raise PreconditionError("estimator requires forced-balance assignments (sum of w = 0)")
    return w


def estimate_dm(y, w):
    """Half the difference in arm means, ``w' y / n``.

    Either argument may be a matrix of rows (one experiment per row).
    """
    w = _balanced(w).astype(float)
    y = np.asarray(y, dtype=float)
    out = np.sum(w * y, axis=-1) / w.shape[-1]
    return float(out) if np.ndim(out) == 0 else out


def estimate_lr(X, y, w, cache=None):
    """Coefficient of w in the least-squares fit of y on ``[w | X]``.

    Closed form ``w'(I - P) y / (n - w' P w)``. Accepts a matrix of
    assignment rows and a matching matrix (or single vector) of responses.
    """
    if cache is None:
        cache = projection_cache(X)
    w = _balanced(w).astype(float)
    y = np.asarray(y, dtype=float)
    U = cache.basis
    Uw = w @ U
    Uy = y @ U
    n = w.shape[-1]
    num = np.sum(w * y, axis=-1) - np.sum(Uw * Uy, axis=-1)
    den = n - np.sum(Uw * Uw, axis=-1)
    if np.any(den <= 1e-8):
        raise CollinearDesignError("assignment lies (numerically) in the column space of X")
    out = num / den
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True, eq=False)
class ExperimentRecord:
    w_exp: np.ndarray
    y: np.ndarray
    estimator: str = "lr"

    def __post_init__(self):
        w = np.asarray(self.w_exp, dtype=np.int8)
        y = np.asarray(self.y, dtype=float)
        check_assignments(w)
        if y.shape != w.shape:
            raise ValidationError(f"y has shape {y.shape}, w has {w.shape}")
        if not np.all(np.isfinite(y)):
            raise ValidationError("responses must be finite")
        if self.estimator not in ("dm", "lr"):
            raise ParameterError(f"estimator must be 'dm' or 'lr', got {self.estimator!r}")
        object.__setattr__(self, "w_exp", w)
        object.__setattr__(self, "y", y)


@dataclass(frozen=True, eq=False)
class TestResult:
    estimate: float
    p_value: float
    null_estimates: np.ndarray
    R_used: int
    alpha: float
    reject: bool
    delta: float = 0.0

    __test__ = False  # not a pytest class


def _estimator(record, X, cache):
    if record.estimator == "dm":
        return lambda Y, W: estimate_dm(Y, W)
    return lambda Y, W: estimate_lr(X, Y, W, cache)


def _replicates(W_star, w_exp, R, seed):
    """Rows of W_star other than w_exp; all of them when there are <= R."""
    W_star = np.asarray(W_star)
    key = np.asarray(w_exp, dtype=W_star.dtype).tobytes()
    hits = [i for i, row in enumerate(W_star) if row.tobytes() == key]
    if not hits:
        raise DesignMismatchError("w_exp is not one of the design's allocations (W_star)")
    others = np.delete(np.arange(len(W_star)), hits)
    if len(others) == 0:
        raise DesignMismatchError("design has no allocations besides w_exp; no null distribution")
    if len(others) > R:
        rng = np.random.default_rng(seed)
        others = np.sort(rng.choice(others, size=R, replace=False))
    return W_star[others]


def _null_stats(est, y_null, W_rep, delta, workers):
    """``est(w_r, y_null + delta w_r) - delta`` for every replicate row."""
    def chunk(b):
        Wc = W_rep[b[0]: b[1]].astype(float)
        return est(y_null[None, :] + delta * Wc, Wc) - delta
    parts = pmap(chunk, chunk_bounds(len(W_rep), REPLICATE_CHUNK), workers)
    return np.concatenate(parts)


def _p_value(t_exp, t_null, scale):
    tol = TIE_RTOL * scale
    extreme = np.sum(np.abs(t_null) >= np.abs(t_exp) - tol)
    return (1.0 + extreme) / (1.0 + len(t_null))


def _design_parts(design):
    return np.asarray(design.W_star), np.asarray(design.X, dtype=float)


def randomization_test(design, record, R=10000, alpha=0.05, seed=0, delta=0.0,
                       region="abs", workers=None):
    """Randomization test of the sharp null ``beta_T = delta``.

    Null replicates recompute the estimate for ``w`` drawn without
    replacement from ``W_star`` minus ``w_exp``, on responses adjusted to
    ``y - delta w_exp + delta w``. The p-value is two-sided on the
    centered statistic with the add-one convention, ties counting against
    rejection. ``region="quantile"`` rejects instead when the observed
    statistic leaves the [alpha/2, 1 - alpha/2] quantile band of the
    replicates.
    """
    if R < 100:
        raise ParameterError(f"need R >= 100 replicates, got {R}")
    if region not in ("abs", "quantile"):
        raise ParameterError(f"region must be 'abs' or 'quantile', got {region!r}")
    W_star, X = _design_parts(design)
    W_rep = _replicates(W_star, record.w_exp, R, seed)
    cache = projection_cache(X) if record.estimator == "lr" else None
    est = _estimator(record, X, cache)
    y, w = record.y, record.w_exp.astype(float)
    estimate = float(est(y, w))
    y_null = y - delta * w
    t_null = _null_stats(est, y_null, W_rep, delta, workers)
    t_exp = estimate - delta
    scale = max(np.abs(y).max(), 1e-300)
    p = _p_value(t_exp, t_null, scale)
    if region == "abs":
        reject = p <= alpha
    else:
        lo, hi = np.quantile(t_null, [alpha / 2, 1 - alpha / 2])
        reject = bool(t_exp < lo or t_exp > hi)
    return TestResult(
        estimate=estimate, p_value=float(p), null_estimates=t_null + delta,
        R_used=len(W_rep), alpha=alpha, reject=bool(reject), delta=float(delta),
    )


def confidence_interval(design, record, R=10000, alpha=0.05, delta_grid=None, seed=0,
                        grid_points=201, grid_halfwidth=5.0, workers=None, return_pvalues=False):
    """Invert the randomization test over a grid of hypothesized effects.

    Returns ``(lower, upper)``: the smallest and largest grid value whose
    sharp null is retained at level ``alpha``. The default grid spans the
    point estimate +/- ``grid_halfwidth`` null standard deviations.
    """
    W_star, X = _design_parts(design)
    W_rep = _replicates(W_star, record.w_exp, R, seed)
    cache = projection_cache(X) if record.estimator == "lr" else None
    est = _estimator(record, X, cache)
    y, w = record.y, record.w_exp.astype(float)
    estimate = float(est(y, w))
    if delta_grid is None:
        sd = float(np.std(_null_stats(est, y, W_rep, 0.0, workers), ddof=1))
        if not sd > 0:
            sd = max(abs(estimate), 1.0) * 1e-6
        delta_grid = estimate + np.linspace(-grid_halfwidth, grid_halfwidth, grid_points) * sd
    grid = np.asarray(delta_grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0 or np.any(np.diff(grid) <= 0):
        raise ValidationError("delta_grid must be a non-empty ascending sequence")
    scale = max(np.abs(y).max(), 1e-300)
    pvals = np.empty(grid.size)
    for k, d in enumerate(grid):
        t_null = _null_stats(est, y - d * w, W_rep, d, workers)
        pvals[k] = _p_value(estimate - d, t_null, scale)
    kept = np.flatnonzero(pvals > alpha)
    if kept.size == 0:
        raise ValidationError(
            f"no hypothesized effect in the grid is retained at alpha={alpha}; "
            f"p-values at the grid ends are {pvals[0]:.4g} and {pvals[-1]:.4g}"
        )
    interval = (float(grid[kept[0]]), float(grid[kept[-1]]))
    if return_pvalues:
        return interval, grid, pvals
    return interval
