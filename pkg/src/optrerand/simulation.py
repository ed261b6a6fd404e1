"""Desk-scale simulation studies.

Three studies, each returning a :class:`SimOutput` whose ``tables`` are
column dicts ready for CSV export:

* strategy comparison: nested Monte Carlo of the LR squared error under
  five designs built from one ranked pool (BCRD, GOOD, OPT, DET, BAD)
* tail-strategy agreement: the criterion along a common prefix grid for
  every tail strategy, normalized to 1 at the full pool
* threshold vs p: optimal threshold as covariates are added
"""

import csv
import json
import os
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ._parallel import chunk_bounds, chunk_rng, pmap
from .balance import rank_pool
from .design_space import design_pool
from .errors import ParameterError
from .inference import estimate_lr
from .io import standardize
from .moments import projection_cache
from .optimizer import SearchMode, _pair_grid, optimize
from .tail import TailSpec, ZSampler

STRATEGY_NAMES = ("BCRD", "GOOD", "OPT", "DET", "BAD")
OUTER_CHUNK = 25

# child streams of the master seed
_X, _BETA, _POOL, _Z, _W, _TAIL = range(6)


@dataclass(frozen=True)
class SimConfig:
    n: int = 50
    p: int = 5
    S: int = 2000
    q: float = 0.95
    beta_T: float = 1.0
    R2_target: float = 0.25
    z_family: str = "gaussian"
    outer_draws: int = 500
    inner_draws: int = 300
    seed: int = 0
    strategies: tuple = STRATEGY_NAMES
    fraction: float = 0.2
    grid_points: int = 64
    n_z: int = 10000
    workers: int | None = None

    def __post_init__(self):
        if not 0 < self.R2_target < 1:
            raise ParameterError("R2_target must lie in (0, 1)")
        if self.outer_draws < 100 or self.inner_draws < 100:
            raise ParameterError("outer_draws and inner_draws must be >= 100")

    @classmethod
    def paper_scale(cls, **kw):
        base = dict(n=100, p=10, S=25000, outer_draws=3000, inner_draws=1000)
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            d = json.load(fh)
        if "strategies" in d:
            d["strategies"] = tuple(d["strategies"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ParameterError(f"{path}: {exc}") from exc

    @property
    def sampler(self):
        return ZSampler.parse(self.z_family)


@dataclass
class SimOutput:
    config: SimConfig
    tables: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    arrays: dict = field(default_factory=dict)

    def write(self, out_dir):
        """One CSV per table plus ``summary.json``; returns the paths."""
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        for name, cols in self.tables.items():
            path = os.path.join(out_dir, f"{name}.csv")
            keys = list(cols)
            with open(path, "w", newline="") as fh:
                wr = csv.writer(fh, lineterminator="\n")
                wr.writerow(keys)
                for row in zip(*(cols[k] for k in keys)):
                    wr.writerow([repr(v) if isinstance(v, float) else v for v in row])
            paths.append(path)
        path = os.path.join(out_dir, "summary.json")
        with open(path, "w") as fh:
            json.dump({"config": asdict(self.config), "summary": self.summary}, fh, indent=1, default=float)
        paths.append(path)
        return paths


def _rng(seed, stream, index=0):
    return chunk_rng(seed, (stream << 32) + index)


def make_covariates(config, p=None):
    X = _rng(config.seed, _X).standard_normal((config.n, p or config.p))
    return standardize(X)[0]


def make_pool(config):
    """Mirror-closed BCRD pool of size ``S`` (S/2 draws plus mirrors)."""
    return design_pool(config.n, config.S, config.seed)


def noise_variance(signal, R2):
    """sigma_z^2 giving the linear signal a share ``R2`` of total variance."""
    return float(np.var(signal, ddof=1)) * (1.0 - R2) / R2


def _ranked_setup(config):
    X = make_covariates(config)
    ranked = rank_pool(X, make_pool(config))
    return X, ranked


def build_strategies(config, X, ranked, workers=None):
    """Allocation sets for the five designs, plus the OPT design result."""
    S = len(ranked)
    k = max(2, 2 * int(round(config.fraction * S / 2)))
    tail = TailSpec(q=config.q, strategy="normal")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        opt = optimize(X, None, tail=tail, mode=SearchMode("grid", config.grid_points),
                       ranked=ranked, workers=workers)
    W = ranked.assignments
    sets = {
        "BCRD": W,
        "GOOD": W[:k],
        "OPT": opt.W_star,
        "DET": W[:1],
        "BAD": W[S - k:],
    }
    return {name: sets[name] for name in config.strategies}, opt


@dataclass(frozen=True, eq=False)
class ComparisonSetup:
    """Everything fixed across the outer loop of the strategy comparison."""

    config: SimConfig
    X: np.ndarray
    beta: np.ndarray
    signal: np.ndarray
    sigma2_z: float
    sets: dict
    opt: object
    cache: object
    pool_size: int

    @property
    def names(self):
        return list(self.sets)

    def z(self, o):
        c = self.config
        return np.sqrt(self.sigma2_z) * c.sampler.sample(_rng(c.seed, _Z, o), 1, c.n)[0]

    def inner(self, o, j):
        """Assignments of outer draw ``o`` for strategy ``j``."""
        Wset = self.sets[self.names[j]]
        if len(Wset) == 1:
            return Wset.astype(float)
        c = self.config
        idx = _rng(c.seed, _W, o * len(self.sets) + j).integers(0, len(Wset), c.inner_draws)
        return Wset[idx].astype(float)

    def squared_errors(self, o, j, z=None):
        z = self.z(o) if z is None else z
        W = self.inner(o, j)
        bT = self.config.beta_T
        Y = bT * W + (self.signal + z)
        return (estimate_lr(self.X, Y, W, self.cache) - bT) ** 2


def comparison_setup(config):
    if config.S < 100:
        raise ParameterError(f"strategy comparison needs S >= 100, got {config.S}")
    X, ranked = _ranked_setup(config)
    beta = _rng(config.seed, _BETA).standard_normal(config.p)
    signal = X @ beta
    sets, opt = build_strategies(config, X, ranked, config.workers)
    return ComparisonSetup(
        config=config, X=X, beta=beta, signal=signal,
        sigma2_z=noise_variance(signal, config.R2_target), sets=sets, opt=opt,
        cache=projection_cache(X), pool_size=len(ranked),
    )


def run_strategy_comparison(config):
    """Nested Monte Carlo of the LR squared error for each design.

    The same outer z draws are shared by all designs. Each outer draw
    averages ``(beta_hat - beta_T)^2`` over ``inner_draws`` assignments
    sampled with replacement from the design (DET has just one).
    """
    setup = comparison_setup(config)
    names = setup.names

    def chunk(bounds):
        lo, hi = bounds
        out = np.empty((hi - lo, len(names)))
        for o in range(lo, hi):
            z = setup.z(o)
            for j in range(len(names)):
                out[o - lo, j] = np.mean(setup.squared_errors(o, j, z))
        return out

    blocks = pmap(chunk, chunk_bounds(config.outer_draws, OUTER_CHUNK), config.workers)
    mse = np.vstack(blocks)
    table = {"draw": list(range(config.outer_draws))}
    summary = {"sigma2_z": setup.sigma2_z, "opt_s_star": setup.opt.s_star,
               "opt_a_star": setup.opt.a_star, "pool_size": setup.pool_size,
               "mean": {}, "quantile": {}}
    for j, name in enumerate(names):
        table[name] = [float(v) for v in mse[:, j]]
        summary["mean"][name] = float(mse[:, j].mean())
        summary["quantile"][name] = float(np.quantile(mse[:, j], config.q))
    arrays = {name: mse[:, j] for j, name in enumerate(names)}
    return SimOutput(config, {"strategy_mse": table}, summary, arrays)


TAIL_VARIANTS = (
    ("exact_gaussian", dict(strategy="exact", sampler=ZSampler("gaussian"))),
    ("exact_laplace", dict(strategy="exact", sampler=ZSampler("laplace"))),
    ("exact_t2", dict(strategy="exact", sampler=ZSampler("student_t", dof=2.0))),
    ("normal_hbe", dict(strategy="normal")),
    ("approx_k0", dict(strategy="approx", kappa=0.0)),
    ("approx_k3", dict(strategy="approx", kappa=3.0)),
)


def run_tail_strategy_agreement(config, variants=None):
    """Criterion traces of every tail strategy on one common prefix grid.

    Each trace is divided by its value at the full pool, so all equal 1
    there. Exact-strategy traces are smoothed before locating the minimum.
    ``summary["argmin_index"]`` gives the grid position of each optimum.
    """
    X, ranked = _ranked_setup(config)
    K = len(ranked) // 2
    grid = 2 * _pair_grid(K, config.grid_points)
    mode = SearchMode("grid", config.grid_points, refine=False)
    a_grid = ranked.imbalances[grid - 1]
    table = {"s": [int(s) for s in grid], "a": [float(a) for a in a_grid]}
    summary = {"a_star": {}, "s_star": {}, "argmin_index": {}}
    tail_seed = int(np.random.SeedSequence([config.seed, _TAIL]).generate_state(1)[0])
    for name, kw in variants or TAIL_VARIANTS:
        tail = TailSpec(q=config.q, n_z=config.n_z, seed=tail_seed, smoothing=True, **kw)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = optimize(X, None, tail=tail, mode=mode, ranked=ranked, workers=config.workers)
        raw = res.trace_Q / res.trace_Q[-1]
        table[name] = [float(v) for v in raw]
        if res.trace_Q_smoothed is not None:
            table[name + "_smoothed"] = [float(v) for v in res.trace_Q_smoothed / res.trace_Q_smoothed[-1]]
        idx = int(np.flatnonzero(grid == res.s_star)[0])
        summary["a_star"][name] = res.a_star
        summary["s_star"][name] = res.s_star
        summary["argmin_index"][name] = idx
    return SimOutput(config, {"tail_traces": table}, summary)


def run_threshold_vs_p(config, p_list):
    """Optimal threshold (normal strategy) as columns are added to X.

    Columns are nested: the design for p uses the first p columns of one
    n x max(p) Gaussian matrix, and every p shares the same pool.
    """
    p_list = sorted(int(p) for p in p_list)
    if p_list[-1] >= config.n:
        raise ParameterError(f"max(p_list)={p_list[-1]} must be < n={config.n}")
    X_full = _rng(config.seed, _X).standard_normal((config.n, p_list[-1]))
    pool = make_pool(config)
    rows = {"p": [], "a_star": [], "quantile_rank": [], "s_star": []}
    for p in p_list:
        X = standardize(X_full[:, :p])[0]
        if p >= config.n - 1:
            warnings.warn(
                f"p={p} leaves no residual degrees of freedom beyond the intercept; "
                "every balanced assignment has the same imbalance", RuntimeWarning, stacklevel=2,
            )
        ranked = rank_pool(X, pool)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = optimize(X, None, tail=TailSpec(q=config.q, strategy="normal"),
                           mode=SearchMode("grid", config.grid_points), ranked=ranked,
                           workers=config.workers)
        rows["p"].append(p)
        rows["a_star"].append(res.a_star)
        rows["quantile_rank"].append(float(np.mean(ranked.imbalances <= res.a_star)))
        rows["s_star"].append(res.s_star)
    return SimOutput(config, {"threshold_vs_p": rows}, {"p_list": p_list})


def with_seed(config, seed):
    return replace(config, seed=seed)
