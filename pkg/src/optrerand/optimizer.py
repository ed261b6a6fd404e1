"""Threshold search over a ranked assignment pool.

The pool is sorted by imbalance, and the candidate designs are its
prefixes: prefix ``s`` is the uniform design over the ``s`` best-balanced
assignments, with rerandomization threshold equal to the imbalance of the
``s``-th one. The optimizer evaluates the tail criterion along prefixes and
keeps the minimum.

Mirror pairs ``{w, -w}`` sit next to each other after ranking, so the
search runs over even prefix lengths only; every candidate design is then
mirror-closed.
"""

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._parallel import pmap
from .balance import BalanceMetric, rank_pool
from .design_space import mirror_close
from .errors import CriterionError, EmptyPoolError, ParameterError, RerandError, ValidationError
from .moments import MomentAccumulator, moments_of, needs_bias_warning, projection_cache
from .tail import TailSpec, draw_z, evaluate_tail, smooth_series

SNAPSHOT_BATCH = 64


@dataclass(frozen=True)
class SearchMode:
    kind: str = "grid"
    points: int = 64
    refine: bool = True
    tolerance: int = 8

    def __post_init__(self):
        if self.kind not in ("exhaustive", "grid", "binary"):
            raise ParameterError(f"unknown search mode {self.kind!r}")
        if self.kind == "grid" and self.points < 2:
            raise ParameterError("grid mode needs at least 2 points")
        if self.kind == "binary" and self.tolerance < 1:
            raise ParameterError("binary tolerance must be >= 1")

    @classmethod
    def parse(cls, text):
        """``exhaustive``, ``grid:<points>`` (``grid:<points>:norefine``) or ``binary:<tol>``."""
        kind, _, rest = text.partition(":")
        try:
            if kind == "exhaustive":
                return cls("exhaustive")
            if kind == "grid":
                pts, _, flag = rest.partition(":")
                return cls("grid", points=int(pts) if pts else 64, refine=flag != "norefine")
            if kind == "binary":
                return cls("binary", tolerance=int(rest) if rest else 8)
        except ValueError as exc:
            raise ParameterError(f"bad search mode {text!r}") from exc
        raise ParameterError(f"bad search mode {text!r}")

    @property
    def label(self):
        if self.kind == "grid":
            return f"grid:{self.points}" + ("" if self.refine else ":norefine")
        if self.kind == "binary":
            return f"binary:{self.tolerance}"
        return "exhaustive"


@dataclass(frozen=True, eq=False)
class DesignResult:
    """Outcome of the threshold search.

    ``trace_s``/``trace_a``/``trace_Q`` hold every evaluated prefix in
    ascending ``s``; ``trace_Q_smoothed`` is set when the exact strategy
    was smoothed, in which case the optimum is taken on the smoothed
    series.
    """

    s_star: int
    a_star: float
    Q_star: float
    W_star: np.ndarray
    trace_s: np.ndarray
    trace_a: np.ndarray
    trace_Q: np.ndarray
    X: np.ndarray
    trace_Q_smoothed: np.ndarray | None = None
    config: dict = field(default_factory=dict)
    flags: tuple = ()

    @property
    def n(self):
        return self.W_star.shape[1]

    @property
    def selection_Q(self):
        return self.trace_Q if self.trace_Q_smoothed is None else self.trace_Q_smoothed


def _pair_grid(K, points):
    """``min(points, K)`` distinct, roughly log-spaced integers in 1..K."""
    target = min(points, K)
    m = target
    while True:
        ks = np.union1d(np.round(np.geomspace(1, K, m)).astype(int), [K])
        if ks.size >= target:
            return ks
        m += target - ks.size


class _Sweep:
    """Evaluates the criterion at prefix lengths, caching results."""

    def __init__(self, ranked, cache, tail, workers):
        self.ranked = ranked
        self.cache = cache
        self.tail = tail
        self.workers = workers
        self.values = {}
        self.draws = None
        if tail.strategy == "exact":
            self.draws = draw_z(tail.sampler, cache.n, tail.n_z, tail.seed, workers)

    def _crit(self, item):
        s, m = item
        try:
            return s, float(evaluate_tail(m, self.cache, self.tail, draws=self.draws))
        except RerandError as exc:
            raise CriterionError(s, exc) from exc

    def evaluate(self, s_values):
        todo = sorted(set(int(s) for s in s_values) - self.values.keys())
        if not todo:
            return
        acc = MomentAccumulator(self.ranked.assignments, self.cache)
        # bounded batches of snapshots keep memory at O(batch * n^2)
        for lo in range(0, len(todo), SNAPSHOT_BATCH):
            snaps = []
            for s in todo[lo: lo + SNAPSHOT_BATCH]:
                acc.advance_to(s)
                snaps.append((s, acc.snapshot()))
            for s, q in pmap(self._crit, snaps, self.workers):
                self.values[s] = q

    def evaluate_one(self, s):
        if s not in self.values:
            m = moments_of(self.ranked.assignments[:s], self.cache)
            self.values[s] = self._crit((s, m))[1]
        return self.values[s]


def _ternary(sweep, step, K, tol):
    lo, hi = 1, K
    while hi - lo > max(2, tol):
        m1 = lo + (hi - lo) // 3
        m2 = hi - (hi - lo) // 3
        if sweep.evaluate_one(step * m1) <= sweep.evaluate_one(step * m2):
            hi = m2
        else:
            lo = m1
    sweep.evaluate(step * np.arange(lo, hi + 1))
    return lo, hi


def optimize(X, pool, metric=None, tail=None, mode=None, ranked=None, workers=None):
    """Find the prefix of the ranked pool minimizing the tail criterion.

    ``pool`` is mirror-closed first if necessary. A precomputed
    ``ranked`` pool (from :func:`rank_pool`) may be passed to skip
    ranking.
    """
    metric = metric or BalanceMetric()
    tail = tail or TailSpec()
    mode = mode or SearchMode()
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if ranked is None:
        if len(pool) == 0:
            raise EmptyPoolError("cannot optimize over an empty pool")
        if not pool.mirror_closed:
            pool = mirror_close(pool)
        ranked = rank_pool(X, pool, metric)
    S = len(ranked)
    if S < 2:
        raise EmptyPoolError(f"need at least 2 assignments, got {S}")
    cache = projection_cache(X)
    step = 2 if ranked.pool.mirror_closed else 1
    K = S // step
    sweep = _Sweep(ranked, cache, tail, workers)

    if mode.kind == "exhaustive":
        sweep.evaluate(step * np.arange(1, K + 1))
    elif mode.kind == "grid":
        ks = _pair_grid(K, mode.points)
        sweep.evaluate(step * ks)
        if mode.refine and tail.strategy != "exact":
            vals = np.array([sweep.values[step * k] for k in ks])
            i = int(np.argmin(vals))
            lo = ks[max(i - 1, 0)]
            hi = ks[min(i + 1, len(ks) - 1)]
            sweep.evaluate(step * np.arange(lo, hi + 1))
    else:
        _ternary(sweep, step, K, mode.tolerance)
        # convexity is only conjectured: cross-check against a coarse grid
        ks = _pair_grid(K, 16)
        sweep.evaluate(step * ks)

    s_arr = np.array(sorted(sweep.values))
    Q_arr = np.array([sweep.values[s] for s in s_arr])
    a_arr = ranked.imbalances[s_arr - 1]
    Q_smooth = None
    if tail.strategy == "exact" and tail.smoothing and len(s_arr) >= 4:
        Q_smooth = smooth_series(a_arr, Q_arr)
    sel = Q_arr if Q_smooth is None else Q_smooth
    i = int(np.argmin(sel))  # first occurrence = smallest s
    s_star = int(s_arr[i])
    flags = []
    if needs_bias_warning(s_star, cache.n):
        flags.append("inference_fragile")
        warnings.warn(
            f"optimal design keeps only {s_star} assignments (< 10 n = {10 * cache.n}); "
            "moment estimates and randomization tests may be unreliable",
            RuntimeWarning, stacklevel=2,
        )
    config = {
        "metric": metric.label,
        "tail": tail.as_dict(),
        "mode": mode.label,
        "pool_seed": ranked.pool.seed,
        "pool_size": S,
        "generator": ranked.pool.generator,
    }
    W_star = np.array(ranked.assignments[:s_star])
    return DesignResult(
        s_star=s_star,
        a_star=float(ranked.imbalances[s_star - 1]),
        Q_star=float(sel[i]),
        W_star=W_star,
        trace_s=s_arr,
        trace_a=np.asarray(a_arr, dtype=float),
        trace_Q=Q_arr,
        trace_Q_smoothed=Q_smooth,
        X=X,
        config=config,
        flags=tuple(flags),
    )


def sweep_trace_export(result, path=None):
    """CSV rows ``s,a,Q_raw,Q_smoothed`` in ascending s.

    Floats are written with ``repr`` so a reload reproduces them exactly.
    Returns the CSV text, and also writes it when ``path`` is given.
    """
    if len(result.trace_s) == 0:
        raise ValidationError("empty trace")
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["s", "a", "Q_raw", "Q_smoothed"])
    sm = result.trace_Q_smoothed
    for i, s in enumerate(result.trace_s):
        wr.writerow([
            int(s), repr(float(result.trace_a[i])), repr(float(result.trace_Q[i])),
            "" if sm is None else repr(float(sm[i])),
        ])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def load_trace(source):
    """Inverse of :func:`sweep_trace_export`; accepts text or a path."""
    if "\n" not in source:
        with open(source) as fh:
            source = fh.read()
    rows = list(csv.DictReader(io.StringIO(source)))
    s = np.array([int(r["s"]) for r in rows])
    a = np.array([float(r["a"]) for r in rows])
    Q = np.array([float(r["Q_raw"]) for r in rows])
    sm = None
    if rows and rows[0]["Q_smoothed"] != "":
        sm = np.array([float(r["Q_smoothed"]) for r in rows])
    return s, a, Q, sm

