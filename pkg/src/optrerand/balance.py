"""Scalar imbalance metrics and pool ranking.

Every metric here is a quadratic form ``w' A w / n`` for some symmetric
positive semidefinite ``A``: the projection onto the column space of X for
Mahalanobis distance, or a kernel gram matrix. The 1/n scale is shared so
thresholds are comparable across metrics.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .design_space import AssignmentPool, check_assignments
from .errors import EmptyPoolError, InvalidGramError, NumericalError, ParameterError, SingularDesignError

RCOND_TOL = 1e-12
EXPONENT_CAP = 700.0
KERNELS = ("linear", "exponential", "gaussian")


@dataclass(frozen=True)
class BalanceMetric:
    kind: str = "mahalanobis"
    kernel: str | None = None
    bandwidth: float | None = None
    exponent_cap: float = EXPONENT_CAP

    def __post_init__(self):
        if self.kind not in ("mahalanobis", "kernel_quadratic"):
            raise ParameterError(f"unknown metric kind {self.kind!r}")
        if self.kind == "kernel_quadratic" and self.kernel not in KERNELS:
            raise ParameterError(f"kernel must be one of {KERNELS}, got {self.kernel!r}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ParameterError(f"gaussian bandwidth must be positive, got {self.bandwidth}")

    @property
    def label(self):
        if self.kind == "mahalanobis":
            return "mahalanobis"
        tag = f"kernel-{self.kernel}"
        if self.kernel == "gaussian" and self.bandwidth is not None:
            tag += f":{self.bandwidth!r}"
        return tag

    @classmethod
    def parse(cls, text):
        """Parse a CLI metric flag such as ``kernel-gaussian:0.5``."""
        if text == "mahalanobis":
            return cls()
        if not text.startswith("kernel-"):
            raise ParameterError(f"unknown metric {text!r}")
        name, _, bw = text[len("kernel-"):].partition(":")
        if bw and name != "gaussian":
            raise ParameterError("only the gaussian kernel takes a bandwidth")
        try:
            bandwidth = float(bw) if bw else None
        except ValueError as exc:
            raise ParameterError(f"bad bandwidth in {text!r}") from exc
        return cls(kind="kernel_quadratic", kernel=name, bandwidth=bandwidth)


def orthonormal_basis(X):
    """Left singular vectors spanning the columns of X.

    Raises :class:`SingularDesignError` naming the columns involved in a
    near-linear dependence when the reciprocal condition number is below
    ``RCOND_TOL``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if p >= n + 1 or p == 0:
        raise SingularDesignError(f"need 0 < p <= n, got n={n}, p={p}")
    U, sv, Vt = np.linalg.svd(X, full_matrices=False)
    if sv[0] == 0 or sv[-1] / sv[0] < RCOND_TOL:
        null = Vt[-1]
        cols = np.flatnonzero(np.abs(null) > 1e-8 * np.abs(null).max()).tolist()
        raise SingularDesignError(
            f"covariate matrix is rank deficient (rcond={sv[-1] / max(sv[0], 1e-300):.3g}); "
            f"dependent columns: {cols}",
            columns=cols,
        )
    return U, sv, Vt


def mahalanobis_imbalance(X, w):
    """``w' P w / n`` with P the projection onto the columns of X."""
    w = np.asarray(w)
    check_assignments(w)
    U, _, _ = orthonormal_basis(X)
    v = U.T @ w.astype(float)
    return float(v @ v) / w.size


def _check_gram(K):
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise InvalidGramError(f"gram matrix must be square, got shape {K.shape}")
    scale = max(1.0, float(np.abs(K).max()))
    if not np.allclose(K, K.T, rtol=0, atol=1e-10 * scale):
        raise InvalidGramError("gram matrix is not symmetric")
    return K


def kernel_imbalance(K, w):
    K = _check_gram(K)
    w = np.asarray(w, dtype=float)
    return float(w @ K @ w) / w.size


def median_bandwidth(X):
    """Median of pairwise squared distances between distinct rows."""
    X = np.asarray(X, dtype=float)
    sq = np.sum(X * X, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0)
    iu = np.triu_indices(X.shape[0], k=1)
    h = float(np.median(d2[iu]))
    if not h > 0:
        raise ParameterError("median heuristic bandwidth is zero (all rows identical)")
    return h


def gram_matrix(X, kernel="gaussian", bandwidth=None, exponent_cap=EXPONENT_CAP):
    """Kernel gram matrix of the rows of X.

    gaussian: ``exp(-|x_i - x_j|^2 / bandwidth)`` (median heuristic when no
    bandwidth is given); exponential: ``exp(x_i' x_j)`` with exponents
    clamped at ``exponent_cap``; linear: ``X X'``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if kernel == "linear":
        K = X @ X.T
    elif kernel == "exponential":
        E = X @ X.T
        n_clamped = int(np.sum(E > exponent_cap))
        if n_clamped:
            warnings.warn(
                f"exponential kernel: {n_clamped} inner products exceed {exponent_cap} and were clamped",
                RuntimeWarning, stacklevel=2,
            )
        K = np.exp(np.minimum(E, exponent_cap))
    elif kernel == "gaussian":
        if bandwidth is None:
            bandwidth = median_bandwidth(X)
        if not bandwidth > 0:
            raise ParameterError(f"gaussian bandwidth must be positive, got {bandwidth}")
        sq = np.sum(X * X, axis=1)
        d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0)
        np.fill_diagonal(d2, 0.0)
        K = np.exp(-d2 / bandwidth)
    else:
        raise ParameterError(f"unknown kernel {kernel!r}")
    K = 0.5 * (K + K.T)
    lam_min = np.linalg.eigvalsh(K)[0]
    if lam_min < -1e-8 * max(1.0, float(np.abs(K).max())):
        raise NumericalError(f"{kernel} gram matrix is not PSD (min eigenvalue {lam_min:.3g})")
    return K


def quadratic_form_matrix(X, metric):
    """Matrix A such that the metric equals ``w' A w / n``."""
    if metric.kind == "mahalanobis":
        U, _, _ = orthonormal_basis(X)
        return U @ U.T
    return gram_matrix(X, metric.kernel, metric.bandwidth, metric.exponent_cap)


def imbalances(X, W, metric=None):
    """Imbalance of every row of ``W`` (vectorized)."""
    metric = metric or BalanceMetric()
    W = np.atleast_2d(np.asarray(W, dtype=float))
    n = W.shape[1]
    if metric.kind == "mahalanobis":
        U, _, _ = orthonormal_basis(X)
        V = W @ U
        return np.einsum("ij,ij->i", V, V) / n
    K = gram_matrix(X, metric.kernel, metric.bandwidth, metric.exponent_cap)
    return np.einsum("ij,ij->i", W @ K, W) / n


@dataclass(frozen=True, eq=False)
class RankedPool:
    """A pool sorted by ascending imbalance.

    ``order[i]`` is the index in the source pool of ranked row ``i``.
    """

    pool: AssignmentPool
    imbalances: np.ndarray
    order: np.ndarray
    metric: BalanceMetric

    def __len__(self):
        return len(self.pool)

    @property
    def assignments(self):
        return self.pool.assignments

    def prefix(self, s):
        return self.pool.assignments[:s]


def _mirror_pair_ids(pool):
    """Pair id for each row: index of the first row of its {w, -w} pair."""
    first = {}
    ids = np.empty(len(pool), dtype=np.intp)
    for i, row in enumerate(pool.assignments):
        canon = row if row[0] > 0 else -row
        ids[i] = first.setdefault(canon.tobytes(), i)
    return ids


def rank_pool(X, pool, metric=None):
    """Stable ascending sort of ``pool`` by imbalance.

    Ties go to the lower source index. In a mirror-closed pool each ``w`` is
    kept adjacent to ``-w`` so that every even-length prefix is itself
    mirror-closed.
    """
    if len(pool) == 0:
        raise EmptyPoolError("cannot rank an empty pool")
    metric = metric or BalanceMetric()
    b = imbalances(X, pool.assignments, metric)
    idx = np.arange(len(pool))
    if pool.mirror_closed:
        pid = _mirror_pair_ids(pool)
        pair_b = np.full(len(pool), np.inf)
        np.minimum.at(pair_b, pid, b)
        order = np.lexsort((idx, pid, pair_b[pid]))
    else:
        order = np.lexsort((idx, b))
    ranked = AssignmentPool(
        pool.assignments[order], n=pool.n, seed=pool.seed,
        mirror_closed=pool.mirror_closed, generator=pool.generator,
        origin=pool.origin[order],
    )
    b_sorted = b[order]
    if pool.mirror_closed:
        # members of a pair are equal up to rounding; report the shared value
        b_sorted = pair_b[pid][order]
    b_sorted = np.maximum(b_sorted, 0.0)
    b_sorted.setflags(write=False)
    order.setflags(write=False)
    return RankedPool(ranked, b_sorted, order, metric)
