"""Moment matrices of a restricted design.

For a design that is uniform over assignments ``w_1..w_s``::

    Sigma_W = (1/s) sum w w'
    D       = (1/s) sum (w' P w) w w'
    G       = (I - P) Sigma_W (I - P)
    R       = G + (2/n) D

where P projects onto the columns of the (standardized) covariates. The
LR-estimator MSE at a fixed unobserved vector z is approximately
``z' R z / n**2``.
"""

from dataclasses import dataclass

import numpy as np

from .balance import orthonormal_basis
from .errors import CapacityError, InvalidDimensionError

MAX_N = 2000
REBUILD_EVERY = 256


@dataclass(frozen=True, eq=False)
class ProjectionCache:
    P: np.ndarray
    X_perp: np.ndarray
    I_minus_P: np.ndarray
    basis: np.ndarray

    @property
    def n(self):
        return self.P.shape[0]

    @property
    def p(self):
        return self.basis.shape[1]

    def quad(self, W):
        """``w' P w`` for each row of W."""
        V = np.atleast_2d(W) @ self.basis
        return np.einsum("ij,ij->i", V, V)


def projection_cache(X, max_n=MAX_N):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] > max_n:
        raise CapacityError(f"n={X.shape[0]} exceeds the dense moment limit {max_n}")
    U, _, Vt = orthonormal_basis(X)
    P = U @ U.T
    P = 0.5 * (P + P.T)
    I_minus_P = np.eye(X.shape[0]) - P
    for a in (P, U, I_minus_P):
        a.setflags(write=False)
    X_perp = U @ Vt
    X_perp.setflags(write=False)
    return ProjectionCache(P=P, X_perp=X_perp, I_minus_P=I_minus_P, basis=U)


@dataclass(frozen=True, eq=False)
class StrategyMoments:
    """Design moments; ``counts`` is the exact integer matrix ``sum w w'``.

    Identities such as ``Sigma_W 1 = 0`` hold exactly on ``counts``; the
    division by ``s`` can leave rounding in ``Sigma_W`` itself.
    """

    Sigma_W: np.ndarray
    D: np.ndarray
    s: int
    counts: np.ndarray | None = None

    @property
    def n(self):
        return self.Sigma_W.shape[0]

    @property
    def forced_balance(self):
        """True when ``Sigma_W 1 = 0`` (to rounding)."""
        return bool(np.abs(self.Sigma_W.sum(axis=1)).max() <= 1e-9 * self.n)

    def scaled(self, c):
        return StrategyMoments(c * self.Sigma_W, c * self.D, self.s)


def _as_float(W):
    return np.atleast_2d(np.asarray(W, dtype=float))


def moments_of(W, cache):
    """Moments of the uniform design over the rows of ``W``."""
    W = _as_float(W)
    s = W.shape[0]
    if s == 0:
        raise InvalidDimensionError("moments need at least one assignment")
    if W.shape[1] != cache.n:
        raise InvalidDimensionError(f"assignments have length {W.shape[1]}, expected {cache.n}")
    b = cache.quad(W)
    C = W.T @ W
    D = (W * b[:, None]).T @ W / s
    return StrategyMoments(C / s, 0.5 * (D + D.T), s, C)


def moments_from_prefix(ranked, s, cache):
    if not 1 <= s <= len(ranked):
        raise IndexError(f"prefix length s={s} outside 1..{len(ranked)}")
    return moments_of(ranked.assignments[:s], cache)


def increment_moments(m, w, cache):
    """Moments after adding one more assignment to the design (O(n^2))."""
    w = np.asarray(w, dtype=float)
    if w.shape != (m.n,):
        raise InvalidDimensionError(f"assignment has shape {w.shape}, expected ({m.n},)")
    b = float(cache.quad(w)[0])
    outer = np.outer(w, w)
    s = m.s + 1
    C = None if m.counts is None else m.counts + outer
    Sigma = C / s if C is not None else (m.s * m.Sigma_W + outer) / s
    D = (m.s * m.D + b * outer) / s
    return StrategyMoments(Sigma, D, s, C)


class MomentAccumulator:
    """Running sums along a ranked pool.

    Keeps unnormalized sums so a snapshot at any prefix is one division.
    Rank-one updates are used for single steps; every ``REBUILD_EVERY``
    of them the sums are rebuilt from the prefix to cap rounding drift.
    """

    def __init__(self, W, cache):
        self.W = np.asarray(W)
        self.cache = cache
        self.b = cache.quad(self.W.astype(float))
        n = cache.n
        self.sum_ww = np.zeros((n, n))
        self.sum_bww = np.zeros((n, n))
        self.s = 0
        self._since_rebuild = 0

    def _block(self, lo, hi):
        Wb = self.W[lo:hi].astype(float)
        return Wb.T @ Wb, (Wb * self.b[lo:hi, None]).T @ Wb

    def advance_to(self, s):
        if not self.s <= s <= len(self.W):
            raise IndexError(f"cannot advance from {self.s} to {s}")
        if s - self.s > 2:
            a, d = self._block(self.s, s)
            self.sum_ww += a
            self.sum_bww += d
        else:
            for i in range(self.s, s):
                w = self.W[i].astype(float)
                outer = np.outer(w, w)
                self.sum_ww += outer
                self.sum_bww += self.b[i] * outer
                self._since_rebuild += 1
        self.s = s
        if self._since_rebuild >= REBUILD_EVERY:
            self.sum_ww, self.sum_bww = self._block(0, s)
            self._since_rebuild = 0
        return self

    def snapshot(self):
        if self.s == 0:
            raise InvalidDimensionError("no assignments accumulated yet")
        D = self.sum_bww / self.s
        C = self.sum_ww.copy()
        return StrategyMoments(C / self.s, 0.5 * (D + D.T), self.s, C)


def criterion_matrices(m, cache):
    """``(G, R)`` with G = (I-P) Sigma_W (I-P) and R = G + (2/n) D."""
    M = cache.I_minus_P
    G = M @ m.Sigma_W @ M
    G = 0.5 * (G + G.T)
    R = G + (2.0 / m.n) * m.D
    asym = np.abs(R - R.T).max()
    assert asym <= 1e-8 * max(1.0, np.abs(R).max()), f"R asymmetric by {asym}"
    return G, 0.5 * (R + R.T)


def balance_term(m, cache):
    """``tr(X_perp' Sigma_W X_perp)``, the observed-imbalance term."""
    Xp = cache.X_perp
    return float(np.einsum("ij,ij->", Xp, m.Sigma_W @ Xp))


def needs_bias_warning(s, n):
    """Small designs estimate Sigma_W and D poorly; flag s < 10 n."""
    return s < 10 * n
