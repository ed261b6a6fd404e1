"""Tail criteria for the MSE of the treatment-effect estimators.

The unobserved vector z is fixed in reality; here it is given a faux
distribution purely to define a criterion. For the regression (LR)
estimator the MSE at z is approximately ``z' R z / n**2`` and the
criterion is its q-quantile over z, computed one of three ways:

``exact``
    empirical quantile over draws of z from a user-chosen sampler
``normal``
    Gaussian z, so ``z' R z`` is a weighted sum of chi-square(1)
    variables; quantile by three-cumulant (Hall-Buckley-Eagleson) matching
``approx``
    mean + c * standard error, with c the normal quantile at q and the
    excess kurtosis of z as a parameter

Because the optimal threshold does not change under shifts or rescaling
of the criterion, the functions used inside the threshold search drop
sigma^2 and other design-independent constants.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import interpolate, stats

from ._parallel import chunk_bounds, chunk_rng, pmap
from .errors import (
    DegenerateDistributionError,
    InvalidDimensionError,
    ParameterError,
    PreconditionError,
    ValidationError,
)
from .moments import balance_term, criterion_matrices

Z_CHUNK = 4096
STRATEGIES = ("exact", "normal", "approx")


@dataclass(frozen=True, eq=False)
class ZSampler:
    """Distribution of the iid entries of z.

    With ``standardized`` the entries are rescaled to unit variance when
    the variance is finite (Student t with dof <= 2 is left as is).
    """

    family: str = "gaussian"
    dof: float | None = None
    table: np.ndarray | None = None
    standardized: bool = True

    def __post_init__(self):
        if self.family not in ("gaussian", "laplace", "student_t", "table", "constant"):
            raise ParameterError(f"unknown z family {self.family!r}")
        if self.family == "student_t" and not (self.dof and self.dof > 0):
            raise ParameterError(f"student t needs dof > 0, got {self.dof}")
        if self.family in ("table", "constant"):
            if self.table is None or np.size(self.table) == 0:
                raise ParameterError(f"{self.family} sampler needs a non-empty table")
            object.__setattr__(self, "table", np.asarray(self.table, dtype=float))

    @classmethod
    def parse(cls, text):
        """Parse ``gaussian``, ``laplace`` or ``t:<dof>``."""
        if text in ("gaussian", "normal"):
            return cls("gaussian")
        if text == "laplace":
            return cls("laplace")
        if text.startswith("t:"):
            try:
                return cls("student_t", dof=float(text[2:]))
            except ValueError as exc:
                raise ParameterError(f"bad t dof in {text!r}") from exc
        raise ParameterError(f"unknown z distribution {text!r}")

    @property
    def label(self):
        if self.family == "student_t":
            return f"t:{self.dof:g}"
        return self.family

    @property
    def kurtosis(self):
        """Excess kurtosis of one entry."""
        if self.family == "gaussian":
            return 0.0
        if self.family == "laplace":
            return 3.0
        if self.family == "student_t":
            return 6.0 / (self.dof - 4.0) if self.dof > 4 else np.inf
        if self.family == "table":
            return float(stats.kurtosis(self.table))
        return -2.0

    def sample(self, rng, size, n):
        if self.family == "gaussian":
            return rng.standard_normal((size, n))
        if self.family == "laplace":
            scale = 1.0 / np.sqrt(2.0) if self.standardized else 1.0
            return rng.laplace(0.0, scale, (size, n))
        if self.family == "student_t":
            z = rng.standard_t(self.dof, (size, n))
            if self.standardized and self.dof > 2:
                z *= np.sqrt((self.dof - 2.0) / self.dof)
            return z
        if self.family == "constant":
            z0 = np.broadcast_to(self.table, (n,))
            return np.tile(z0, (size, 1))
        t = self.table
        if self.standardized and t.std() > 0:
            t = (t - t.mean()) / t.std()
        return rng.choice(t, size=(size, n), replace=True)


@dataclass(frozen=True, eq=False)
class TailSpec:
    q: float = 0.95
    strategy: str = "normal"
    sampler: ZSampler = field(default_factory=ZSampler)
    n_z: int = 1000
    smoothing: bool = True
    kappa: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.q < 1:
            raise ParameterError(f"q must lie in (0, 1), got {self.q}")
        if self.strategy not in STRATEGIES:
            raise ParameterError(f"tail strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.strategy == "exact" and self.n_z < 100:
            raise ParameterError(f"exact strategy needs n_z >= 100, got {self.n_z}")
        if not self.kappa >= -2:
            raise ParameterError(f"excess kurtosis must be >= -2, got {self.kappa}")

    def as_dict(self):
        return {
            "q": self.q, "strategy": self.strategy, "z_dist": self.sampler.label,
            "n_z": self.n_z, "smoothing": self.smoothing, "kappa": self.kappa,
            "seed": self.seed,
        }


def normal_quantile(q):
    return float(stats.norm.ppf(q))


def chi2_quantile(q, dof):
    return stats.chi2.ppf(q, dof)


# ------------------------------------------------------------ MSE building blocks

def _check_len(v, n, name):
    if np.shape(v)[-1] != n:
        raise InvalidDimensionError(f"{name} has length {np.shape(v)[-1]}, expected {n}")


def mse_lr_given_z(R, z):
    """Third-order LR MSE at z: ``z' R z / n**2``. Accepts a batch of rows."""
    R = np.asarray(R, dtype=float)
    n = R.shape[0]
    z = np.asarray(z, dtype=float)
    _check_len(z, n, "z")
    if z.ndim == 1:
        return float(z @ R @ z) / n**2
    return np.einsum("ij,ij->i", z @ R, z) / n**2


def mse_dm_given_z(Sigma_W, X, beta, z):
    """Exact DM MSE: ``(X beta + z)' Sigma_W (X beta + z) / n**2``."""
    Sigma_W = np.asarray(Sigma_W, dtype=float)
    n = Sigma_W.shape[0]
    X = np.asarray(X, dtype=float).reshape(n, -1)
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if beta.shape[0] != X.shape[1]:
        raise InvalidDimensionError(f"beta has length {beta.shape[0]}, X has {X.shape[1]} columns")
    z = np.asarray(z, dtype=float)
    _check_len(z, n, "z")
    v = X @ beta + z
    if v.ndim == 1:
        return float(v @ Sigma_W @ v) / n**2
    return np.einsum("ij,ij->i", v @ Sigma_W, v) / n**2


def expected_mse_lr(m, cache, sigma2_z):
    n = m.n
    return sigma2_z / n + sigma2_z / n**2 * balance_term(m, cache)


def _signal(X, beta, n):
    X = np.asarray(X, dtype=float).reshape(n, -1)
    return X @ np.atleast_1d(np.asarray(beta, dtype=float))


def expected_mse_dm(m, X, beta, sigma2_z):
    n = m.n
    xb = _signal(X, beta, n)
    return sigma2_z / n + float(xb @ m.Sigma_W @ xb) / n**2


def se_mse_dm(m, X, beta, sigma2_z, kappa_z=0.0):
    """Standard error over z of the DM MSE.

    The skewness term vanishes only for forced-balance designs, which are
    therefore required.
    """
    if not m.forced_balance:
        raise PreconditionError("se_mse_dm requires a forced-balance design (Sigma_W 1 = 0)")
    n = m.n
    xb = _signal(X, beta, n)
    Sx = m.Sigma_W @ xb
    inner = n * kappa_z + 2.0 * np.sum(m.Sigma_W**2) + 4.0 / sigma2_z * float(Sx @ Sx)
    return sigma2_z / n**2 * np.sqrt(max(inner, 0.0))


def _lr_terms(m, cache, G=None, R=None):
    if G is None:
        G, R = criterion_matrices(m, cache)
    n = m.n
    MS = cache.I_minus_P @ m.Sigma_W
    rand2 = float(np.sum(MS * MS))
    trGD = float(np.sum(G * m.D))
    trD2 = float(np.sum(m.D * m.D))
    SS = float(np.sum(np.diag(R) ** 2))
    return rand2, trGD, trD2, SS, n


def se_mse_lr(m, cache, sigma2_z, kappa_z=0.0):
    """Approximate standard error over z of the LR MSE.

    ``(sigma^2/n^2) sqrt(2 |(I-P) Sigma_W|_F^2 + (8/n) tr(GD) + (8/n^2) tr(D^2) + kappa SS)``
    with ``SS = sum_i (g_ii + 2 d_ii / n)^2``.
    """
    rand2, trGD, trD2, SS, n = _lr_terms(m, cache)
    inner = 2.0 * rand2 + 8.0 / n * trGD + 8.0 / n**2 * trD2 + kappa_z * SS
    return sigma2_z / n**2 * np.sqrt(max(inner, 0.0))


# ------------------------------------------------------------ chi-square mixtures

def hbe_quantile(lambdas, q):
    """Quantile of ``sum_i lambda_i chi2_1`` by three-cumulant matching.

    Fits ``a * chi2_nu + b`` with the same first three cumulants:
    ``a = m3/m2``, ``nu = m2^3/m3^2``, ``b = m1 - a nu`` where
    ``m_k = sum lambda^k``. Slightly negative weights (rounding) are
    clamped to zero.
    """
    lam = np.asarray(lambdas, dtype=float).ravel()
    neg = lam < 0
    if neg.any():
        total = np.abs(lam).sum()
        clamped = -lam[neg].sum()
        if total > 0 and clamped > 1e-6 * total:
            warnings.warn(
                f"clamping {neg.sum()} negative weights ({clamped / total:.2e} of total mass)",
                RuntimeWarning, stacklevel=2,
            )
        lam = np.where(neg, 0.0, lam)
    if not np.any(lam > 0):
        raise DegenerateDistributionError("all chi-square weights are zero")
    m1, m2, m3 = lam.sum(), (lam**2).sum(), (lam**3).sum()
    a = m3 / m2
    nu = m2**3 / m3**2
    b = m1 - a * nu
    out = a * chi2_quantile(q, nu) + b
    return float(out) if np.ndim(out) == 0 else out


def tail_normal_lr(m, cache, q, R=None):
    if R is None:
        _, R = criterion_matrices(m, cache)
    lam = np.linalg.eigvalsh(R)
    return hbe_quantile(lam, q)


def draw_z(sampler, n, n_z, seed, workers=None):
    """``n_z`` draws of z; chunk ``c`` is generated from ``(seed, c)``."""
    bounds = chunk_bounds(n_z, Z_CHUNK)
    blocks = pmap(
        lambda cb: sampler.sample(chunk_rng(seed, cb[0]), cb[1][1] - cb[1][0], n),
        list(enumerate(bounds)), workers,
    )
    return np.vstack(blocks)


def tail_exact_lr(m, cache, q, sampler=None, n_z=1000, seed=0, draws=None, R=None, workers=None):
    """Empirical q-quantile of ``z' R z`` over sampled z."""
    if draws is None:
        if n_z < 100:
            raise ParameterError(f"n_z must be >= 100, got {n_z}")
        draws = draw_z(sampler or ZSampler(), m.n, n_z, seed, workers)
    if R is None:
        _, R = criterion_matrices(m, cache)
    vals = np.einsum("ij,ij->i", draws @ R, draws)
    return float(np.quantile(vals, q))


def tail_approx_lr(m, cache, q, kappa_z=0.0, G=None, R=None):
    """Scale-free approximate tail criterion for the LR estimator.

    ``BAL + c sqrt(2 RAND^2 + 8 tr(GD)/n + 8 tr(D^2)/n^2 + kappa SS)`` with
    ``BAL = tr(X_perp' Sigma_W X_perp)`` and ``RAND^2 = |(I-P) Sigma_W|_F^2``.
    """
    rand2, trGD, trD2, SS, n = _lr_terms(m, cache, G, R)
    c = normal_quantile(q)
    inner = 2.0 * rand2 + 8.0 * trGD / n + 8.0 * trD2 / n**2 + kappa_z * SS
    return balance_term(m, cache) + c * np.sqrt(max(inner, 0.0))


def q_prime_dm(m, X, beta, sigma2_z, q, kappa_z=0.0):
    """Approximate DM tail criterion for a known beta (diagnostics only)."""
    n = m.n
    xb = _signal(X, beta, n)
    Sx = m.Sigma_W @ xb
    bal1 = float(xb @ Sx)
    bal2 = float(Sx @ Sx)
    c = normal_quantile(q)
    inner = n * kappa_z + 2.0 * np.sum(m.Sigma_W**2) + 4.0 / sigma2_z * bal2
    return bal1 + c * sigma2_z * np.sqrt(max(inner, 0.0))


def evaluate_tail(m, cache, spec, draws=None, workers=None):
    """Dispatch on ``spec.strategy``; returns the scale-free criterion."""
    G, R = criterion_matrices(m, cache)
    if spec.strategy == "normal":
        return tail_normal_lr(m, cache, spec.q, R=R)
    if spec.strategy == "approx":
        return tail_approx_lr(m, cache, spec.q, spec.kappa, G=G, R=R)
    return tail_exact_lr(
        m, cache, spec.q, spec.sampler, spec.n_z, spec.seed, draws=draws, R=R, workers=workers
    )


# ------------------------------------------------------------ smoothing

def _moving_average(y, window=5):
    h = window // 2
    return np.array([y[max(0, i - h): i + h + 1].mean() for i in range(len(y))])


def smooth_series(a_values, Q_values, lam=None):
    """Cubic smoothing spline of Q over a.

    ``lam=None`` picks the penalty by generalized cross-validation;
    ``lam=0`` interpolates. Falls back to a centered moving average
    (window 5) when the spline system cannot be solved. Repeated a values
    are handled by smoothing over rank position instead.
    """
    a = np.asarray(a_values, dtype=float)
    Q = np.asarray(Q_values, dtype=float)
    if a.shape != Q.shape or a.ndim != 1:
        raise ValidationError("a_values and Q_values must be 1-d and of equal length")
    if a.size < 4:
        raise ValidationError(f"smoothing needs at least 4 points, got {a.size}")
    if np.any(np.diff(a) < 0):
        raise ValidationError("a_values must be sorted ascending")
    if lam == 0:
        return Q.copy()
    x = a if np.all(np.diff(a) > 0) else np.arange(a.size, dtype=float)
    if np.ptp(Q) == 0:
        return Q.copy()
    try:
        # rescale x for conditioning; GCV is invariant to this
        xs = (x - x[0]) / (x[-1] - x[0])
        if a.size < 5:
            spl = interpolate.make_smoothing_spline(xs, Q, lam=lam if lam is not None else 1e-6)
        else:
            spl = interpolate.make_smoothing_spline(xs, Q, lam=lam)
        out = spl(xs)
        if not np.all(np.isfinite(out)):
            raise np.linalg.LinAlgError("non-finite spline")
        return out
    except (np.linalg.LinAlgError, ValueError):
        return _moving_average(Q)
