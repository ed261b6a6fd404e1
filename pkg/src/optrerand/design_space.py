"""Candidate assignment pools.

Assignments are stored as rows of an ``int8`` matrix with entries in
``{-1, +1}`` and zero row sums (forced balance). A pool is immutable once
built; every helper here returns a new pool.
"""

from dataclasses import dataclass, field
from itertools import combinations
from math import comb

import numpy as np

from ._parallel import chunk_bounds, chunk_rng
from .errors import (
    CapacityError,
    EmptyPoolError,
    InvalidDimensionError,
    SchemaError,
    ValidationError,
)

ENUMERATION_CAP = 16
SAMPLE_CHUNK = 1024
# stream index offsets so greedy starts never reuse BCRD draws
_GREEDY_STREAM = 1 << 40


def _freeze(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class AssignmentPool:
    """Ordered collection of balanced +/-1 assignment vectors.

    ``origin`` tags every row with how it was produced (``"bcrd"``,
    ``"greedy"``, ``"enumerated"`` or ``"mirror"``) so that downstream
    traces can tell augmented vectors apart.
    """

    assignments: np.ndarray
    n: int
    seed: int | None = None
    mirror_closed: bool = False
    generator: str = "bcrd"
    origin: np.ndarray = field(default=None)

    def __post_init__(self):
        W = np.asarray(self.assignments, dtype=np.int8)
        if W.ndim == 1 and W.size == 0:
            W = W.reshape(0, self.n)
        if W.ndim != 2 or W.shape[1] != self.n:
            raise InvalidDimensionError(
                f"assignments must be an S x {self.n} matrix, got shape {W.shape}"
            )
        origin = self.origin
        if origin is None:
            origin = np.full(W.shape[0], self.generator.split("+")[0], dtype="<U10")
        origin = np.asarray(origin, dtype="<U10")
        if origin.shape != (W.shape[0],):
            raise ValidationError("origin tags must align with assignment rows")
        object.__setattr__(self, "assignments", _freeze(W))
        object.__setattr__(self, "origin", _freeze(origin))

    def __len__(self):
        return self.assignments.shape[0]

    def __iter__(self):
        return iter(self.assignments)

    def __getitem__(self, i):
        return self.assignments[i]

    @property
    def S(self):
        return len(self)

    def keys(self):
        return [row.tobytes() for row in self.assignments]

    def index_of(self, w):
        """Row index of ``w`` in the pool, or ``None``."""
        key = np.asarray(w, dtype=np.int8).tobytes()
        for i, k in enumerate(self.keys()):
            if k == key:
                return i
        return None

    def validate(self):
        check_assignments(self.assignments, self.n)
        if self.mirror_closed:
            keys = set(self.keys())
            for row in self.assignments:
                if (-row).tobytes() not in keys:
                    raise ValidationError("pool flagged mirror-closed but -w is missing")
        if len(set(self.keys())) != len(self):
            raise ValidationError("pool contains duplicate assignments")
        return self


def check_assignments(W, n=None):
    """Raise unless every row is a balanced +/-1 vector."""
    W = np.atleast_2d(np.asarray(W))
    if n is not None and W.shape[1] != n:
        raise InvalidDimensionError(f"expected assignments of length {n}, got {W.shape[1]}")
    if not np.all((W == 1) | (W == -1)):
        raise ValidationError("assignment entries must be -1 or +1")
    bad = np.flatnonzero(W.sum(axis=1) != 0)
    if bad.size:
        raise ValidationError(f"assignment rows {bad[:5].tolist()} are not forced-balance")


def _check_n(n):
    if int(n) != n or n < 2 or n % 2:
        raise InvalidDimensionError(f"n must be an even integer >= 2, got {n}")
    return int(n)


def dedup(W, origin=None):
    """Drop repeated rows, keeping first occurrences in order."""
    seen = set()
    keep = []
    for i, row in enumerate(W):
        k = row.tobytes()
        if k not in seen:
            seen.add(k)
            keep.append(i)
    keep = np.asarray(keep, dtype=np.intp)
    if origin is None:
        return W[keep]
    return W[keep], np.asarray(origin)[keep]


def _bcrd_block(n, k, rng):
    base = np.empty(n, dtype=np.int8)
    base[: n // 2] = 1
    base[n // 2 :] = -1
    return rng.permuted(np.tile(base, (k, 1)), axis=1)


def bcrd_draws(n, S, seed, stream_offset=0):
    """``S`` balanced vectors; chunk ``c`` always comes from ``(seed, c)``."""
    blocks = [
        _bcrd_block(n, hi - lo, chunk_rng(seed, stream_offset + c))
        for c, (lo, hi) in enumerate(chunk_bounds(S, SAMPLE_CHUNK))
    ]
    return np.vstack(blocks) if blocks else np.empty((0, n), dtype=np.int8)


def sample_bcrd(n, S, seed):
    """Draw ``S`` assignments uniformly from all balanced vectors, then dedup.

    The result is deterministic in ``seed`` and may hold fewer than ``S``
    rows when draws collide (for tiny ``n``).
    """
    n = _check_n(n)
    if S < 1:
        raise EmptyPoolError("pool size S must be at least 1")
    W = dedup(bcrd_draws(n, int(S), seed))
    return AssignmentPool(W, n=n, seed=seed, mirror_closed=False, generator="bcrd")


def enumerate_balanced(n, cap=ENUMERATION_CAP):
    """All C(n, n/2) balanced assignments (desk-scale oracle)."""
    n = _check_n(n)
    if n > cap:
        raise CapacityError(
            f"enumeration of n={n} would produce {comb(n, n // 2)} vectors; cap is n<={cap}"
        )
    W = np.full((comb(n, n // 2), n), -1, dtype=np.int8)
    for r, treated in enumerate(combinations(range(n), n // 2)):
        W[r, list(treated)] = 1
    return AssignmentPool(W, n=n, seed=None, mirror_closed=True, generator="enumerated")


def is_mirror_closed(pool):
    keys = set(pool.keys())
    return all((-row).tobytes() in keys for row in pool.assignments)


def mirror_close(pool):
    """Add ``-w`` for every ``w`` and drop duplicates.

    A pool that is already closed comes back unchanged. Otherwise each new
    mirror image is placed right after its partner.
    """
    if len(pool) == 0 or pool.mirror_closed or is_mirror_closed(pool):
        return AssignmentPool(
            pool.assignments, n=pool.n, seed=pool.seed, mirror_closed=True,
            generator=pool.generator, origin=pool.origin,
        )
    seen = set()
    rows, tags = [], []
    for row, tag in zip(pool.assignments, pool.origin):
        for cand, t in ((row, tag), (-row, "mirror")):
            k = cand.tobytes()
            if k not in seen:
                seen.add(k)
                rows.append(cand)
                tags.append(t)
    return AssignmentPool(
        np.vstack(rows), n=pool.n, seed=pool.seed, mirror_closed=True,
        generator=pool.generator, origin=np.asarray(tags),
    )


def design_pool(n, S, seed):
    """Mirror-closed pool of about ``S`` assignments for a design run.

    Enumerates every balanced vector when there are no more than ``S`` of
    them (and ``n`` is within the enumeration cap); otherwise samples
    ``ceil(S / 2)`` vectors and adds their mirrors.
    """
    n = _check_n(n)
    if n <= ENUMERATION_CAP and comb(n, n // 2) <= S:
        return enumerate_balanced(n)
    return mirror_close(sample_bcrd(n, -(-int(S) // 2), seed))


def greedy_pair_switch(X, w, metric=None, max_iter=None, return_path=False):
    """Pair-switching descent on imbalance.

    Each step swaps the treated/control pair (i, j) giving the largest drop
    in imbalance; ties go to the lexicographically first (i, j). Stops at
    a local optimum or after ``max_iter`` swaps (default ``n**2``).
    """
    from .balance import BalanceMetric, quadratic_form_matrix

    metric = metric or BalanceMetric()
    w = np.asarray(w, dtype=np.int8).copy()
    n = w.size
    check_assignments(w, n)
    A = quadratic_form_matrix(X, metric)
    diag = np.diag(A)
    max_iter = n * n if max_iter is None else max_iter
    wf = w.astype(float)
    value = wf @ A @ wf / n
    path = [value]
    tol = 1e-12 * max(1.0, abs(value))
    for _ in range(max_iter):
        Aw = A @ wf
        t = np.flatnonzero(w == 1)
        c = np.flatnonzero(w == -1)
        # w' = w - 2 e_i + 2 e_j  =>  change in w'Aw' for i treated, j control
        delta = 4.0 * (
            Aw[c][None, :] - Aw[t][:, None]
            + diag[t][:, None] + diag[c][None, :] - 2.0 * A[np.ix_(t, c)]
        ) / n
        k = int(np.argmin(delta))
        best = delta.flat[k]
        if not best < -tol:
            break
        i, j = t[k // c.size], c[k % c.size]
        w[i], w[j] = -1, 1
        wf[i], wf[j] = -1.0, 1.0
        value = wf @ A @ wf / n
        path.append(value)
    if return_path:
        return w, np.asarray(path)
    return w


def augment_greedy(pool, X, metric=None, count=0, seed=None):
    """Append ``count`` greedy-refined BCRD vectors tagged ``"greedy"``."""
    if count <= 0:
        return pool
    seed = pool.seed if seed is None else seed
    starts = bcrd_draws(pool.n, count, seed if seed is not None else 0, _GREEDY_STREAM)
    refined = np.vstack([greedy_pair_switch(X, w0, metric) for w0 in starts])
    W = np.vstack([pool.assignments, refined])
    origin = np.concatenate([pool.origin, np.full(count, "greedy")])
    W, origin = dedup(W, origin)
    out = AssignmentPool(
        W, n=pool.n, seed=pool.seed, mirror_closed=False,
        generator=pool.generator.split("+")[0] + "+greedy", origin=origin,
    )
    return mirror_close(out) if pool.mirror_closed else out


# ---------------------------------------------------------------- line format

def encode_assignment(w):
    return "".join("+" if v > 0 else "-" for v in w)


def decode_assignment(line, n=None):
    """Parse a '+'/'-' line; the Unicode minus sign is accepted too.

    Balance is not checked here (see :func:`check_assignments`).
    """
    line = line.strip().replace("\u2212", "-")
    if not line or any(ch not in "+-" for ch in line):
        raise SchemaError(f"bad assignment line {line!r}: only '+' and '-' are allowed")
    w = np.fromiter((1 if ch == "+" else -1 for ch in line), dtype=np.int8, count=len(line))
    if n is not None and w.size != n:
        raise SchemaError(f"assignment line has length {w.size}, expected n={n}")
    return w


def pool_to_text(pool):
    seed = "none" if pool.seed is None else pool.seed
    lines = [f"n={pool.n} S={len(pool)} seed={seed}"]
    lines += [encode_assignment(w) for w in pool.assignments]
    return "\n".join(lines) + "\n"


def pool_from_text(text, generator="bcrd"):
    lines = text.splitlines()
    if not lines:
        raise SchemaError("empty pool file")
    try:
        header = dict(tok.split("=", 1) for tok in lines[0].split())
        n, S = int(header["n"]), int(header["S"])
        seed = None if header["seed"] == "none" else int(header["seed"])
    except (ValueError, KeyError) as exc:
        raise SchemaError(f"bad pool header {lines[0]!r}") from exc
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != S:
        raise SchemaError(f"header declares S={S} but file holds {len(body)} assignments")
    W = np.vstack([decode_assignment(ln, n) for ln in body]) if body else np.empty((0, n))
    check_assignments(W, n)
    pool = AssignmentPool(W, n=n, seed=seed, generator=generator)
    return AssignmentPool(
        pool.assignments, n=n, seed=seed, mirror_closed=is_mirror_closed(pool),
        generator=generator,
    )


def write_pool(pool, path):
    with open(path, "w", newline="\n") as fh:
        fh.write(pool_to_text(pool))


def read_pool(path):
    with open(path) as fh:
        return pool_from_text(fh.read())
