"""Covariate ingestion and design artifacts on disk."""

import csv
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .design_space import check_assignments, decode_assignment, encode_assignment
from .errors import InvalidDimensionError, SchemaError, ValidationError
from .optimizer import DesignResult

SCHEMA = "optrerand.design/1"
MISSING = {"", "na", "nan", "null", "none", "?"}


def standardize(X):
    """Center columns and scale to unit sample SD (denominator n - 1).

    Returns ``(Z, mean, sd)``. Constant columns are rejected.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    mean = X.mean(axis=0)
    sd = X.std(axis=0, ddof=1)
    const = np.flatnonzero(~(sd > 0))
    if const.size:
        raise ValidationError(f"constant covariate column(s) {const.tolist()} cannot be standardized")
    Z = (X - mean) / sd
    # second pass removes rounding left by the first
    Z -= Z.mean(axis=0)
    Z /= Z.std(axis=0, ddof=1)
    return Z, mean, sd


@dataclass(frozen=True, eq=False)
class CovariateTable:
    raw: np.ndarray
    names: tuple
    standardized: np.ndarray
    source: str | None = None

    @property
    def n(self):
        return self.raw.shape[0]

    @property
    def p(self):
        return self.raw.shape[1]


def _is_number(text):
    try:
        float(text)
        return True
    except ValueError:
        return False


def ingest_covariates(path, has_header=None, delimiter=None):
    """Read a delimited numeric table and standardize its columns.

    ``has_header=None`` treats the first row as a header when any of its
    cells is non-numeric. Errors point at the offending (row, column),
    1-based and counting the header row if present.
    """
    with open(path, newline="") as fh:
        text = fh.read()
    if delimiter is None:
        first = text.split("\n", 1)[0]
        delimiter = next((d for d in (",", "\t", ";") if d in first), ",")
    rows = [r for r in csv.reader(text.splitlines(), delimiter=delimiter) if any(c.strip() for c in r)]
    if not rows:
        raise ValidationError(f"{path}: no data")
    if has_header is None:
        has_header = not all(_is_number(c.strip()) for c in rows[0] if c.strip().lower() not in MISSING)
    offset = 1
    if has_header:
        names = tuple(c.strip() for c in rows[0])
        rows = rows[1:]
        offset = 2
    else:
        names = tuple(f"x{j + 1}" for j in range(len(rows[0])))
    p = len(names)
    X = np.empty((len(rows), p))
    for i, row in enumerate(rows):
        if len(row) != p:
            raise ValidationError(f"{path}: row {i + offset} has {len(row)} cells, expected {p}")
        for j, cell in enumerate(row):
            c = cell.strip()
            if c.lower() in MISSING:
                raise ValidationError(f"{path}: missing value at row {i + offset}, column {j + 1} ({names[j]})")
            try:
                X[i, j] = float(c)
            except ValueError as exc:
                raise ValidationError(
                    f"{path}: non-numeric value {c!r} at row {i + offset}, column {j + 1} ({names[j]})"
                ) from exc
            if not np.isfinite(X[i, j]):
                raise ValidationError(f"{path}: non-finite value at row {i + offset}, column {j + 1}")
    if X.shape[0] % 2:
        raise InvalidDimensionError(f"{path}: n={X.shape[0]} is odd; forced balance needs even n")
    sd = X.std(axis=0, ddof=1) if X.shape[0] > 1 else np.zeros(p)
    const = np.flatnonzero(~(sd > 0))
    if const.size:
        raise ValidationError(f"{path}: constant column(s) {[names[j] for j in const]} rejected")
    Z, _, _ = standardize(X)
    return CovariateTable(raw=X, names=names, standardized=Z, source=str(path))


def read_vector(path):
    """Single numeric column (header optional), e.g. a response file."""
    vals = []
    with open(path) as fh:
        for k, line in enumerate(fh, 1):
            c = line.strip().split(",")[0].strip()
            if not c:
                continue
            try:
                vals.append(float(c))
            except ValueError:
                if k == 1:
                    continue
                raise ValidationError(f"{path}: non-numeric value {c!r} on line {k}")
    return np.asarray(vals)


def read_assignment(path, n=None):
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if len(lines) != 1:
        raise ValidationError(f"{path}: expected exactly one assignment line, got {len(lines)}")
    return decode_assignment(lines[0], n)


@dataclass(frozen=True, eq=False)
class DesignArtifact:
    result: DesignResult
    column_names: tuple = ()
    seed: int | None = None
    created: str | None = None
    schema: str = SCHEMA
    extra: dict = field(default_factory=dict)


def _timestamp():
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return t.strftime("%Y-%m-%dT%H:%M:%SZ")


def _floats(a):
    return None if a is None else [float(v) for v in np.asarray(a).ravel()]


def artifact_to_dict(art):
    r = art.result
    return {
        "schema": art.schema,
        "created": art.created if art.created is not None else _timestamp(),
        "seed": art.seed,
        "config": r.config,
        "n": int(r.n),
        "p": int(r.X.shape[1]),
        "column_names": list(art.column_names),
        "covariates": [[float(v) for v in row] for row in r.X],
        "result": {
            "s_star": int(r.s_star),
            "a_star": float(r.a_star),
            "Q_star": float(r.Q_star),
            "flags": list(r.flags),
        },
        "trace": {
            "s": [int(s) for s in r.trace_s],
            "a": _floats(r.trace_a),
            "Q": _floats(r.trace_Q),
            "Q_smoothed": _floats(r.trace_Q_smoothed),
        },
        "W_star": [encode_assignment(w) for w in r.W_star],
        "extra": art.extra,
    }


def save_design(art, path=None):
    """Serialize to indented JSON; floats use shortest round-trip repr."""
    text = json.dumps(artifact_to_dict(art), indent=1) + "\n"
    if path is not None:
        with open(path, "w", newline="\n") as fh:
            fh.write(text)
    return text


def _require(d, key, where="artifact"):
    if key not in d:
        raise SchemaError(f"{where} is missing field {key!r}")
    return d[key]


def artifact_from_dict(d):
    schema = _require(d, "schema")
    if schema != SCHEMA:
        raise SchemaError(f"unsupported artifact schema {schema!r}; expected {SCHEMA!r}")
    n = int(_require(d, "n"))
    res = _require(d, "result")
    tr = _require(d, "trace")
    lines = _require(d, "W_star")
    W = np.vstack([decode_assignment(ln, n) for ln in lines]) if lines else np.empty((0, n), np.int8)
    check_assignments(W, n)
    X = np.asarray(_require(d, "covariates"), dtype=float)
    if X.ndim != 2 or X.shape[0] != n or X.shape[1] != int(_require(d, "p")):
        raise SchemaError(f"covariates have shape {X.shape}, artifact declares n={n}, p={d['p']}")
    s_star = int(_require(res, "s_star", "result"))
    if W.shape[0] != s_star:
        raise SchemaError(f"W_star holds {W.shape[0]} assignments but s_star={s_star}")
    sm = tr.get("Q_smoothed")
    result = DesignResult(
        s_star=s_star,
        a_star=float(_require(res, "a_star", "result")),
        Q_star=float(_require(res, "Q_star", "result")),
        W_star=W,
        trace_s=np.asarray(_require(tr, "s", "trace"), dtype=int),
        trace_a=np.asarray(_require(tr, "a", "trace"), dtype=float),
        trace_Q=np.asarray(_require(tr, "Q", "trace"), dtype=float),
        trace_Q_smoothed=None if sm is None else np.asarray(sm, dtype=float),
        X=X,
        config=d.get("config", {}),
        flags=tuple(res.get("flags", ())),
    )
    return DesignArtifact(
        result=result, column_names=tuple(d.get("column_names", ())), seed=d.get("seed"),
        created=d.get("created"), schema=schema, extra=d.get("extra", {}),
    )


def load_design(source):
    """Load from a path or from JSON text. Never returns a partial artifact."""
    if isinstance(source, (str, os.PathLike)) and not str(source).lstrip().startswith("{"):
        with open(source) as fh:
            text = fh.read()
    else:
        text = str(source)
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"design artifact is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise SchemaError("design artifact must be a JSON object")
    return artifact_from_dict(d)
