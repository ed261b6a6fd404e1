"""Command-line front end.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""

import argparse
import dataclasses
import json
import sys
import warnings

import numpy as np

from . import simulation
from .balance import BalanceMetric, imbalances
from .design_space import AssignmentPool, design_pool, encode_assignment, is_mirror_closed
from .errors import NumericalError, ParameterError, RerandError, ValidationError
from .inference import ExperimentRecord, confidence_interval, estimate_dm, randomization_test
from .io import DesignArtifact, ingest_covariates, load_design, read_assignment, read_vector, save_design
from .moments import moments_of, projection_cache
from .optimizer import SearchMode, optimize, sweep_trace_export
from .tail import TailSpec, ZSampler, draw_z, evaluate_tail

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


def _tail_from_args(a):
    return TailSpec(
        q=a.q, strategy=a.tail, sampler=ZSampler.parse(a.z_dist), n_z=a.Nz,
        smoothing=not a.no_smoothing, kappa=a.kappa, seed=a.seed,
    )


def _tail_from_config(d):
    return TailSpec(
        q=d["q"], strategy=d["strategy"], sampler=ZSampler.parse(d["z_dist"]), n_z=d["n_z"],
        smoothing=d["smoothing"], kappa=d["kappa"], seed=d["seed"],
    )


def cmd_design(a):
    table = ingest_covariates(a.x, has_header=a.header)
    metric = BalanceMetric.parse(a.metric)
    tail = _tail_from_args(a)
    mode = SearchMode.parse(a.mode)
    pool = design_pool(table.n, a.S, a.seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = optimize(table.standardized, pool, metric, tail, mode, workers=a.workers)
    for w in caught:
        print(f"design: warning: {w.message}", file=sys.stderr)
    art = DesignArtifact(res, column_names=table.names, seed=a.seed,
                         extra={"source": table.source, "S_requested": a.S})
    text = save_design(art, a.out)
    if a.out is None:
        sys.stdout.write(text)
    if a.trace:
        sweep_trace_export(res, a.trace)
    print(f"s_star={res.s_star} a_star={res.a_star!r} Q_star={res.Q_star!r} pool={len(pool)}",
          file=sys.stderr)
    return EXIT_OK


def cmd_assign(a):
    W = load_design(a.design).result.W_star
    i = int(np.random.default_rng(a.seed).integers(len(W)))
    print(encode_assignment(W[i]))
    return EXIT_OK


def cmd_test(a):
    design = load_design(a.design).result
    y = read_vector(a.y)
    w = read_assignment(a.w, design.n)
    if y.shape[0] != design.n:
        raise ValidationError(f"test: {a.y} has {y.shape[0]} responses, design has n={design.n}")
    rec = ExperimentRecord(w, y, a.estimator)
    res = randomization_test(design, rec, R=a.R, alpha=a.alpha, seed=a.seed,
                             region=a.region, workers=a.workers)
    out = {
        "estimator": a.estimator, "estimate": res.estimate, "p_value": res.p_value,
        "R_used": res.R_used, "alpha": a.alpha, "reject": res.reject,
    }
    if a.ci:
        lo, hi = confidence_interval(design, rec, R=a.R, alpha=a.alpha, seed=a.seed, workers=a.workers)
        out["ci"] = [lo, hi]
    print(json.dumps(out, indent=1))
    return EXIT_OK


def cmd_simulate(a):
    if a.config:
        cfg = simulation.SimConfig.from_json(a.config)
    elif a.paper_scale:
        cfg = simulation.SimConfig.paper_scale()
    else:
        cfg = simulation.SimConfig()
    if a.seed is not None:
        cfg = simulation.with_seed(cfg, a.seed)
    if a.workers is not None:
        cfg = dataclasses.replace(cfg, workers=a.workers)
    if a.study == "strategy-comparison":
        out = simulation.run_strategy_comparison(cfg)
    elif a.study == "tail-agreement":
        out = simulation.run_tail_strategy_agreement(cfg)
    else:
        p_list = [int(p) for p in a.p_list.split(",")]
        out = simulation.run_threshold_vs_p(cfg, p_list)
    for path in out.write(a.out_dir):
        print(path)
    return EXIT_OK


def validate_design(design, rtol=1e-9):
    """Re-derive the invariants a saved design must satisfy.

    Returns a list of ``(name, ok, detail)`` tuples.
    """
    W = design.W_star
    n = design.n
    checks = []

    def add(name, ok, detail=""):
        checks.append((name, bool(ok), detail))

    add("forced_balance", np.all(W.sum(axis=1) == 0))
    add("distinct", len({row.tobytes() for row in W}) == len(W))
    pool = AssignmentPool(W, n=n)
    add("mirror_closed", is_mirror_closed(pool))
    Wf = W.astype(float)
    Sigma = Wf.T @ Wf / len(W)
    add("diag_sigma_one", np.all(np.diag(Sigma) == 1.0))
    add("sigma_rows_zero", np.all(np.abs(Sigma.sum(axis=1)) <= 1e-12 * n))
    rng = np.random.default_rng(0)
    v = design.X @ rng.standard_normal(design.X.shape[1]) + rng.standard_normal(n)
    add("dm_mirror_unbiased", abs(np.mean(estimate_dm(np.tile(v, (len(W), 1)), W))) <= 1e-12 * np.abs(v).max())
    metric = BalanceMetric.parse(design.config.get("metric", "mahalanobis"))
    imb = imbalances(design.X, W, metric)
    add("threshold_matches", abs(imb.max() - design.a_star) <= rtol * max(1.0, design.a_star),
        f"max imbalance {imb.max()!r} vs a_star {design.a_star!r}")
    add("trace_a_sorted", np.all(np.diff(design.trace_a) >= 0))
    add("s_star_in_trace", design.s_star in set(design.trace_s.tolist()))
    tail_cfg = design.config.get("tail")
    if tail_cfg and design.s_star in set(design.trace_s.tolist()):
        tail = _tail_from_config(tail_cfg)
        cache = projection_cache(design.X)
        draws = draw_z(tail.sampler, n, tail.n_z, tail.seed) if tail.strategy == "exact" else None
        q = float(evaluate_tail(moments_of(W, cache), cache, tail, draws=draws))
        i = int(np.flatnonzero(design.trace_s == design.s_star)[0])
        ref = design.trace_Q[i]
        add("criterion_recomputed", abs(q - ref) <= 1e-9 * abs(ref), f"{q!r} vs {ref!r}")
    return checks


def cmd_validate(a):
    checks = validate_design(load_design(a.design).result)
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}" + (f" ({detail})" if detail and not ok else ""))
    bad = [c for c in checks if not c[1]]
    if bad:
        raise ValidationError(f"validate: {len(bad)} invariant(s) failed in {a.design}")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="optrerand", description="Optimal rerandomization designs.")
    sub = ap.add_subparsers(dest="command", required=True)

    d = sub.add_parser("design", help="search the optimal threshold for a covariate table")
    d.add_argument("--x", required=True, help="covariate CSV (n rows, p columns)")
    d.add_argument("--header", action=argparse.BooleanOptionalAction, default=None,
                   help="force header detection on or off")
    d.add_argument("--S", type=int, default=2000, help="pool size")
    d.add_argument("--metric", default="mahalanobis")
    d.add_argument("--q", type=float, default=0.95)
    d.add_argument("--tail", choices=("exact", "normal", "approx"), default="normal")
    d.add_argument("--kappa", type=float, default=0.0)
    d.add_argument("--z-dist", default="gaussian")
    d.add_argument("--Nz", type=int, default=1000)
    d.add_argument("--no-smoothing", action="store_true")
    d.add_argument("--mode", default="grid:64")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", help="artifact path (stdout when omitted)")
    d.add_argument("--trace", help="also write the criterion trace as CSV")
    d.set_defaults(func=cmd_design)

    s = sub.add_parser("assign", help="draw the experimental assignment from a design")
    s.add_argument("--design", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.set_defaults(func=cmd_assign)

    t = sub.add_parser("test", help="randomization test (and optional CI) for a run experiment")
    t.add_argument("--design", required=True)
    t.add_argument("--y", required=True, help="responses, one per line")
    t.add_argument("--w", required=True, help="the assignment line used")
    t.add_argument("--estimator", choices=("lr", "dm"), default="lr")
    t.add_argument("--R", type=int, default=10000)
    t.add_argument("--alpha", type=float, default=0.05)
    t.add_argument("--region", choices=("abs", "quantile"), default="abs")
    t.add_argument("--ci", action="store_true")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_test)

    m = sub.add_parser("simulate", help="run a simulation study and write CSV tables")
    m.add_argument("study", choices=("strategy-comparison", "tail-agreement", "threshold-vs-p"))
    m.add_argument("--config", help="JSON file of SimConfig fields")
    m.add_argument("--paper-scale", action="store_true")
    m.add_argument("--seed", type=int)
    m.add_argument("--p-list", default="1,2,5,10,20")
    m.add_argument("--out-dir", required=True)
    m.set_defaults(func=cmd_simulate)

    v = sub.add_parser("validate", help="check the invariants of a saved design")
    v.add_argument("--design", required=True)
    v.set_defaults(func=cmd_validate)

    for p in (d, t, m):
        p.add_argument("--workers", type=int, help="thread count (RERAND_THREADS caps it)")
    return ap


def main(argv=None):
    ap = build_parser()
    a = ap.parse_args(argv)
    try:
        return a.func(a)
    except NumericalError as exc:
        print(f"optrerand {a.command}: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, ParameterError, OSError, KeyError) as exc:
        print(f"optrerand {a.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except RerandError as exc:
        print(f"optrerand {a.command}: error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(exc.__cause__, NumericalError) else EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
