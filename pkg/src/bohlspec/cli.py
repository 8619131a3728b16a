"""Command-line front end.

Configuration is a plain ``key = value`` file.  System keys (``name``,
``sequence``, ``horizon_segments``, ``gaps`` and the example parameters)
select a catalog system; ``matrix = -1, 0; 0, 2`` describes an autonomous
system inline.  Run keys such as ``seed`` or ``radii`` tune the computation.
Command-line flags override the file.  Every report embeds the resolved
configuration and the package version, and contains nothing run-dependent,
so identical inputs give identical files.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .exponents import bohl_interval, default_grid, lyapunov_exponents
from .nonlinear import (
    NonlinearSystem,
    prop52_nonlinear,
    sec6_nonlinear,
    simulate,
    stability_probe,
    x1_squared,
)
from .spectrum import (
    PreconditionError,
    SpectrumEstimate,
    WitnessError,
    bohl_spectrum,
    coincidence_check,
    interval_witness,
    merge_intervals,
    sacker_sell,
    subset_check,
    sweep_directions,
)
from .system import (
    DEFAULTS,
    EXAMPLE_NAMES,
    SEC6_NONLINEAR,
    ConfigError,
    ExampleSpec,
    ParameterError,
    build_example,
    constant_system,
    example_from_config,
    parse_config,
    scale_shift,
)

EXIT_OK, EXIT_CONFIG, EXIT_NOT_CONVERGED, EXIT_UNSTABLE = 0, 1, 2, 3
EXIT_CHECK_FAILED = 4

RUN_KEYS = (
    "seed", "norm", "n_directions", "radii", "horizon", "nonlinear", "n_probes",
    "blowup_threshold", "tol", "matrix", "gap", "gamma", "b", "examples",
)
NORMS = ("euclidean", "max")

# the catalog the property suites run over: (label, example name, parameters)
CATALOG = (
    ("prop52", "prop52", {}),
    ("diag_pm1", "diag_pm1", {}),
    ("remark59", "remark59", {}),
    ("eps_perturbed(0.1)", "eps_perturbed", {"eps": 0.1}),
    ("eps_perturbed(0.2)", "eps_perturbed", {"eps": 0.2}),
    ("eps_perturbed(0.5)", "eps_perturbed", {"eps": 0.5}),
    ("sec6", "sec6", {}),
    ("product3d", "product3d", {}),
    ("constant", "constant", {}),
)
# diagonal members and bounded integrally separated ones
COINCIDENCE = (
    ("diag_pm1", "diag_pm1", {}),
    ("constant", "constant", {}),
    ("constant(a12=1)", "constant", {"a12": 1.0}),
)
COVARIANCE = (("prop52", "prop52", {}), ("diag_pm1", "diag_pm1", {}))


# ---------------------------------------------------------------------------
# configuration


def _parse_matrix(text: str) -> np.ndarray:
    try:
        rows = [[float(v) for v in r.split(",")] for r in text.split(";")]
    except ValueError:
        raise ConfigError(f"bad matrix {text!r}") from None
    if any(len(r) != len(rows) for r in rows):
        raise ConfigError("matrix must be square (rows separated by ';')")
    return np.array(rows)


def _floats(text: str, key: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"{key} must be a comma-separated list of numbers") from None


def _number(cfg, key, kind=float):
    try:
        return kind(cfg[key])
    except ValueError:
        raise ConfigError(f"{key} must be {'an integer' if kind is int else 'a number'}") from None


def resolve_config(args) -> dict[str, str]:
    """Merge the config file, ``--example`` and the flags into one mapping."""
    cfg: dict[str, str] = {}
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {args.config}: {exc.strerror}") from None
        cfg.update(parse_config(text))
    if getattr(args, "example", None):
        cfg["name"] = args.example
    if args.seed is not None:
        cfg["seed"] = str(args.seed)
    if args.norm is not None:
        cfg["norm"] = args.norm
    if args.horizon_segments is not None:
        cfg["horizon_segments"] = str(args.horizon_segments)
    cfg.setdefault("seed", "0")
    cfg.setdefault("norm", "euclidean")
    if cfg["norm"] not in NORMS:
        raise ConfigError(f"norm must be one of {', '.join(NORMS)}")
    _number(cfg, "seed", int)
    return dict(sorted(cfg.items()))


def system_from_config(cfg: dict[str, str]):
    if "matrix" in cfg:
        m = _parse_matrix(cfg["matrix"])
        n = _number(cfg, "horizon_segments", int) if "horizon_segments" in cfg else 20
        gap = _number(cfg, "gap") if "gap" in cfg else 10.0
        return constant_system(m, n, gap, cfg.get("name", "inline"))
    spec = example_from_config(cfg, exclude=RUN_KEYS)
    try:
        return build_example(spec)
    except ParameterError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# output


def _report(cfg, kind: str, body: dict) -> dict:
    return {"tool": "bohlspec", "version": __version__, "command": kind, "config": cfg, **body}


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _ladder_rows(est: SpectrumEstimate):
    for label, e in est.samples:
        if e.stats is None:
            continue
        tag = label if isinstance(label, int) else " ".join(f"{v:.12g}" for v in label)
        for L, lo, hi in e.stats.rows():
            yield [tag, repr(float(L)), repr(float(lo)), repr(float(hi))]


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _interval_rows(est: SpectrumEstimate):
    return [[repr(iv.lo), repr(iv.hi), repr(iv.lo_margin), repr(iv.hi_margin)] for iv in est.intervals]


def _summary(est: SpectrumEstimate) -> str:
    parts = [f"[{iv.lo:.4f}, {iv.hi:.4f}]" for iv in est.intervals]
    if est.minus_inf_flag:
        parts.insert(0, "(-inf ...")
    if est.plus_inf_flag:
        parts.append("... +inf)")
    return " U ".join(parts) or "(empty)"


# ---------------------------------------------------------------------------
# spectrum


def _lyapunov(sys_, cfg):
    d = sys_.dimension
    n = _number(cfg, "n_directions", int) if "n_directions" in cfg else 8 * d
    X = np.eye(1) if d == 1 else sweep_directions(d, max(n, d), int(cfg["seed"]))
    rows, items = [], []
    for x in X:
        lo, hi = lyapunov_exponents(sys_, x)
        rows.append({"direction": x.tolist(), "chi_minus": lo, "chi_plus": hi})
        items.append((lo, hi, 0.0))
    ivs = merge_intervals(items, 0.02)
    est = SpectrumEstimate(tuple(ivs), "lyapunov_sweep")
    return est, rows


def cmd_spectrum(args) -> int:
    cfg = resolve_config(args)
    if args.dry_run:
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return EXIT_OK
    sys_ = system_from_config(cfg)
    out = Path(args.out)
    seed, norm = int(cfg["seed"]), cfg["norm"]
    body: dict = {"system": sys_.name, "dimension": sys_.dimension}
    stem = f"{args.kind}_{sys_.name}"
    if args.kind == "bohl":
        nd = _number(cfg, "n_directions", int) if "n_directions" in cfg else None
        est, filt = bohl_spectrum(sys_, nd, seed=seed, norm=norm)
        body.update(spectrum=est.to_dict(), filtration=filt.to_dict())
    elif args.kind == "sacker-sell":
        try:
            est = sacker_sell(sys_)
        except PreconditionError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        body.update(spectrum=est.to_dict())
    else:
        est, rows = _lyapunov(sys_, cfg)
        body.update(spectrum=est.to_dict(), exponents=rows)
        _write_csv(out / f"{stem}_exponents.csv", ["direction", "chi_minus", "chi_plus"],
                   [[" ".join(f"{v:.12g}" for v in r["direction"]), repr(r["chi_minus"]), repr(r["chi_plus"])]
                    for r in rows])
    _write_json(out / f"{stem}.json", _report(cfg, f"spectrum {args.kind}", body))
    _write_csv(out / f"{stem}_intervals.csv", ["lo", "hi", "lo_margin", "hi_margin"], _interval_rows(est))
    ladder = list(_ladder_rows(est))
    if ladder:
        _write_csv(out / f"{stem}_ladder.csv", ["sample", "length", "min_rate", "max_rate"], ladder)
    print(f"{args.kind} spectrum of {sys_.name}: {_summary(est)}")
    for n in est.notes:
        print(f"  note: {n}")
    return EXIT_OK if est.converged else EXIT_NOT_CONVERGED


# ---------------------------------------------------------------------------
# property suites (module-level so they can run in worker processes)


def _build(name, params, cfg_hs):
    return build_example(ExampleSpec(name, dict(params), None, cfg_hs))


def _suite_subset(item, tol, seed, hs):
    label, name, params = item
    s = _build(name, params, hs)
    bohl, bf = bohl_spectrum(s, seed=seed)
    ss = sacker_sell(s)
    rep = subset_check(bohl, ss, tol)
    return label, rep.passed, {"bohl": bohl.to_dict(), "sacker_sell": ss.to_dict(), "check": rep.to_dict()}


def _suite_coincidence(item, tol, seed, hs):
    label, name, params = item
    s = _build(name, params, hs)
    bohl, _ = bohl_spectrum(s, seed=seed)
    ss = sacker_sell(s)
    rep = coincidence_check(bohl, ss, tol)
    return label, rep.passed, {"bohl": bohl.to_dict(), "sacker_sell": ss.to_dict(), "check": rep.to_dict()}


def _suite_covariance(item, tol, seed, hs, gamma=0.5, b=0.25):
    label, name, params = item
    s = _build(name, params, hs)
    t = scale_shift(s, gamma, b)
    b0, _ = bohl_spectrum(s, seed=seed)
    b1, _ = bohl_spectrum(t, seed=seed)
    s0, s1 = sacker_sell(s), sacker_sell(t)
    r1 = coincidence_check(b1, b0.affine(gamma, b), tol)
    r2 = coincidence_check(s1, s0.affine(gamma, b), tol)
    detail = {
        "bohl": b1.to_dict(), "bohl_expected": b0.affine(gamma, b).to_dict(),
        "sacker_sell": s1.to_dict(), "sacker_sell_expected": s0.affine(gamma, b).to_dict(),
        "gamma": gamma, "b": b,
    }
    return f"{label} (gamma={gamma:g}, b={b:g})", r1.passed and r2.passed, detail


def _suite_filtration(item, tol, seed, hs):
    """Nested Bohl filtration, each layer inside the leading components, and a
    witness direction for every Sacker-Sell interval."""
    label, name, params = item
    s = _build(name, params, hs)
    grid = default_grid(s)
    bohl, filt = bohl_spectrum(s, seed=seed, grid=grid)
    entries = []
    dims = filt.dims
    entries.append(("dimensions increase to d", list(dims) == sorted(set(dims)) and dims[-1] == s.dimension))
    for k, S in enumerate(filt.subspaces):
        hi = bohl.intervals[min(k, len(bohl) - 1)].hi
        x = S @ np.ones(S.shape[1])
        e = bohl_interval(s, x / np.linalg.norm(x), grid)
        entries.append((f"layer {k + 1} (dim {S.shape[1]}) grows at most like {hi:.4g}", e.upper <= hi + tol + e.margin))
    ss = sacker_sell(s, grid)
    for k in range(len(ss) if not (ss.minus_inf_flag or ss.plus_inf_flag) else 0):
        try:
            interval_witness(s, ss, k, tol, grid, seed=seed)
            entries.append((f"witness for Sacker-Sell interval {k + 1}", True))
        except WitnessError:
            entries.append((f"witness for Sacker-Sell interval {k + 1}", False))
    passed = all(p for _, p in entries)
    return label, passed, {"filtration": filt.to_dict(), "entries": [{"check": c, "passed": p} for c, p in entries]}


SUITES = {
    "subset": (_suite_subset, CATALOG),
    "coincidence": (_suite_coincidence, COINCIDENCE),
    "covariance": (_suite_covariance, COVARIANCE),
    "filtration": (_suite_filtration, CATALOG),
}


def cmd_check(args) -> int:
    cfg = resolve_config(args)
    func, items = SUITES[args.suite]
    if "examples" in cfg:
        wanted = [w.strip() for w in cfg["examples"].split(",")]
        unknown = [w for w in wanted if w not in {lab for lab, *_ in items}]
        if unknown:
            raise ConfigError(f"unknown suite members: {', '.join(unknown)}")
        items = tuple(it for it in items if it[0] in wanted)
    elif "name" in cfg:
        params = {k: float(v) for k, v in cfg.items() if k in DEFAULTS.get(cfg["name"], ({},))[0]}
        items = ((cfg["name"], cfg["name"], params),)
    if args.dry_run:
        print(json.dumps({**cfg, "suite": args.suite, "members": [it[0] for it in items]}, indent=2, sort_keys=True))
        return EXIT_OK
    tol = _number(cfg, "tol") if "tol" in cfg else 0.05
    seed = int(cfg["seed"])
    hs = int(cfg["horizon_segments"]) if "horizon_segments" in cfg else None
    extra = {}
    if args.suite == "covariance":
        extra = {"gamma": _number(cfg, "gamma") if "gamma" in cfg else 0.5, "b": _number(cfg, "b") if "b" in cfg else 0.25}
    jobs = max(1, args.jobs)
    if jobs == 1:
        results = [func(it, tol, seed, hs, **extra) for it in items]
    else:
        with ProcessPoolExecutor(jobs) as ex:
            futs = [ex.submit(func, it, tol, seed, hs, **extra) for it in items]
            results = [f.result() for f in futs]  # submission order keeps output stable
    ok = all(p for _, p, _ in results)
    for label, p, _ in results:
        print(f"{'PASS' if p else 'FAIL'}  {args.suite}: {label}")
    body = {"suite": args.suite, "passed": ok, "tol": tol,
            "results": [{"system": lab, "passed": p, "detail": det} for lab, p, det in results]}
    _write_json(Path(args.out) / f"check_{args.suite}.json", _report(cfg, f"check {args.suite}", body))
    return EXIT_OK if ok else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------
# simulate


def nonlinear_from_config(cfg) -> NonlinearSystem:
    kind = cfg.get("nonlinear", "x1_squared")
    if kind not in ("x1_squared", "zero"):
        raise ConfigError("nonlinear must be 'x1_squared' or 'zero'")
    name = cfg.get("name")
    hs = int(cfg["horizon_segments"]) if "horizon_segments" in cfg else None
    custom = any(k in cfg for k in ("sequence", "gaps"))
    if name == "sec6" and kind == "x1_squared" and not custom:
        params = {k: _number(cfg, k) for k in SEC6_NONLINEAR if k in cfg}
        try:
            return sec6_nonlinear({**SEC6_NONLINEAR, **params}, hs or 13)
        except ParameterError as exc:
            raise ConfigError(str(exc)) from None
    if name == "prop52" and kind == "x1_squared" and not custom:
        return prop52_nonlinear(_number(cfg, "delta") if "delta" in cfg else 1.0, hs or 15)
    lin = system_from_config(cfg)
    d = lin.dimension
    if kind == "x1_squared" and d < 2:
        raise ConfigError("x1_squared needs dimension >= 2")
    Q = x1_squared(d) if kind == "x1_squared" else np.zeros((d, d, d))
    return NonlinearSystem(lin, L=1.0, q=2.0, delta=1.0, Q=Q, name=f"{lin.name}+{kind}")


def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    cfg.setdefault("radii", "0.01,0.001,0.0001")
    if args.dry_run:
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return EXIT_OK
    nsys = nonlinear_from_config(cfg)
    radii = _floats(cfg["radii"], "radii")
    horizon = _number(cfg, "horizon") if "horizon" in cfg else None
    n_probes = _number(cfg, "n_probes", int) if "n_probes" in cfg else 8
    thr = _number(cfg, "blowup_threshold") if "blowup_threshold" in cfg else 1e6
    try:
        v = stability_probe(nsys, radii, horizon, n_probes, thr, int(cfg["seed"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    stem = f"simulate_{nsys.linear.name}"
    _write_json(out / f"{stem}.json", _report(cfg, "simulate", {"system": nsys.name, "verdict": v.to_dict()}))
    x0 = v.witness_initial if v.witness_initial is not None else radii[0] * np.eye(nsys.linear.dimension)[0]
    tr = simulate(nsys, np.asarray(x0, dtype=float), v.horizon_used, thr)
    tr.to_csv(out / f"{stem}_trajectory.csv")
    line = f"{v.kind} for {nsys.name}"
    if v.kind == "exp_stable_evidence":
        line += f": alpha ~ {v.alpha:.4g}, K ~ {v.K:.4g}"
    elif v.escape_time is not None:
        line += f": escape at t = {v.escape_time:.6g}"
    print(line)
    return {"exp_stable_evidence": EXIT_OK, "unstable_evidence": EXIT_UNSTABLE}.get(v.kind, EXIT_NOT_CONVERGED)


# ---------------------------------------------------------------------------
# examples


def cmd_example(args) -> int:
    if args.action == "list":
        for name in EXAMPLE_NAMES:
            params, kind, n = DEFAULTS[name]
            print(f"{name:15s} sequence={kind:8s} segments={n:<4d} {json.dumps(params, sort_keys=True)}")
        return EXIT_OK
    if args.name is None:
        raise ConfigError("example show needs a name")
    if args.name not in EXAMPLE_NAMES:
        raise ConfigError(f"unknown example {args.name!r}")
    params, kind, n = DEFAULTS[args.name]
    s = build_example(ExampleSpec(args.name))
    lines = [f"name = {args.name}", f"sequence = {kind}", f"horizon_segments = {n}"]
    lines += [f"{k} = {v!r}" for k, v in sorted(params.items())]
    print("\n".join(lines))
    print(f"# dimension {s.dimension}, horizon {s.horizon:.6g}, tags {', '.join(sorted(s.structure_tags)) or '-'}")
    if s.bound is not None and math.isfinite(s.bound):
        print(f"# sup |A(t)| <= {s.bound:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value configuration file")
    common.add_argument("--example", metavar="NAME", help="catalog system (overrides 'name' in the config)")
    common.add_argument("--out", metavar="DIR", default=".", help="output directory (default: .)")
    common.add_argument("--norm", choices=NORMS, help="norm used for window rates")
    common.add_argument("--seed", type=int, help="seed for quasi-random direction samples")
    common.add_argument("--horizon-segments", type=int, metavar="K", help="number of switching segments")
    common.add_argument("--dry-run", action="store_true", help="print the resolved configuration and stop")

    p = argparse.ArgumentParser(prog="bohlspec", description="Bohl, Lyapunov and Sacker-Sell spectra.")
    p.add_argument("--version", action="version", version=f"bohlspec {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("spectrum", parents=[common], help="estimate a spectrum")
    sp.add_argument("kind", choices=("bohl", "sacker-sell", "lyapunov"))
    sp.set_defaults(func=cmd_spectrum)

    cp = sub.add_parser("check", parents=[common], help="run a property suite across the catalog")
    cp.add_argument("suite", choices=tuple(SUITES))
    cp.add_argument("--jobs", type=int, default=1, help="worker processes (default: 1)")
    cp.set_defaults(func=cmd_check)

    mp = sub.add_parser("simulate", parents=[common], help="probe a nonlinear perturbation")
    mp.set_defaults(func=cmd_simulate)

    ep = sub.add_parser("example", parents=[common], help="list or show catalog systems")
    ep.add_argument("action", choices=("list", "show"))
    ep.add_argument("name", nargs="?")
    ep.set_defaults(func=cmd_example)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "example" and args.dry_run:
        print(json.dumps(resolve_config(args), indent=2, sort_keys=True))
        return EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        where = f"{args.config}:{exc.line}: " if exc.line and args.config else ""
        msg = str(exc).split(": ", 1)[1] if exc.line else str(exc)
        print(f"config error: {where}{msg}", file=sys.stderr)
        return EXIT_CONFIG
    except ParameterError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
