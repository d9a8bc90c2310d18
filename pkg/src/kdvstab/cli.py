"""Command-line driver: ``kdvstab <subcommand> [--config PATH] [options]``.

Subcommands
-----------
gramian        assemble ``Q(lambda)`` (Sylvester, quadrature or both)
simulate       static, dynamic or open-loop linear run
finite-time    staged run over a gain schedule
critical-scan  Gramian conditioning over a range of lengths
diagnose       generator defects, admissibility constant, Lyapunov residuals

Every run writes ``config.resolved.json`` and ``summary.json`` to the output
directory.  Failures write ``error.json`` and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from ._io import write_json
from .closedloop import PROFILES, LoopConfig, decay_report, fit_rate, initial_profile, simulate_dynamic, simulate_static, write_report_csv
from .critical import conditioning_scan, is_critical, uncontrollable_mode_probe, write_scan_csv
from .discretization import build_generator, build_grid
from .errors import ConfigurationError, GuardError, KdvStabError, NearCriticalLengthError
from .finitetime import build_schedule, constant_lambda_baseline, simulate_finite_time, validate_schedule, write_staged_csv
from .gramian import (
    DEFAULT_COND_LIMIT,
    GramianCache,
    assemble_quadrature,
    assemble_sylvester,
    default_cache_dir,
    sylvester_residual,
)
from .propagator import PropagatorConfig, admissibility_constant, propagate, write_trajectory_csv

__all__ = ["RunConfig", "parse_config", "run", "main", "MODES", "COMMANDS"]

MODES = ("static", "dynamic", "finite-time", "linear")
COMMANDS = ("gramian", "simulate", "finite-time", "critical-scan", "diagnose")
CRITICAL_TOL = 1e-6
EXIT_OK, EXIT_ASSERT, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_GUARD = 0, 1, 2, 3, 4


@dataclass
class RunConfig:
    """Fully resolved run parameters (JSON keys are the field names)."""

    L: float = 1.0
    N: int = 64
    dt: float = 1e-3
    T: float = 2.0
    lambda_: float = 1.0
    lambda1: float | None = None
    c0: float | None = None
    mode: str = "static"
    ic: str = "gauss"
    amplitude: float = 1e-3
    seed: int = 0
    ytilde_ic: str = "random"
    ytilde_amplitude: float = 1e-3
    ytilde_seed: int = 1
    nonlinear: bool = True
    integrator: str = "exponential"
    guards: bool = True
    eps_proxy: float = 1e-2
    cond_limit: float = DEFAULT_COND_LIMIT
    record_every: int = 1
    assertions: bool = True
    # gramian subcommand
    method: str = "sylvester"
    lambdas: list | None = None
    quad_tol: float = 1e-10
    # finite-time
    n_max: int = 4
    lambda_base: float = 0.5
    schedule_c: float = 1.0
    margin: float = 0.1
    gamma: float = 1.0
    floor: float = 1e-12
    # critical-scan
    L_range: list | None = None
    points: int = 31
    k_max: int = 10
    workers: int = 1
    out: str = "out"
    cache: str | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        return dict(sorted(d.items()))


def _key(name: str) -> str:
    return "lambda" if name == "lambda_" else name


_FIELDS = {_key(f.name): f for f in fields(RunConfig)}
_FLOAT = {"L", "dt", "T", "lambda", "lambda1", "c0", "amplitude", "ytilde_amplitude", "eps_proxy", "cond_limit",
          "quad_tol", "lambda_base", "schedule_c", "margin", "gamma", "floor"}
_INT = {"N", "seed", "ytilde_seed", "record_every", "n_max", "points", "k_max", "workers"}
_BOOL = {"nonlinear", "guards", "assertions"}
_STR = {"mode", "ic", "ytilde_ic", "integrator", "method", "out"}
_OPT_STR = {"cache"}
_LIST = {"lambdas", "L_range"}
_POSITIVE = {"L", "dt", "T", "lambda", "amplitude", "ytilde_amplitude", "eps_proxy", "cond_limit", "quad_tol",
             "lambda_base", "schedule_c", "margin", "gamma", "floor", "N", "record_every", "n_max", "points", "k_max", "workers"}


def _coerce(key: str, value):
    def bad(expected):
        return ConfigurationError(f"field {key!r}: expected {expected}, got {value!r}")

    if key in _FLOAT:
        if value is None and key in ("lambda1", "c0"):
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad("a number")
        value = float(value)
        if not np.isfinite(value):
            raise bad("a finite number")
    elif key in _INT:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                value = int(value)
            else:
                raise bad("an integer")
    elif key in _BOOL:
        if not isinstance(value, bool):
            raise bad("true or false")
    elif key in _STR:
        if not isinstance(value, str):
            raise bad("a string")
    elif key in _OPT_STR:
        if value is not None and not isinstance(value, str):
            raise bad("a string or null")
    elif key in _LIST:
        if value is not None:
            if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value):
                raise bad("a list of numbers")
            value = [float(v) for v in value]
    if key in _POSITIVE and value is not None and not value > 0:
        raise ConfigurationError(f"field {key!r} must be positive, got {value!r}")
    if key == "seed" and not 0 <= value < 2**64:
        raise ConfigurationError(f"field 'seed' must be an unsigned 64-bit integer, got {value!r}")
    return value


def _check(cfg: RunConfig) -> RunConfig:
    if cfg.mode not in MODES:
        raise ConfigurationError(f"field 'mode': expected one of {MODES}, got {cfg.mode!r}")
    for key in ("ic", "ytilde_ic"):
        if getattr(cfg, key) not in PROFILES:
            raise ConfigurationError(f"field {key!r}: expected one of {PROFILES}, got {getattr(cfg, key)!r}")
    if cfg.integrator not in ("exponential", "trapezoidal"):
        raise ConfigurationError(f"field 'integrator': unknown integrator {cfg.integrator!r}")
    if cfg.method not in ("sylvester", "quadrature", "both"):
        raise ConfigurationError(f"field 'method': expected sylvester, quadrature or both, got {cfg.method!r}")
    if cfg.N < 8:
        raise ConfigurationError(f"field 'N' must be >= 8, got {cfg.N}")
    if cfg.mode == "dynamic":
        for key in ("lambda1", "c0"):
            if getattr(cfg, key) is None:
                raise ConfigurationError(f"field {key!r} is required in dynamic mode")
        if not cfg.c0 > 0:
            raise ConfigurationError(f"field 'c0' must be positive, got {cfg.c0}")
        if not cfg.lambda1 - (2.0 + cfg.c0) * cfg.lambda_ > 0:
            raise ConfigurationError(
                f"field 'lambda1': dynamic gain needs lambda1 - (2 + c0) lambda > 0, "
                f"got lambda1={cfg.lambda1:g}, (2 + c0) lambda={(2.0 + cfg.c0) * cfg.lambda_:g}"
            )
    if cfg.n_max < 2:
        raise ConfigurationError("field 'n_max' must be >= 2")
    if cfg.L_range is not None and (len(cfg.L_range) != 2 or not 0 < cfg.L_range[0] <= cfg.L_range[1]):
        raise ConfigurationError(f"field 'L_range': expected [lo, hi] with 0 < lo <= hi, got {cfg.L_range}")
    return cfg


def _parse_override(text: str):
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not KEY=VALUE")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def parse_config(path=None, overrides=None, **flags) -> RunConfig:
    """Strict configuration parse.

    Parameters
    ----------
    path : path-like, optional
        JSON object file.  Unknown keys are errors.
    overrides : iterable of str or dict, optional
        ``KEY=VALUE`` strings (``VALUE`` parsed as JSON when possible) or a
        mapping; applied after the file.
    **flags
        Applied last; ``None`` values are ignored.

    Raises
    ------
    ConfigurationError
        Missing or malformed file, unknown key, type mismatch, or a
        mode/field inconsistency.  The message names the field.
    """
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigurationError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {p} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"config file {p} must hold a JSON object")
    if isinstance(overrides, dict):
        data.update(overrides)
    else:
        for item in overrides or ():
            k, v = _parse_override(item)
            data[k] = v
    data.update({k: v for k, v in flags.items() if v is not None})
    kwargs = {}
    for key, value in data.items():
        if key not in _FIELDS:
            raise ConfigurationError(f"unknown config key {key!r}")
        kwargs[_FIELDS[key].name] = _coerce(key, value)
    return _check(RunConfig(**kwargs))


def _loop_cfg(cfg: RunConfig) -> LoopConfig:
    return LoopConfig(dt=cfg.dt, nonlinear=cfg.nonlinear, cond_limit=cfg.cond_limit, eps_proxy=cfg.eps_proxy,
                      guards=cfg.guards, record_every=cfg.record_every, integrator=cfg.integrator)


def _cache(cfg: RunConfig) -> GramianCache | None:
    root = cfg.cache or default_cache_dir()
    return GramianCache(root) if root else None


def _refuse_critical(cfg: RunConfig):
    # Q(L) is singular exactly on the critical set; on a coarse grid its
    # condition number can still sit below cond_limit, so check L directly
    crit, nearest, dist = is_critical(cfg.L, cfg.k_max, CRITICAL_TOL * max(1.0, cfg.L))
    if crit:
        raise NearCriticalLengthError(
            f"L={cfg.L} is within {dist:.3g} of the critical length {nearest:.12g}; the Gramian is singular there",
            cond=float("inf"),
        )


def _gram(gen, lam, cache):
    return cache.get_or_build(gen, lam, "sylvester") if cache is not None else assemble_sylvester(gen, lam)


def _cmd_gramian(cfg, gen, out, cache):
    lams = cfg.lambdas or [cfg.lambda_]
    rows = []
    for lam in lams:
        row = {"lambda": lam}
        syl = _gram(gen, lam, cache) if cfg.method in ("sylvester", "both") else None
        quad = None
        if cfg.method in ("quadrature", "both"):
            fields_ = GramianCache.key_fields(gen, lam, "quadrature", tol=cfg.quad_tol, dt=cfg.dt)
            build = lambda: assemble_quadrature(gen, lam, tol=cfg.quad_tol, cfg=PropagatorConfig(dt=cfg.dt))  # noqa: E731
            quad = cache.get_or_build(gen, lam, "quadrature", builder=build, tol=cfg.quad_tol, dt=cfg.dt) if cache else build()
            row["cache_key"] = GramianCache.digest(fields_)
        ref = syl if syl is not None else quad
        ev = ref.eigvalsh()
        row.update(lambda_min=float(ev[0]), lambda_max=float(ev[-1]),
                   cond=float(ev[-1] / ev[0]) if ev[0] > 0 else float("inf"),
                   sylvester_residual=sylvester_residual(gen, ref))
        if syl is not None and quad is not None:
            row["relative_distance"] = float(np.linalg.norm(syl.Q - quad.Q) / np.linalg.norm(syl.Q))
        rows.append(row)
    checks = {"residual_ok": all(r["sylvester_residual"] <= 1e-9 for r in rows)}
    if cfg.method == "both":
        checks["agreement_ok"] = all(r["relative_distance"] <= 1e-3 for r in rows)
    return {"gramians": rows}, checks


def _cmd_simulate(cfg, gen, out, cache):
    y0 = initial_profile(gen, cfg.amplitude, cfg.ic, cfg.seed)
    if cfg.mode == "linear":
        traj, _ = propagate(gen, y0, cfg.T, PropagatorConfig(dt=cfg.dt))
        write_trajectory_csv(out / "trajectory.csv", gen, traj)
        norms = np.linalg.norm(traj.states, axis=1) * np.sqrt(gen.grid.h)
        drift = float(np.max(np.abs(norms - norms[0])) / norms[0]) if norms[0] > 0 else 0.0
        return {"max_relative_drift": drift}, {"conservation_ok": drift <= 1e-8}
    _refuse_critical(cfg)
    gram = _gram(gen, cfg.lambda_, cache)
    lcfg = _loop_cfg(cfg)
    if cfg.mode == "static":
        rep = simulate_static(gen, y0, gram, cfg.T, lcfg)
        rate, viol = decay_report(rep, cfg.lambda_)
        summary = {"fitted_rate": rate, "envelope_violations": viol, "cond": rep.diagnostics.get("cond"),
                   "max_identity_error": float(np.max(rep.identity_error)), "xT_norm": rep.xT_norm}
        checks = {"envelope_ok": viol == 0, "rate_ok": rate >= 1.6 * cfg.lambda_}
    elif cfg.mode == "dynamic":
        yt0 = initial_profile(gen, cfg.ytilde_amplitude, cfg.ytilde_ic, cfg.ytilde_seed)
        rep = simulate_dynamic(gen, y0, yt0, gram, cfg.lambda1, cfg.c0, cfg.T, lcfg)
        win = (cfg.T / 10.0, cfg.T)
        ry, ryt, rz = (fit_rate(rep.times, v, win) for v in (rep.norm_y, rep.norm_ytilde, rep.z_norm))
        summary = {"fitted_rate": ry, "fitted_rate_ytilde": ryt, "fitted_rate_z": rz, "cond": rep.diagnostics.get("cond"),
                   "xT_norm": rep.xT_norm}
        checks = {"rate_ok": ry >= 1.6 * cfg.lambda_, "rate_ytilde_ok": ryt >= 1.6 * cfg.lambda_, "z_faster_ok": rz > ry}
    else:
        raise ConfigurationError(f"field 'mode': simulate runs static, dynamic or linear, got {cfg.mode!r}")
    write_report_csv(out / "report.csv", rep)
    summary["diagnostics"] = {k: v for k, v in rep.diagnostics.items() if np.isscalar(v) or v is None}
    return summary, checks


def _cmd_finite_time(cfg, gen, out, cache):
    _refuse_critical(cfg)
    y0 = initial_profile(gen, cfg.amplitude, cfg.ic, cfg.seed)
    sched = build_schedule(cfg.T, cfg.n_max, lam_base=cfg.lambda_base, c=cfg.schedule_c, margin=cfg.margin, gamma=cfg.gamma)
    write_json(out / "schedule.json", sched.to_dict())
    mode = "dynamic" if cfg.lambda1 is not None and cfg.mode == "dynamic" else "static"
    yt0 = initial_profile(gen, cfg.ytilde_amplitude, cfg.ytilde_ic, cfg.ytilde_seed) if mode == "dynamic" else None
    res = simulate_finite_time(gen, y0, sched, mode, _loop_cfg(cfg), ytilde0=yt0, cache=cache, floor=cfg.floor,
                               workers=cfg.workers)
    write_staged_csv(out / "staged.csv", res)
    norms = res.stage_norms()
    summary = {
        "stop_reason": res.stop_reason,
        "message": res.message,
        "stage_norms": norms,
        "ratios": res.ratios,
        "conds": [s.cond for s in res.stages],
        "decay_profile": res.decay_profile(),
        "validation": validate_schedule(sched, cfg.gamma),
    }
    checks = {"no_guard_stop": res.stop_reason != "guard",
              "stage_norms_decreasing": bool(np.all(np.diff(norms) < 0))}
    if mode == "static" and res.stages:
        base = constant_lambda_baseline(gen, y0, sched, _loop_cfg(cfg), cache=cache)
        summary["baseline_norms"] = base[: len(norms)].tolist()
    return summary, checks


def _cmd_critical_scan(cfg, gen, out, cache):
    rng = cfg.L_range or [5.5, 7.0]
    rows = conditioning_scan(rng, cfg.lambda_, cfg.N, cfg.points, workers=cfg.workers, k_max=cfg.k_max)
    write_scan_csv(out / "scan.csv", rows)
    lm = np.array([r.lambda_min for r in rows])
    ok = np.isfinite(lm)
    summary = {"points": len(rows), "failures": int((~ok).sum())}
    if ok.any():
        i = int(np.nanargmin(lm))
        summary.update(argmin_L=rows[i].L, min_lambda_min=float(lm[i]), median_lambda_min=float(np.nanmedian(lm)),
                       argmin_near_critical=rows[i].is_near_critical)
    return summary, {}


def _cmd_diagnose(cfg, gen, out, cache):
    pcfg = PropagatorConfig(dt=cfg.dt)
    gram = _gram(gen, cfg.lambda_, cache)
    ev = gram.eigvalsh()
    crit, nearest, dist = is_critical(cfg.L, cfg.k_max, 1e-9)
    probe = uncontrollable_mode_probe(cfg.L, cfg.N)
    summary = {
        "state_dimension": gen.n,
        "antisym_defect": gen.antisym_defect,
        "admissibility_constant": admissibility_constant(gen, 1.0, samples=20, seed=cfg.seed, cfg=pcfg),
        "sylvester_residual": sylvester_residual(gen, gram),
        "lambda_min": float(ev[0]),
        "lambda_max": float(ev[-1]),
        "cond": float(ev[-1] / ev[0]) if ev[0] > 0 else float("inf"),
        "is_critical": crit,
        "nearest_critical_L": nearest,
        "distance_to_critical": dist,
        "mode_indicator": probe["indicator"],
    }
    for k in ("antisym_defect", "admissibility_constant", "sylvester_residual", "cond", "mode_indicator"):
        print(f"{k}: {summary[k]:.6g}")
    return summary, {}


_DISPATCH = {
    "gramian": _cmd_gramian,
    "simulate": _cmd_simulate,
    "finite-time": _cmd_finite_time,
    "critical-scan": _cmd_critical_scan,
    "diagnose": _cmd_diagnose,
}


def run(cfg: RunConfig, command: str = "simulate") -> int:
    """Execute one subcommand and write its artifacts; returns the exit status.

    Exit codes: 0 success, 1 a check failed, 2 configuration error,
    3 numerical error (including near-critical lengths), 4 guard refusal.
    """
    if command not in _DISPATCH:
        raise ConfigurationError(f"unknown command {command!r}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.resolved.json", dict(cfg.to_json(), command=command))
    err_path = out / "error.json"
    if err_path.exists():
        err_path.unlink()
    start = time.perf_counter()
    try:
        gen = build_generator(build_grid(cfg.L, cfg.N))
        summary, checks = _DISPATCH[command](cfg, gen, out, _cache(cfg))
    except KdvStabError as exc:
        err = {"kind": exc.kind, "message": str(exc), "command": command}
        if isinstance(exc, NearCriticalLengthError):
            err["cond"] = exc.cond
        if isinstance(exc, GuardError):
            err["measured"] = exc.measured
        write_json(err_path, err)
        print(f"error ({exc.kind}): {exc}", file=sys.stderr)
        if isinstance(exc, ConfigurationError):
            return EXIT_CONFIG
        return EXIT_GUARD if isinstance(exc, GuardError) else EXIT_NUMERICAL
    passed = all(checks.values()) if cfg.assertions else True
    summary = dict(summary, command=command, checks=checks, passed=passed, version=__version__,
                   elapsed_s=round(time.perf_counter() - start, 3))
    write_json(out / "summary.json", summary)
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    return EXIT_OK if passed else EXIT_ASSERT


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kdvstab", description="Gramian-based boundary feedback for KdV on (0, L).")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH", help="JSON config file")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--cache", metavar="DIR", help="Gramian cache directory (default $KDVSTAB_CACHE)")
        p.add_argument("--seed", type=int, metavar="U64", help="seed for random initial data")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="set a config field (repeatable)")
        p.add_argument("--no-guards", action="store_true", help="run past the smallness guards")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.override)
    flags = {"out": args.out, "cache": args.cache, "seed": args.seed}
    if args.no_guards:
        flags["guards"] = False
        print("warning: smallness guards disabled; initial data outside the small-data regime "
              "are not covered by the decay estimates", file=sys.stderr)
    try:
        cfg = parse_config(args.config, overrides, **flags)
    except ConfigurationError as exc:
        print(f"error (configuration): {exc}", file=sys.stderr)
        out = Path(flags["out"] or "out")
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "error.json", {"kind": exc.kind, "message": str(exc), "command": args.command})
        return EXIT_CONFIG
    return run(cfg, args.command)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
