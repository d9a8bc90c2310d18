"""Staged feedback with growing gains ``lambda_n`` on stages ``[t_n, t_{n+1})``.

In static mode the plant state ``y`` runs continuously while the companion
state is reset to ``Q_n^{-1} y(t_n)`` at every hand-off.  In dynamic mode
the companion state also runs continuously and only the stage parameters
``(lambda_n, lambda_{1,n})`` change.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ._io import write_csv
from .closedloop import LoopConfig, RunReport, _guard, _run
from .discretization import Generator
from .errors import ConfigurationError, GuardError, NearCriticalLengthError
from .gramian import Gramian, GramianCache, assemble_sylvester, invert

__all__ = [
    "Schedule",
    "StageRecord",
    "FiniteTimeResult",
    "build_schedule",
    "validate_schedule",
    "simulate_finite_time",
    "constant_lambda_baseline",
    "write_staged_csv",
]


@dataclass(frozen=True)
class Schedule:
    """Stage times, gains and partial sums.

    Attributes
    ----------
    T : float
        Horizon approached by ``t_n``.
    t, lam : ndarray, shape (n_max + 1,)
        ``t_0 = 0 < t_1 < ...`` and the stage gains.  Stage ``n`` covers
        ``[t_n, t_{n+1}]`` for ``n < n_max``.
    lam1 : ndarray or None
        Dynamic gains ``lambda_{1,n}``.
    s : ndarray, shape (n_max + 1,)
        ``s_n = sum_{k<n} lambda_k (t_{k+1} - t_k)``.
    gamma : float
        Margin used when validating.
    n_max : int
        Number of stages.
    c : float
        Dynamic-gain constant (``lambda_{1,n} >= (2 + c) lambda_n``).
    family : str
    """

    T: float
    t: np.ndarray = field(repr=False)
    lam: np.ndarray = field(repr=False)
    lam1: np.ndarray | None = field(repr=False)
    s: np.ndarray = field(repr=False)
    gamma: float = 1.0
    n_max: int = 4
    c: float = 1.0
    family: str = "default"
    lam_base: float = 0.5

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "t": self.t.tolist(),
            "lambda": self.lam.tolist(),
            "lambda1": None if self.lam1 is None else self.lam1.tolist(),
            "s": self.s.tolist(),
            "gamma": self.gamma,
            "n_max": self.n_max,
            "c": self.c,
            "family": self.family,
            "lambda_base": self.lam_base,
        }


def _partial_sums(t: np.ndarray, lam: np.ndarray) -> np.ndarray:
    s = np.zeros(len(t))
    s[1:] = np.cumsum(lam[:-1] * np.diff(t))
    return s


def build_schedule(
    T: float,
    n_max: int = 4,
    family: str = "default",
    lam_base: float = 0.5,
    c: float = 1.0,
    margin: float = 0.1,
    gamma: float = 1.0,
    t=None,
    lam=None,
) -> Schedule:
    """Build a stage schedule.

    Families
    --------
    default
        ``t_n = T (1 - 1/(n+1)^2)`` for ``n >= 1`` and
        ``lambda_n = lam_base (n+1)^8``.
    constant
        Same times, ``lambda_n = lam_base``; the reference that should not
        reach zero in finite time.
    custom
        User sequences ``t`` and ``lam`` of equal length ``n_max + 1``.

    The dynamic gains are ``lambda_{1,n} = (2 + c) lambda_n (1 + margin)``.
    """
    if not (np.isfinite(T) and T > 0):
        raise ConfigurationError(f"T must be positive, got {T}")
    if int(n_max) != n_max or n_max < 2:
        raise ConfigurationError(f"n_max must be an integer >= 2, got {n_max}")
    n_max = int(n_max)
    if not lam_base > 0:
        raise ConfigurationError(f"lambda_base must be positive, got {lam_base}")
    if not (c > 0 and margin > 0):
        raise ConfigurationError("c and margin must be positive")
    k = np.arange(n_max + 1, dtype=float)
    if family in ("default", "constant"):
        tt = T * (1.0 - 1.0 / (k + 1.0) ** 2)
        tt[0] = 0.0
        ll = lam_base * (k + 1.0) ** 8 if family == "default" else np.full(n_max + 1, float(lam_base))
    elif family == "custom":
        if t is None or lam is None:
            raise ConfigurationError("custom schedule needs both t and lam")
        tt = np.asarray(t, dtype=float)
        ll = np.asarray(lam, dtype=float)
        if tt.shape != (n_max + 1,) or ll.shape != (n_max + 1,):
            raise ConfigurationError(f"custom sequences must have length n_max + 1 = {n_max + 1}")
        if tt[0] != 0.0:
            raise ConfigurationError("custom t must start at 0")
        if np.any(np.diff(tt) <= 0) or tt[-1] >= T:
            raise ConfigurationError("custom t must be strictly increasing and below T")
        if np.any(ll <= 0) or np.any(np.diff(ll) <= 0):
            raise ConfigurationError("custom lambda must be positive and strictly increasing")
    else:
        raise ConfigurationError(f"unknown schedule family {family!r}")
    lam1 = (2.0 + c) * ll * (1.0 + margin)
    return Schedule(
        T=float(T), t=tt, lam=ll, lam1=lam1, s=_partial_sums(tt, ll), gamma=float(gamma),
        n_max=n_max, c=float(c), family=family, lam_base=float(lam_base),
    )


def validate_schedule(sched: Schedule, gamma: float | None = None, horizon_n: int | None = None) -> dict:
    """Evaluate the stage-length conditions and the growth ratio.

    For the built-in families the schedule is extended to ``horizon_n``
    stages; custom schedules are checked over their own length.

    Returns
    -------
    dict
        ``gap`` rows ``(n, lam_n (t_{n+1}-t_n), gamma lam_n^(1/3), ok)``,
        ``step`` rows ``(n, ratio, ok)`` with
        ``ratio = lam_{n+1}(t_{n+2}-t_{n+1}) / (lam_n (t_{n+1}-t_n))`` and
        ``ok = ratio <= 1 + 1/gamma``, ``growth`` rows
        ``(n, s_n / (n + lam_{n+1}^(1/3)))``, ``diverging`` (growth
        strictly increasing over the second half of the horizon) and
        ``all_ok``.  Nothing is raised for failed checks.
    """
    gamma = sched.gamma if gamma is None else float(gamma)
    if sched.family != "custom" and horizon_n is not None:
        sched = build_schedule(sched.T, max(int(horizon_n) + 2, 2), sched.family, sched.lam_base, sched.c, gamma=gamma)
    t, lam, s = sched.t, sched.lam, sched.s
    last = len(t) - 1
    if horizon_n is not None:
        last = min(last, int(horizon_n) + 2)
    gap = []
    for n in range(last):
        lhs = lam[n] * (t[n + 1] - t[n])
        rhs = gamma * lam[n] ** (1.0 / 3.0)
        gap.append((n, float(lhs), float(rhs), bool(lhs >= rhs)))
    step = []
    for n in range(last - 1):
        r = lam[n + 1] * (t[n + 2] - t[n + 1]) / (lam[n] * (t[n + 1] - t[n]))
        step.append((n, float(r), bool(r <= 1.0 + 1.0 / gamma)))
    growth = [(n, float(s[n] / (n + lam[n + 1] ** (1.0 / 3.0)))) for n in range(1, last)]
    g = np.array([r for _, r in growth])
    tail = g[len(g) // 2 :]
    diverging = bool(len(tail) >= 2 and np.all(np.diff(tail) > 0))
    return {
        "gamma": gamma,
        "gap": gap,
        "step": step,
        "growth": growth,
        "diverging": diverging,
        "all_ok": bool(all(r[-1] for r in gap) and all(r[-1] for r in step)),
    }


@dataclass(frozen=True)
class StageRecord:
    n: int
    t_start: float
    t_end: float
    lam: float
    lam1: float | None
    cond: float
    norm_start: float
    norm_end: float
    dt: float

    @property
    def ratio(self) -> float:
        return self.norm_end / self.norm_start if self.norm_start > 0 else 0.0


@dataclass
class FiniteTimeResult:
    """Staged run: concatenated report, per-stage records and stop reason.

    ``stop_reason`` is ``"completed"``, ``"floor"`` (state below the floor,
    a success), ``"cond_limit"`` or ``"guard"``.
    """

    report: RunReport
    stage: np.ndarray
    lambda_n: np.ndarray
    cond_Qn: np.ndarray
    stages: list[StageRecord]
    stop_reason: str
    schedule: Schedule
    message: str = ""

    @property
    def ratios(self) -> list[float]:
        return [s.ratio for s in self.stages]

    def stage_norms(self) -> list[float]:
        """``||y(t_n)||`` for every reached hand-off time."""
        if not self.stages:
            return [float(self.report.norm_y[0])] if len(self.report.norm_y) else []
        return [self.stages[0].norm_start] + [s.norm_end for s in self.stages]

    def decay_profile(self) -> list[tuple[int, float, float]]:
        """Rows ``(n, ||y(t_n)||, e^{-2 s_n} ||y(0)||)``."""
        norms = self.stage_norms()
        y0 = norms[0] if norms else 0.0
        return [(n, v, float(np.exp(-2.0 * self.schedule.s[n]) * y0)) for n, v in enumerate(norms)]


def stage_gramians(gen: Generator, sched: Schedule, cache: GramianCache | None = None, workers: int = 1) -> list[Gramian]:
    """Sylvester Gramians ``Q(lambda_n)`` for every stage."""

    def one(lam):
        if cache is not None:
            return cache.get_or_build(gen, lam, "sylvester")
        return assemble_sylvester(gen, lam)

    lams = [float(v) for v in sched.lam[: sched.n_max]]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, lams))
    return [one(v) for v in lams]


def _concat(parts: list[RunReport], mode: str, lam0: float) -> RunReport:
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
    aux = "identity_error" if mode == "static" else "z_norm"
    rep = RunReport(
        times=cat("times"), norm_y=cat("norm_y"), norm_ytilde=cat("norm_ytilde"),
        envelope=cat("envelope"), u=cat("u"), mode=f"finite-time-{mode}", lam=lam0,
        xT_norm=float(max(p.xT_norm for p in parts)),
        final=parts[-1].final,
    )
    setattr(rep, aux, cat(aux))
    return rep


def simulate_finite_time(
    gen: Generator,
    y0: np.ndarray,
    sched: Schedule,
    mode: str = "static",
    cfg: LoopConfig | None = None,
    ytilde0: np.ndarray | None = None,
    cache: GramianCache | None = None,
    floor: float = 1e-12,
    workers: int = 1,
) -> FiniteTimeResult:
    """Run the staged closed loop over the realized stages of ``sched``.

    The step on stage ``n`` is ``min(cfg.dt, 1/(2 lambda_n))``.  The run
    stops early, keeping everything computed so far, when ``||y(t_n)||``
    drops below ``floor``, when ``Q_n`` exceeds ``cfg.cond_limit``, or when
    the stage smallness guard refuses ``y(t_n)``.

    Parameters
    ----------
    mode : str
        ``"static"`` or ``"dynamic"``.
    ytilde0 : ndarray, optional
        Dynamic mode only; defaults to zero.
    """
    cfg = cfg or LoopConfig()
    if mode not in ("static", "dynamic"):
        raise ConfigurationError(f"unknown finite-time mode {mode!r}")
    y = np.asarray(y0, dtype=float).copy()
    yt = np.zeros(gen.n) if ytilde0 is None else np.asarray(ytilde0, dtype=float).copy()
    grams = stage_gramians(gen, sched, cache, workers)
    parts, stage_col, lam_col, cond_col, records = [], [], [], [], []
    stop, message = "completed", ""
    for n in range(sched.n_max):
        t0, t1 = float(sched.t[n]), float(sched.t[n + 1])
        lam_n = float(sched.lam[n])
        ny = gen.norm(y)
        if ny < floor:
            stop, message = "floor", f"||y(t_{n})|| = {ny:.3e} below floor {floor:g}"
            break
        gram = grams[n]
        try:
            Qinv, cond = invert(gram, cfg.cond_limit)
        except NearCriticalLengthError as exc:
            stop, message = "cond_limit", f"stage {n}: {exc}"
            break
        if mode == "static":
            yt = Qinv @ y
        try:
            proxy = np.exp(4.0 / 3.0 * lam_n * (t1 - t0) + lam_n ** (1.0 / 3.0)) * ny
            _guard(gen, cfg, Qinv, {"norm_y": ny}, {"stage_proxy": float(min(proxy, np.finfo(float).max))})
        except GuardError as exc:
            stop, message = "guard", f"stage {n}: {exc}"
            break
        dt_n = min(cfg.dt, 1.0 / (2.0 * lam_n))
        lam1 = float(sched.lam1[n]) if mode == "dynamic" else 0.0
        rep = _run(gen, gram, y, yt, t1 - t0, replace(cfg, dt=dt_n), mode, lam1, Qinv, t0=t0)
        y, yt = rep.final.y.copy(), rep.final.ytilde.copy()
        parts.append(rep)
        m = len(rep.times)
        stage_col.append(np.full(m, n))
        lam_col.append(np.full(m, lam_n))
        cond_col.append(np.full(m, cond))
        records.append(StageRecord(n, t0, t1, lam_n, lam1 if mode == "dynamic" else None, float(cond),
                                   float(ny), float(gen.norm(y)), float(rep.times[1] - rep.times[0]) if m > 1 else dt_n))
    if parts:
        report = _concat(parts, mode, float(sched.lam[0]))
    else:
        report = RunReport(times=np.array([0.0]), norm_y=np.array([gen.norm(y)]), norm_ytilde=np.array([gen.norm(yt)]),
                           envelope=np.array([2.0 * gen.norm(y)]), u=np.array([-gen.b @ yt]), mode=f"finite-time-{mode}",
                           lam=float(sched.lam[0]))
        setattr(report, "identity_error" if mode == "static" else "z_norm", np.array([np.nan]))
        stage_col, lam_col, cond_col = [np.array([0])], [np.array([sched.lam[0]])], [np.array([np.nan])]
    report.diagnostics.update(stop_reason=stop, message=message)
    return FiniteTimeResult(
        report=report,
        stage=np.concatenate(stage_col),
        lambda_n=np.concatenate(lam_col),
        cond_Qn=np.concatenate(cond_col),
        stages=records,
        stop_reason=stop,
        schedule=sched,
        message=message,
    )


def constant_lambda_baseline(gen: Generator, y0: np.ndarray, sched: Schedule, cfg: LoopConfig | None = None,
                             lam: float | None = None, cache: GramianCache | None = None) -> np.ndarray:
    """``||y(t_n)||`` under static feedback with fixed ``lam`` (default ``lam_0``).

    Same initial state and the same hand-off times as the schedule, so the
    entries compare one-to-one with :meth:`FiniteTimeResult.stage_norms`.
    """
    cfg = cfg or LoopConfig()
    lam = float(sched.lam[0]) if lam is None else float(lam)
    gram = cache.get_or_build(gen, lam, "sylvester") if cache is not None else assemble_sylvester(gen, lam)
    Qinv, _ = invert(gram, cfg.cond_limit)
    _guard(gen, cfg, Qinv, {"norm_y": gen.norm(y0)}, {})
    y = np.asarray(y0, dtype=float)
    yt = Qinv @ y
    out = [gen.norm(y)]
    for n in range(sched.n_max):
        t0, t1 = float(sched.t[n]), float(sched.t[n + 1])
        rep = _run(gen, gram, y, yt, t1 - t0, cfg, "static", 0.0, Qinv, t0=t0)
        y, yt = rep.final.y, rep.final.ytilde
        out.append(gen.norm(y))
    return np.array(out)


def write_staged_csv(path, result: FiniteTimeResult):
    """Report columns plus ``stage,lambda_n,cond_Qn``."""
    from .closedloop import write_report_csv

    return write_report_csv(path, result.report, {"stage": result.stage, "lambda_n": result.lambda_n, "cond_Qn": result.cond_Qn})
