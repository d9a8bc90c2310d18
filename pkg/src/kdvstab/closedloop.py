"""Closed-loop simulation of the static and dynamic Gramian feedback laws.

Both laws act through a companion state ``yt`` (``y~``):

static
    ``y'  = A y - b b^T yt - N(y)``
    ``yt' = (A - 2 lam) yt - yt * (D y)``, with ``yt(0) = Q^{-1} y(0)``

dynamic
    ``yt' = (A - 2 lam) yt + lam1 Q^{-1} (y - Q yt) - yt * (D y)``,
    with ``yt(0)`` arbitrary

The boundary input is ``u = -b^T yt``.  ``N(y) = (y * Dy + D(y^2)) / 3``
is the energy-neutral form of the self-advection ``y y_x``.

The linear part of the stacked system ``(y, yt)`` is integrated as one
coupled block, with the quadratic terms explicit plus one corrector pass.
Two integrators are available:

exponential (default)
    exact propagator ``e^{dt M}`` of the coupled linear block with the
    second-order exponential Runge-Kutta corrector (ETD2RK).  The damping
    ``e^{-2 lam dt}`` is reproduced for every mode.
trapezoidal
    Crank-Nicolson on the linear block with a Heun corrector.  For modes
    with ``|mu| dt >> 1`` (the dispersive spectrum reaches ``|mu| ~ h^-3``)
    the trapezoidal map damps by only about ``2 lam dt / (1 + (mu dt/2)^2)``
    per step, so unresolved modes barely decay.

For the linear static loop the subspace ``y = Q yt`` is invariant under both
maps, so the identity ``yt = Q^{-1} y`` then holds to round-off.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from ._io import write_csv
from .discretization import Generator
from .errors import ConfigurationError, GuardError
from .gramian import DEFAULT_COND_LIMIT, Gramian, invert
from .propagator import step_count

__all__ = [
    "ClosedLoopState",
    "RunReport",
    "LoopConfig",
    "nonlinear_term",
    "initial_profile",
    "simulate_static",
    "simulate_dynamic",
    "decay_report",
    "fit_rate",
    "write_report_csv",
    "REPORT_COLUMNS",
    "PROFILES",
]

PROFILES = ("smooth", "sine2", "gauss", "random")
REPORT_COLUMNS = ("t", "norm_y", "norm_ytilde", "envelope", "identity_error", "z_norm", "u")


@dataclass(frozen=True)
class ClosedLoopState:
    t: float
    y: np.ndarray = field(repr=False)
    ytilde: np.ndarray = field(repr=False)
    u: float = 0.0
    Z: np.ndarray | None = field(default=None, repr=False)


@dataclass
class RunReport:
    """Time series of one closed-loop run (all series share ``times``).

    Norms are discrete L2 norms.  ``identity_error`` is set in static mode
    and ``z_norm`` in dynamic mode; the other one is ``None``.
    """

    times: np.ndarray
    norm_y: np.ndarray
    norm_ytilde: np.ndarray
    envelope: np.ndarray
    u: np.ndarray
    identity_error: np.ndarray | None = None
    z_norm: np.ndarray | None = None
    xT_norm: float = float("nan")
    mode: str = "static"
    lam: float = float("nan")
    final: ClosedLoopState | None = None
    diagnostics: dict = field(default_factory=dict)

    def columns(self) -> dict:
        n = len(self.times)
        blank = np.full(n, np.nan)
        return {
            "t": self.times,
            "norm_y": self.norm_y,
            "norm_ytilde": self.norm_ytilde,
            "envelope": self.envelope,
            "identity_error": blank if self.identity_error is None else self.identity_error,
            "z_norm": blank if self.z_norm is None else self.z_norm,
            "u": self.u,
        }


@dataclass(frozen=True)
class LoopConfig:
    """Integration and guard settings shared by both feedback modes.

    Attributes
    ----------
    dt : float
    nonlinear : bool
        Include the quadratic terms.
    cond_limit : float
        Passed to :func:`kdvstab.gramian.invert`.
    eps_proxy : float
        Smallness guard: refuse when the initial data exceed
        ``eps_proxy * min(1, 1/||Q^{-1}||)`` in L2 norm.
    guards : bool
        Set False to run past the smallness guard (the measured proxies are
        still reported).
    record_every : int
        Keep every k-th step in the report (the last step is always kept).
    integrator : str
        ``"exponential"`` or ``"trapezoidal"``.
    """

    dt: float = 1e-3
    nonlinear: bool = True
    cond_limit: float = DEFAULT_COND_LIMIT
    eps_proxy: float = 1e-2
    guards: bool = True
    record_every: int = 1
    integrator: str = "exponential"

    def __post_init__(self):
        if self.integrator not in ("exponential", "trapezoidal"):
            raise ConfigurationError(f"unknown integrator {self.integrator!r}")
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if self.record_every < 1:
            raise ConfigurationError("record_every must be >= 1")


def nonlinear_term(gen: Generator, y: np.ndarray, v: np.ndarray | None = None) -> np.ndarray:
    """Quadratic transport terms in state coordinates.

    ``nonlinear_term(gen, y)`` is the energy-neutral self-advection
    ``(y * Dy + D(y^2)) / 3``, and ``nonlinear_term(gen, y, v)`` is
    ``v * Dy``.  Products are formed on nodal values and projected back.
    """
    yn = gen.to_nodal(y)
    dy = gen.D_nodal @ yn
    if v is None:
        out = (yn * dy + gen.D_nodal @ (yn * yn)) / 3.0
    else:
        out = gen.to_nodal(v) * dy
    return gen.from_nodal(out)


def initial_profile(gen: Generator, amplitude: float, profile: str = "smooth", seed: int = 0) -> np.ndarray:
    """Initial state with discrete L2 norm ``amplitude``.

    Profiles
    --------
    smooth
        ``sin(2 pi x/L) + (1 - cos(4 pi x/L)) / 2``.
    sine2
        ``sin(2 pi x/L)``.
    gauss
        Centred bump of width ``L/10`` minus its (common) endpoint value.
    random
        First six sine and ``1 - cos`` modes with seeded normal
        coefficients decaying like ``1/k``.

    All vanish at both ends, as the generator's domain requires.
    """
    L = gen.grid.L
    if profile == "smooth":
        f = lambda x: np.sin(2 * np.pi * x / L) + 0.5 * (1 - np.cos(4 * np.pi * x / L))  # noqa: E731
    elif profile == "sine2":
        f = lambda x: np.sin(2 * np.pi * x / L)  # noqa: E731
    elif profile == "gauss":
        g = lambda x: np.exp(-(((x - 0.5 * L) / (0.1 * L)) ** 2))  # noqa: E731
        f = lambda x: g(x) - g(0.0)  # noqa: E731
    elif profile == "random":
        rng = np.random.default_rng(seed)
        a, c = rng.standard_normal(6), rng.standard_normal(6)
        k = np.arange(1, 7)

        def f(x):
            ph = 2 * np.pi * np.outer(x, k) / L
            return np.sin(ph) @ (a / k) + (1 - np.cos(ph)) @ (c / k)

    else:
        raise ConfigurationError(f"unknown profile {profile!r}")
    w = gen.sample(f)
    nw = gen.norm(w)
    return w if nw == 0 else (amplitude / nw) * w


def _xt_norm(gen: Generator, times, states_norm_max, grad_sq) -> float:
    return float(states_norm_max + np.sqrt(np.trapezoid(grad_sq, times)))


def _grad_sq(gen: Generator, y: np.ndarray) -> float:
    yn = gen.to_nodal(y)
    d = (np.roll(yn, -1) - yn) / gen.grid.h
    return float(gen.grid.h * d @ d)


def _coupled_generator(gen: Generator, lam: float, K: np.ndarray | None, lam1: float) -> np.ndarray:
    n = gen.n
    M = np.zeros((2 * n, 2 * n))
    M[:n, :n] = gen.A
    M[:n, n:] = -np.outer(gen.b, gen.b)
    M[n:, n:] = gen.A - (2.0 * lam + lam1) * np.eye(n)
    if K is not None:
        M[n:, :n] = K
    return M


class _Stepper:
    def __init__(self, gen: Generator, dt: float, nonlinear: bool):
        self.n, self.gen, self.dt, self.nonlinear = gen.n, gen, dt, nonlinear

    def _F(self, X):
        n = self.n
        y, yt = X[:n], X[n:]
        out = np.empty_like(X)
        out[:n] = -nonlinear_term(self.gen, y)
        out[n:] = -nonlinear_term(self.gen, y, yt)
        return out


class _TrapezoidalStepper(_Stepper):
    """Crank-Nicolson on the coupled linear block, Heun corrector."""

    def __init__(self, gen, M, dt, nonlinear):
        super().__init__(gen, dt, nonlinear)
        m = M.shape[0]
        self._R = np.eye(m) + 0.5 * dt * M
        self._lu = sla.lu_factor(np.eye(m) - 0.5 * dt * M)

    def step(self, X):
        rhs = self._R @ X
        if not self.nonlinear:
            return sla.lu_solve(self._lu, rhs)
        F0 = self._F(X)
        Xp = sla.lu_solve(self._lu, rhs + self.dt * F0)
        return sla.lu_solve(self._lu, rhs + 0.5 * self.dt * (F0 + self._F(Xp)))


class _ExponentialStepper(_Stepper):
    """Exact linear propagator with the ETD2RK corrector.

    ``e^Z``, ``phi_1(Z)`` and ``phi_2(Z)`` for ``Z = dt M`` come from one
    exponential of the block matrix ``[[Z, I, 0], [0, 0, I], [0, 0, 0]]``.
    """

    def __init__(self, gen, M, dt, nonlinear):
        super().__init__(gen, dt, nonlinear)
        m = M.shape[0]
        if nonlinear:
            big = np.zeros((3 * m, 3 * m))
            big[:m, :m] = dt * M
            big[:m, m : 2 * m] = np.eye(m)
            big[m : 2 * m, 2 * m :] = np.eye(m)
            E = sla.expm(big)
            self._E = E[:m, :m]
            self._p1 = dt * E[:m, m : 2 * m]
            self._p2 = dt * E[:m, 2 * m :]
        else:
            self._E = sla.expm(dt * M)

    def step(self, X):
        if not self.nonlinear:
            return self._E @ X
        F0 = self._F(X)
        Xp = self._E @ X + self._p1 @ F0
        return Xp + self._p2 @ (self._F(Xp) - F0)


def _make_stepper(gen, lam, dt, K, lam1, cfg):
    M = _coupled_generator(gen, lam, K, lam1)
    cls = _ExponentialStepper if cfg.integrator == "exponential" else _TrapezoidalStepper
    return cls(gen, M, dt, cfg.nonlinear)


def _run(gen, gram, y0, yt0, T, cfg: LoopConfig, mode, lam1, Qinv, t0=0.0, envelope_ref=None):
    n = gen.n
    lam = gram.lam
    k, dt = step_count(T, cfg.dt)
    K = lam1 * Qinv if mode == "dynamic" else None
    stepper = _make_stepper(gen, lam, dt, K, lam1 if mode == "dynamic" else 0.0, cfg)
    Q = gram.Q
    sq = np.sqrt(gen.grid.h)
    X = np.concatenate([y0, yt0])
    keep = [i for i in range(k + 1) if i % cfg.record_every == 0 or i == k]
    m = len(keep)
    times = t0 + dt * np.asarray(keep, dtype=float)
    ny, nyt, uu, aux = (np.empty(m) for _ in range(4))
    grad = np.empty(k + 1)
    ymax = 0.0
    j = 0
    for i in range(k + 1):
        if i > 0:
            X = stepper.step(X)
            if not np.all(np.isfinite(X)):
                raise GuardError(f"closed-loop state left the floating-point range at t={t0 + i * dt:.4g}")
        y, yt = X[:n], X[n:]
        grad[i] = _grad_sq(gen, y)
        nrm = sq * np.linalg.norm(y)
        ymax = max(ymax, nrm)
        if j < m and keep[j] == i:
            ny[j] = nrm
            nyt[j] = sq * np.linalg.norm(yt)
            uu[j] = -gen.b @ yt
            if mode == "static":
                aux[j] = sq * np.linalg.norm(yt - Qinv @ y)
            else:
                aux[j] = sq * np.linalg.norm(y - Q @ yt)
            j += 1
    ref = sq * np.linalg.norm(y0) if envelope_ref is None else envelope_ref
    env = 2.0 * np.exp(-2.0 * lam * (times - t0)) * ref
    y, yt = X[:n], X[n:]
    final = ClosedLoopState(
        t=float(t0 + k * dt), y=y.copy(), ytilde=yt.copy(), u=float(-gen.b @ yt),
        Z=(y - Q @ yt) if mode == "dynamic" else None,
    )
    return RunReport(
        times=times,
        norm_y=ny,
        norm_ytilde=nyt,
        envelope=env,
        u=uu,
        identity_error=aux if mode == "static" else None,
        z_norm=aux if mode == "dynamic" else None,
        xT_norm=_xt_norm(gen, t0 + dt * np.arange(k + 1), ymax, grad),
        mode=mode,
        lam=lam,
        final=final,
    )


def _guard(gen, cfg: LoopConfig, Qinv, norms: dict, proxies: dict):
    inv_norm = float(np.linalg.norm(Qinv, 2))
    bound = cfg.eps_proxy * min(1.0, 1.0 / inv_norm)
    measured = dict(proxies, Qinv_norm=inv_norm, bound=bound, **norms)
    if cfg.guards and max(norms.values()) > bound:
        raise GuardError(
            f"initial data too large for the smallness guard: {max(norms.values()):.3e} > {bound:.3e}",
            measured,
        )
    return measured


def simulate_static(
    gen: Generator,
    y0: np.ndarray,
    gram: Gramian,
    T: float,
    cfg: LoopConfig | None = None,
    Qinv: np.ndarray | None = None,
) -> RunReport:
    """Static feedback realized through the companion state ``yt = Q^{-1} y``.

    Parameters
    ----------
    gen : Generator
    y0 : ndarray
        Initial plant state.
    gram : Gramian
        ``Q(lambda)``; its ``lam`` sets the damping.
    T : float
        Horizon.
    cfg : LoopConfig, optional
    Qinv : ndarray, optional
        Precomputed inverse (skips :func:`invert`).

    Raises
    ------
    NearCriticalLengthError
        If ``Q`` cannot be inverted within ``cfg.cond_limit``.
    GuardError
        If ``y0`` violates the smallness guard.
    """
    cfg = cfg or LoopConfig()
    y0 = np.asarray(y0, dtype=float)
    cond = None
    if Qinv is None:
        Qinv, cond = invert(gram, cfg.cond_limit)
    lam = gram.lam
    yt0 = Qinv @ y0
    ny0, nyt0 = gen.norm(y0), gen.norm(yt0)
    proxy = (lam + np.exp(4.0 * lam * T / 3.0)) * (nyt0 + ny0)
    measured = _guard(gen, cfg, Qinv, {"norm_y0": ny0}, {"smallness_proxy": float(proxy)})
    rep = _run(gen, gram, y0, yt0, T, cfg, "static", 0.0, Qinv)
    rep.diagnostics.update(measured, cond=cond)
    return rep


def simulate_dynamic(
    gen: Generator,
    y0: np.ndarray,
    ytilde0: np.ndarray,
    gram: Gramian,
    lam1: float,
    c0: float,
    T: float,
    cfg: LoopConfig | None = None,
    Qinv: np.ndarray | None = None,
) -> RunReport:
    """Dynamic feedback with arbitrary companion initial state.

    The mismatch ``Z = y - Q yt`` obeys ``Z' = (A - lam1) Z`` in the linear
    regime.  Requires ``lam1 > (2 + c0) lam``.
    """
    cfg = cfg or LoopConfig()
    lam = gram.lam
    if not c0 > 0:
        raise ConfigurationError(f"c0 must be positive, got {c0}")
    if not lam1 - (2.0 + c0) * lam > 0:
        raise ConfigurationError(
            f"dynamic gain too small: need lambda1 > (2 + c0) lambda = {(2.0 + c0) * lam:g}, got lambda1={lam1:g}"
        )
    y0 = np.asarray(y0, dtype=float)
    ytilde0 = np.asarray(ytilde0, dtype=float)
    cond = None
    if Qinv is None:
        Qinv, cond = invert(gram, cfg.cond_limit)
    ny0, nyt0 = gen.norm(y0), gen.norm(ytilde0)
    inv_norm = float(np.linalg.norm(Qinv, 2))
    proxy = lam**2 * np.exp(4.0 * lam * T / 3.0) * inv_norm**2 * (ny0 + nyt0)
    measured = _guard(gen, cfg, Qinv, {"norm_y0": ny0, "norm_ytilde0": nyt0}, {"smallness_proxy": float(proxy)})
    rep = _run(gen, gram, y0, ytilde0, T, cfg, "dynamic", float(lam1), Qinv)
    rep.diagnostics.update(measured, cond=cond, lam1=float(lam1), c0=float(c0))
    return rep


def fit_rate(times: np.ndarray, values: np.ndarray, window: tuple[float, float] | None = None) -> float:
    """Decay rate ``r`` of a least-squares fit ``values ~ C exp(-r t)``.

    Returns ``inf`` when every value in the window is zero.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if window is not None:
        sel = (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12)
        t, v = t[sel], v[sel]
    pos = v > 0
    if not np.any(pos):
        return float("inf")
    if pos.sum() < 2:
        raise ConfigurationError("need at least two positive samples to fit a rate")
    slope = np.polyfit(t[pos], np.log(v[pos]), 1)[0]
    return float(-slope)


def decay_report(report: RunReport, lam: float, slack: float = 0.1, prefactor: float = 2.0):
    """Fitted decay rate of ``norm_y`` on ``[T/10, T]`` and envelope violations.

    Returns
    -------
    rate : float
        ``inf`` for an all-zero trajectory.
    violations : int
        Samples with ``norm_y > (1 + slack) prefactor e^{-2 lam t} norm_y(0)``.
    """
    t = report.times
    if len(t) == 0:
        raise ConfigurationError("empty report")
    if not np.any(report.norm_y > 0):
        return float("inf"), 0
    t0, T = t[0], t[-1]
    rate = fit_rate(t, report.norm_y, (t0 + (T - t0) / 10.0, T))
    env = prefactor * np.exp(-2.0 * lam * (t - t0)) * report.norm_y[0]
    violations = int(np.sum(report.norm_y > (1.0 + slack) * env))
    return rate, violations


def write_report_csv(path, report: RunReport, extra: dict | None = None):
    """Write ``t,norm_y,norm_ytilde,envelope,identity_error,z_norm,u`` (+ extra columns)."""
    cols = report.columns()
    if extra:
        cols.update(extra)
    header = list(cols)
    rows = zip(*(cols[h] for h in header))
    return write_csv(path, header, rows)
