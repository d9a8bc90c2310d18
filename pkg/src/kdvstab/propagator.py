"""Trapezoidal (Crank-Nicolson) time stepping of the linear KdV flow.

For a skew-symmetric generator the trapezoidal map is the Cayley transform,
which is orthogonal, so the undamped flow conserves the Euclidean norm up to
round-off.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla

from ._io import write_csv
from .discretization import Generator
from .errors import ConfigurationError, ContractError

__all__ = [
    "PropagatorConfig",
    "TraceSeries",
    "Trajectory",
    "LinearStepper",
    "TestFunction",
    "default_dt",
    "step_count",
    "step_linear",
    "propagate",
    "admissibility_constant",
    "weak_form_residual",
    "separable_test_function",
    "standard_test_functions",
    "write_trajectory_csv",
]


def default_dt(h: float, lam: float | None = None) -> float:
    """``min(h, 1/(2 lam), 1e-2)``; the middle term is dropped when ``lam`` is None."""
    dt = min(h, 1e-2)
    if lam is not None and lam > 0:
        dt = min(dt, 1.0 / (2.0 * lam))
    return dt


def step_count(T: float, dt: float) -> tuple[int, float]:
    """Number of steps covering ``[0, T]`` and the step actually used.

    ``dt`` is shrunk slightly when ``T`` is not an integer multiple of it.
    """
    if T <= 0 or dt <= 0:
        raise ConfigurationError(f"need T > 0 and dt > 0, got T={T}, dt={dt}")
    k = max(1, int(np.ceil(T / dt - 1e-9)))
    return k, T / k


@dataclass(frozen=True)
class PropagatorConfig:
    """Time-stepping parameters.

    Attributes
    ----------
    dt : float
        Time step.
    scheme : str
        Only ``"trapezoidal"`` is available.
    nonlinear_mode : str
        ``"off"`` or ``"explicit-skew-split"``; read by the closed-loop solver.
    solver_tol : float
        Tolerance reported with every linear solve.  Solves are direct, so
        this is a bound the results are checked against, not a stopping rule.
    """

    dt: float = 1e-3
    scheme: str = "trapezoidal"
    nonlinear_mode: str = "off"
    solver_tol: float = 1e-12

    def __post_init__(self):
        if not (self.dt > 0 and np.isfinite(self.dt)):
            raise ConfigurationError(f"dt must be positive, got {self.dt}")
        if self.scheme != "trapezoidal":
            raise ConfigurationError(f"unknown scheme {self.scheme!r}")
        if self.nonlinear_mode not in ("off", "explicit-skew-split"):
            raise ConfigurationError(f"unknown nonlinear_mode {self.nonlinear_mode!r}")
        if self.solver_tol < np.finfo(float).eps:
            raise ConfigurationError("solver_tol below machine epsilon")


@dataclass(frozen=True)
class TraceSeries:
    """Boundary slope samples ``b^T xi(t_k)``.

    ``midpoints`` holds step averages ``(values[k] + values[k+1]) / 2``; these
    are the second-order samples used for time quadrature.
    """

    times: np.ndarray
    values: np.ndarray
    midpoints: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.times.shape[0] != self.values.shape[0]:
            raise ContractError("times and values differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise ContractError("times must be strictly increasing")


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray = field(repr=False)

    @property
    def initial(self) -> np.ndarray:
        return self.states[0]

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


class LinearStepper:
    """Factored trapezoidal step for ``y' = (A - damping I) y + b u + f``.

    Parameters
    ----------
    gen : Generator
    dt : float
    damping : float
        The coefficient ``2 lambda`` (zero for the free flow).
    """

    def __init__(self, gen: Generator, dt: float, damping: float = 0.0):
        if damping < 0:
            raise ConfigurationError("damping must be non-negative")
        self.gen = gen
        self.dt = float(dt)
        self.damping = float(damping)
        n = gen.n
        M = gen.A - self.damping * np.eye(n)
        self._rhs = np.eye(n) + 0.5 * self.dt * M
        self._lu = sla.lu_factor(np.eye(n) - 0.5 * self.dt * M)

    def step(self, y: np.ndarray, u=0.0, source: np.ndarray | None = None) -> np.ndarray:
        """Advance one step; ``u`` and ``source`` are step-averaged values."""
        rhs = self._rhs @ y
        if np.any(u != 0):
            u = np.asarray(u, dtype=float)
            rhs = rhs + self.dt * (np.multiply.outer(self.gen.b, u) if u.ndim else self.gen.b * u)
        if source is not None:
            rhs = rhs + self.dt * source
        return sla.lu_solve(self._lu, rhs)


def step_linear(
    gen: Generator,
    y: np.ndarray,
    dt: float,
    damping: float = 0.0,
    u: float = 0.0,
    source: np.ndarray | None = None,
) -> np.ndarray:
    """One trapezoidal step.  Loops should reuse a :class:`LinearStepper`."""
    y = np.asarray(y, dtype=float)
    if y.shape[0] != gen.n:
        raise ContractError(f"state has {y.shape[0]} rows, generator expects {gen.n}")
    return LinearStepper(gen, dt, damping).step(y, u, source)


def propagate(gen: Generator, z0: np.ndarray, T: float, cfg: PropagatorConfig | None = None):
    """Free evolution ``xi' = A xi`` from ``z0`` over ``[0, T]``.

    Returns
    -------
    trajectory : Trajectory
        Snapshots at every step, shape ``(steps + 1, N - 1)``.
    traces : TraceSeries
        ``b^T xi(t_k)`` and the step-averaged samples.
    """
    cfg = cfg or PropagatorConfig()
    z0 = np.asarray(z0, dtype=float)
    if z0.shape != (gen.n,):
        raise ContractError(f"z0 must have shape ({gen.n},), got {z0.shape}")
    k, dt = step_count(T, cfg.dt)
    stepper = LinearStepper(gen, dt)
    states = np.empty((k + 1, gen.n))
    states[0] = z0
    for i in range(k):
        states[i + 1] = stepper.step(states[i])
    times = dt * np.arange(k + 1)
    values = states @ gen.b
    traces = TraceSeries(times, values, 0.5 * (values[1:] + values[:-1]))
    return Trajectory(times, states), traces


def admissibility_constant(
    gen: Generator,
    T: float,
    samples: int = 50,
    seed: int = 0,
    cfg: PropagatorConfig | None = None,
) -> float:
    """Largest ``int_0^T |b^T e^{sA} z|^2 ds`` over random unit ``z``.

    All samples are propagated together; the integral uses the step-averaged
    trace samples (midpoint rule).
    """
    cfg = cfg or PropagatorConfig()
    if samples < 1:
        raise ConfigurationError("samples must be positive")
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((gen.n, samples))
    Z /= np.linalg.norm(Z, axis=0)
    k, dt = step_count(T, cfg.dt)
    stepper = LinearStepper(gen, dt)
    g_prev = gen.b @ Z
    acc = np.zeros(samples)
    for _ in range(k):
        Z = stepper.step(Z)
        g = gen.b @ Z
        acc += dt * (0.5 * (g + g_prev)) ** 2
        g_prev = g
    return float(acc.max())


@dataclass(frozen=True)
class TestFunction:
    """Space-time test function with the derivatives the weak form needs.

    All callables take ``(t, x)`` and broadcast.
    """

    __test__ = False  # not a pytest class

    phi: Callable
    phi_t: Callable
    phi_x: Callable
    phi_xxx: Callable
    name: str = "phi"

    def scaled(self, c: float) -> "TestFunction":
        return TestFunction(
            lambda t, x: c * self.phi(t, x),
            lambda t, x: c * self.phi_t(t, x),
            lambda t, x: c * self.phi_x(t, x),
            lambda t, x: c * self.phi_xxx(t, x),
            name=f"{c}*{self.name}",
        )


def separable_test_function(T: float, L: float, k: int = 1, kind: str = "sin") -> TestFunction:
    """``phi = (T - t)^2 psi(x)`` with ``psi`` a sine or ``1 - cos`` of wavenumber ``k``.

    Both spatial profiles vanish at ``0`` and ``L`` and have equal slopes
    there, and ``phi(T, .) = 0``.
    """
    w = 2.0 * np.pi * k / L
    if kind == "sin":
        psi = lambda x: np.sin(w * x)  # noqa: E731
        dpsi = lambda x: w * np.cos(w * x)  # noqa: E731
        d3psi = lambda x: -(w**3) * np.cos(w * x)  # noqa: E731
    elif kind == "cos":
        psi = lambda x: 1.0 - np.cos(w * x)  # noqa: E731
        dpsi = lambda x: w * np.sin(w * x)  # noqa: E731
        d3psi = lambda x: -(w**3) * np.sin(w * x)  # noqa: E731
    else:
        raise ConfigurationError(f"unknown test profile {kind!r}")
    return TestFunction(
        phi=lambda t, x: (T - t) ** 2 * psi(x),
        phi_t=lambda t, x: -2.0 * (T - t) * psi(x),
        phi_x=lambda t, x: (T - t) ** 2 * dpsi(x),
        phi_xxx=lambda t, x: (T - t) ** 2 * d3psi(x),
        name=f"{kind}{k}",
    )


def standard_test_functions(T: float, L: float) -> list[TestFunction]:
    return [
        separable_test_function(T, L, 1, "sin"),
        separable_test_function(T, L, 1, "cos"),
        separable_test_function(T, L, 2, "sin"),
    ]


def _check_test_function(tf: TestFunction, times: np.ndarray, L: float, nodes: np.ndarray):
    T = times[-1]
    scale = max(1.0, float(np.max(np.abs(tf.phi(times[:, None], nodes[None, :])))))
    scale_x = max(1.0, float(np.max(np.abs(tf.phi_x(times[:, None], nodes[None, :])))))
    tol = 1e-9
    if np.max(np.abs(tf.phi(T, nodes))) > tol * scale:
        raise ContractError(f"test function {tf.name} does not vanish at the final time")
    if max(np.max(np.abs(tf.phi(times, 0.0))), np.max(np.abs(tf.phi(times, L)))) > tol * scale:
        raise ContractError(f"test function {tf.name} does not vanish at the endpoints")
    if np.max(np.abs(tf.phi_x(times, L) - tf.phi_x(times, 0.0))) > tol * scale_x:
        raise ContractError(f"test function {tf.name} has unequal endpoint slopes")


def weak_form_residual(
    gen: Generator,
    trajectory: Trajectory,
    testfn: TestFunction,
    u: Sequence[float] | None = None,
    f: np.ndarray | None = None,
    damping: float = 0.0,
) -> float:
    """Defect of the weak formulation of the forced linear problem.

    Evaluates, with trapezoidal quadrature in ``x`` and ``t``,

        int int (f - m y) phi + int y0 phi(0, .) + int u phi_x(., L)
            + int int y (phi_t + phi_x + phi_xxx)

    and returns its absolute value.  ``u`` is the grid-unit input series
    (sampled on ``trajectory.times``); the boundary jump it produces is
    ``h u``.  ``f`` holds source states per time sample, ``m`` is ``damping``.
    """
    grid = gen.grid
    t = np.asarray(trajectory.times, dtype=float)
    x = grid.nodes
    _check_test_function(testfn, t, grid.L, x)
    Y = gen.interior_values(np.asarray(trajectory.states).T).T  # (time, node)
    tt, xx = t[:, None], x[None, :]
    lhs_density = -damping * Y * testfn.phi(tt, xx)
    if f is not None:
        F = gen.interior_values(np.asarray(f).T).T
        lhs_density = lhs_density + F * testfn.phi(tt, xx)
    rhs_density = -Y * (testfn.phi_t(tt, xx) + testfn.phi_x(tt, xx) + testfn.phi_xxx(tt, xx))
    space = lambda M: grid.h * M.sum(axis=1)  # noqa: E731  (endpoint values are zero)
    lhs = np.trapezoid(space(lhs_density), t) + grid.h * np.sum(Y[0] * testfn.phi(t[0], x))
    if u is not None:
        u = np.asarray(u, dtype=float)
        lhs += np.trapezoid(grid.h * u * testfn.phi_x(t, grid.L), t)
    rhs = np.trapezoid(space(rhs_density), t)
    return float(abs(lhs - rhs))


def write_trajectory_csv(path, gen: Generator, trajectory: Trajectory):
    """CSV with header ``t,x_1,...,x_{N-1}`` holding interior nodal values."""
    header = ["t"] + [f"x_{i}" for i in range(1, gen.grid.N)]
    values = gen.interior_values(np.asarray(trajectory.states).T).T
    rows = (np.concatenate(([tk], v)) for tk, v in zip(trajectory.times, values))
    return write_csv(path, header, rows)
