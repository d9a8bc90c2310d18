"""Uniform mesh, skew-symmetric KdV generator and boundary trace functional.

The continuous generator is ``A w = -w''' - w'`` on ``(0, L)`` with domain
``w(0) = w(L) = 0`` and ``w'(0) = w'(L)``.  The observation is the right
boundary slope ``w'(L)``.

Construction
------------
The matching slopes make the domain look periodic, so the stencils are the
centred second-order periodic stencils on the ``N`` points ``x_0 = 0, ...,
x_{N-1}`` of the circle of length ``L``.  The Dirichlet condition is imposed
by restricting to the hyperplane

    w_{N-1} + 2 w_0 + w_1 = 0,

a smoothed pin at ``x = 0``.  The ``(1, 2, 1)`` weights are blind to the
grid sawtooth ``(-1)^i``, which any real skew circulant annihilates.  A plain
nodal pin ``w_0 = 0`` couples to that sawtooth and, for even ``N``, shifts
the whole low spectrum by O(1) (the discrete eigenvalues converge to the
wrong limit).  The smoothed pin removes the coupling and the spectrum
converges at second order for every ``N``.

For even ``N`` the sawtooth itself lies in the hyperplane and in the
kernel of the periodic operator.  It is a pure grid mode, yet it couples
strongly to the boundary trace and inflates the condition number of the
Gramian by orders of magnitude at large ``lambda``.  It is removed by a
second constraint, so the state dimension is ``N - 1`` for odd ``N`` and
``N - 2`` for even ``N``.

The state coordinates are those of an orthonormal basis ``U`` of the
constrained subspace, so ``A_h = U^T A_per U`` is skew-symmetric in the
Euclidean inner product and Euclidean norms of states equal Euclidean norms
of nodal vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError, ContractError

__all__ = [
    "Grid",
    "Generator",
    "build_grid",
    "build_generator",
    "interpolation_bound_check",
    "periodic_first_derivative",
    "periodic_third_derivative",
]


@dataclass(frozen=True)
class Grid:
    """Uniform mesh of ``(0, L)`` with ``N`` intervals.

    Attributes
    ----------
    L : float
        Domain length.
    N : int
        Number of intervals; there are ``N - 1`` interior nodes.
    h : float
        Mesh width ``L / N``.
    nodes : ndarray
        Interior nodes ``x_i = i h`` for ``i = 1, ..., N-1``.
    weights : ndarray
        Inner-product weights (uniform ``h``).
    """

    L: float
    N: int
    h: float
    nodes: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        """Dimension of the state space, ``N - 1``."""
        return self.N - 1

    def l2_norm(self, w: np.ndarray) -> float:
        """Discrete L2 norm ``sqrt(h * sum w_i^2)``."""
        return float(np.sqrt(self.h) * np.linalg.norm(w))


def build_grid(L: float, N: int) -> Grid:
    """Build the uniform grid on ``(0, L)`` with ``N`` intervals.

    Raises
    ------
    ConfigurationError
        If ``L <= 0`` or ``N < 8``.
    """
    L = float(L)
    if not np.isfinite(L) or L <= 0.0:
        raise ConfigurationError(f"domain length must be positive, got L={L}")
    if int(N) != N or N < 8:
        raise ConfigurationError(f"need an integer N >= 8, got N={N}")
    N = int(N)
    h = L / N
    nodes = h * np.arange(1, N, dtype=float)
    return Grid(L=L, N=N, h=h, nodes=nodes, weights=np.full(N - 1, h))


def periodic_first_derivative(N: int, h: float) -> np.ndarray:
    """Centred first difference on the ``N``-point circle (skew circulant)."""
    D = np.zeros((N, N))
    idx = np.arange(N)
    D[idx, (idx + 1) % N] += 0.5 / h
    D[idx, (idx - 1) % N] -= 0.5 / h
    return D


def periodic_third_derivative(N: int, h: float) -> np.ndarray:
    """Centred five-point third difference on the ``N``-point circle."""
    D = np.zeros((N, N))
    idx = np.arange(N)
    for off, c in ((-2, -1.0), (-1, 2.0), (1, -2.0), (2, 1.0)):
        D[idx, (idx + off) % N] += c / (2.0 * h**3)
    return D


def _constraint_vectors(N: int) -> list[np.ndarray]:
    c = np.zeros(N)
    c[N - 1], c[0], c[1] = 1.0, 2.0, 1.0
    out = [c / np.linalg.norm(c)]
    if N % 2 == 0:
        # the sawtooth is a null vector of every real skew circulant; it
        # carries no continuum information and is removed from the state space
        out.append((-1.0) ** np.arange(N) / np.sqrt(N))
    return out


def _pin_basis(N: int) -> np.ndarray:
    """Orthonormal basis of the nodal vectors orthogonal to the constraints.

    Successive Householder reflectors map the (mutually orthogonal)
    constraint vectors onto ``e_0, e_1, ...``; the remaining columns of
    their product span the complement.
    """
    H = np.eye(N)
    cons = _constraint_vectors(N)
    for j, c in enumerate(cons):
        c = H.T @ c  # constraint in current coordinates
        v = c.copy()
        v[j] -= 1.0
        if v @ v > 0:
            H = H - (2.0 / (v @ v)) * np.outer(H @ v, v)
    return H[:, len(cons):]


@dataclass(frozen=True)
class Generator:
    """Discrete generator, trace functional and derivative for one grid.

    Attributes
    ----------
    grid : Grid
    A : ndarray, shape (n, n)
        Skew-symmetric discrete ``-d^3/dx^3 - d/dx``; ``n`` is the state
        dimension.
    b : ndarray, shape (n,)
        Representer of ``w -> w'(L)``.  It is also the input column of the
        forced system ``y' = A y + b u``.
    D : ndarray, shape (n, n)
        Skew-symmetric first derivative in state coordinates.
    basis : ndarray, shape (N, n)
        Orthonormal map from state coordinates to nodal values on
        ``x_0, ..., x_{N-1}``.
    antisym_defect : float
        Frobenius norm of the symmetric part removed by the final
        antisymmetrization (round-off only for this construction).
    scheme_order : int
        Nominal consistency order.
    """

    grid: Grid
    A: np.ndarray = field(repr=False)
    b: np.ndarray = field(repr=False)
    D: np.ndarray = field(repr=False)
    basis: np.ndarray = field(repr=False)
    D_nodal: np.ndarray = field(repr=False)
    antisym_defect: float = 0.0
    scheme_order: int = 2

    @property
    def n(self) -> int:
        """State dimension (``N - 1`` for odd ``N``, ``N - 2`` for even ``N``)."""
        return self.A.shape[0]

    def to_nodal(self, w: np.ndarray) -> np.ndarray:
        """Nodal values at ``x_0, ..., x_{N-1}`` (trailing axes allowed)."""
        return self.basis @ w

    def from_nodal(self, values: np.ndarray) -> np.ndarray:
        """State coordinates of nodal values on ``x_0, ..., x_{N-1}``."""
        return self.basis.T @ values

    def interior_values(self, w: np.ndarray) -> np.ndarray:
        """Values at the interior nodes ``x_1, ..., x_{N-1}``."""
        return self.to_nodal(w)[1:]

    def sample(self, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """State of a function vanishing at ``x = 0`` and ``x = L``.

        ``f`` is sampled at the interior nodes and ``x_0`` takes the value
        fixed by the smoothed pin; the result is the orthogonal projection
        of these nodal values onto the state space.
        """
        inner = np.asarray(f(self.grid.nodes), dtype=float)
        full = np.empty(self.grid.N)
        full[1:] = inner
        full[0] = -0.5 * (inner[0] + inner[-1])
        return self.from_nodal(full)

    def norm(self, w: np.ndarray) -> float:
        """Discrete L2 norm of a state."""
        return self.grid.l2_norm(w)


def build_generator(grid: Grid) -> Generator:
    """Assemble the skew generator ``A_h`` and trace vector ``b_h``.

    Parameters
    ----------
    grid : Grid

    Returns
    -------
    Generator
        ``A_h`` is exactly antisymmetric; ``b_h^T w`` is the one-sided
        second-order slope ``(w_{N-2} - 4 w_{N-1}) / (2h)`` at ``x = L``.
    """
    N, h = grid.N, grid.h
    U = _pin_basis(N)
    D1 = periodic_first_derivative(N, h)
    A_per = -periodic_third_derivative(N, h) - D1
    A = U.T @ A_per @ U
    sym = 0.5 * (A + A.T)
    defect = float(np.linalg.norm(sym))
    A = 0.5 * (A - A.T)
    D = U.T @ D1 @ U
    D = 0.5 * (D - D.T)

    t = np.zeros(N)
    t[N - 1] = -2.0 / h
    t[N - 2] = 0.5 / h
    b = U.T @ t
    return Generator(
        grid=grid,
        A=A,
        b=b,
        D=D,
        basis=U,
        D_nodal=D1,
        antisym_defect=defect,
        scheme_order=2,
    )


def interpolation_bound_check(grid: Grid, w: np.ndarray, w_right: float | None = None):
    """Both sides of ``sup|w| <= ||w||^(1/2) ||w'||^(1/2)`` for ``w(0) = 0``.

    Parameters
    ----------
    grid : Grid
    w : ndarray
        Values at the interior nodes ``x_1, ..., x_{N-1}``.  The left
        boundary value is taken to be zero.
    w_right : float, optional
        Value at ``x = L``.  When given it enters the sup norm and the
        last difference; otherwise the grid function stops at ``x_{N-1}``.

    Returns
    -------
    lhs, rhs : float
        Discrete sup norm and the product of square roots of the discrete
        L2 norms of ``w`` and of its forward differences.
    """
    w = np.asarray(w, dtype=float)
    if w.shape != (grid.n,):
        raise ContractError(f"expected {grid.n} interior values, got shape {w.shape}")
    full = np.concatenate(([0.0], w) if w_right is None else ([0.0], w, [float(w_right)]))
    lhs = float(np.max(np.abs(full)))
    l2 = np.sqrt(grid.h * np.sum(full**2))
    dl2 = np.sqrt(grid.h * np.sum((np.diff(full) / grid.h) ** 2))
    return lhs, float(np.sqrt(l2 * dl2))
