"""Critical lengths and controllability diagnostics.

The critical set is ``{2 pi sqrt((k^2 + k l + l^2) / 3) : k, l >= 1}``.  At
these lengths some eigenmode of the free flow produces no boundary slope,
the Gramian loses definiteness and the feedback cannot be built.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._io import write_csv
from .discretization import build_generator, build_grid
from .errors import ConfigurationError, KdvStabError, NumericalError
from .gramian import assemble_sylvester

__all__ = [
    "CriticalSet",
    "ScanRow",
    "enumerate_critical_lengths",
    "is_critical",
    "conditioning_scan",
    "uncontrollable_mode_probe",
    "write_scan_csv",
    "SCAN_COLUMNS",
]

SCAN_COLUMNS = ("L", "lambda_min", "lambda_max", "cond", "is_near_critical", "nearest_critical_L")


@dataclass(frozen=True)
class CriticalSet:
    """Sorted critical lengths with one generating pair ``(k, l)``, ``k <= l``, each."""

    entries: tuple[tuple[int, int, float], ...]
    k_max: int

    @property
    def lengths(self) -> np.ndarray:
        return np.array([e[2] for e in self.entries])

    def __len__(self) -> int:
        return len(self.entries)


def critical_length(k: int, l: int) -> float:  # noqa: E741
    return float(2.0 * np.pi * np.sqrt((k * k + k * l + l * l) / 3.0))


def enumerate_critical_lengths(k_max: int) -> CriticalSet:
    """All distinct critical lengths with ``1 <= k <= l <= k_max``, sorted."""
    if int(k_max) != k_max or k_max < 1:
        raise ConfigurationError(f"k_max must be a positive integer, got {k_max}")
    k_max = int(k_max)
    raw = sorted(
        ((k, l, critical_length(k, l)) for k in range(1, k_max + 1) for l in range(k, k_max + 1)),  # noqa: E741
        key=lambda e: (e[2], e[0]),
    )
    out: list[tuple[int, int, float]] = []
    for e in raw:
        if out and abs(e[2] - out[-1][2]) <= 1e-12:
            continue
        out.append(e)
    return CriticalSet(entries=tuple(out), k_max=k_max)


def is_critical(L: float, k_max: int = 10, tol: float = 1e-9):
    """Distance from ``L`` to the critical set.

    Returns
    -------
    flag : bool
        ``distance <= tol``.
    nearest : float
    distance : float
    """
    if not L > 0:
        raise ConfigurationError(f"L must be positive, got {L}")
    lengths = enumerate_critical_lengths(k_max).lengths
    i = int(np.argmin(np.abs(lengths - L)))
    d = float(abs(lengths[i] - L))
    return d <= tol, float(lengths[i]), d


@dataclass(frozen=True)
class ScanRow:
    L: float
    lambda_min: float
    lambda_max: float
    cond: float
    is_near_critical: bool
    nearest_critical_L: float
    error: str = ""

    def as_tuple(self):
        return (self.L, self.lambda_min, self.lambda_max, self.cond, self.is_near_critical, self.nearest_critical_L)


def _scan_point(L, lam, N, tol, k_max):
    flag, nearest, _ = is_critical(L, k_max, tol)
    try:
        ev = assemble_sylvester(build_generator(build_grid(L, N)), lam).eigvalsh()
    except (KdvStabError, np.linalg.LinAlgError) as exc:
        nan = float("nan")
        return ScanRow(float(L), nan, nan, nan, flag, nearest, error=str(exc))
    cond = float(ev[-1] / ev[0]) if ev[0] > 0 else float("inf")
    return ScanRow(float(L), float(ev[0]), float(ev[-1]), cond, flag, nearest)


def conditioning_scan(L_range, lam: float = 1.0, N: int = 64, points: int = 31, workers: int = 1, k_max: int = 10) -> list[ScanRow]:
    """Extreme Gramian eigenvalues on an even grid of lengths.

    A point is flagged near-critical when a critical length lies within half
    a grid spacing of it.  Assembly failures are recorded as NaN rows and
    the scan goes on.  Rows are returned in increasing ``L`` for any
    ``workers``.
    """
    lo, hi = (float(v) for v in L_range)
    if not (0 < lo <= hi):
        raise ConfigurationError(f"need 0 < L_lo <= L_hi, got {L_range}")
    if points < 1:
        raise ConfigurationError("points must be >= 1")
    Ls = np.linspace(lo, hi, points) if points > 1 else np.array([lo])
    tol = 0.5 * (hi - lo) / (points - 1) if points > 1 else 1e-9
    args = [(L, lam, N, tol, k_max) for L in Ls]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda a: _scan_point(*a), args))
    return [_scan_point(*a) for a in args]


def write_scan_csv(path, rows: list[ScanRow]):
    return write_csv(path, SCAN_COLUMNS, (r.as_tuple() for r in rows))


def uncontrollable_mode_probe(L: float, N: int = 64) -> dict:
    """Per-mode controllability indicators of ``(A_h, b_h)``.

    For every eigenvalue ``mu`` of ``A_h`` two quantities are tabulated:

    * ``coupling``: ``|b^* v|`` for the unit eigenvector ``v``;
    * ``hautus``: ``sigma_min([A - mu I, b])``, which vanishes exactly when
      some eigenvector with eigenvalue ``mu`` has zero coupling.

    The eigenvalues of the skew matrix come in nearly degenerate pairs near
    critical lengths, and the eigensolver may return any rotation inside
    such a pair, which spreads the defect over both couplings.  The Hautus
    value does not depend on that choice, so it serves as the indicator.

    Returns
    -------
    dict
        ``eigenvalues`` (complex), ``coupling``, ``hautus``, ``min``
        (smallest Hautus value), ``median``, ``indicator`` (their ratio),
        ``argmin`` and ``max_real_part``.
    """
    gen = build_generator(build_grid(L, N))
    A, b = gen.A, gen.b
    n = gen.n
    try:
        w, V = np.linalg.eigh(1j * A)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - defensive
        raise NumericalError(f"eigensolver failed at L={L}, N={N}") from exc
    mu = -1j * w
    coupling = np.abs(V.conj().T @ b)
    hautus = np.empty(n)
    eye = np.eye(n)
    for i in range(n):
        M = np.hstack([A - mu[i] * eye, b[:, None].astype(complex)])
        hautus[i] = np.linalg.svd(M, compute_uv=False)[-1]
    med = float(np.median(hautus))
    i = int(np.argmin(hautus))
    ev = np.linalg.eigvals(A)
    return {
        "L": float(L),
        "N": int(N),
        "eigenvalues": mu,
        "coupling": coupling,
        "hautus": hautus,
        "min": float(hautus[i]),
        "median": med,
        "indicator": float(hautus[i] / med),
        "argmin": i,
        "max_real_part": float(np.max(np.abs(ev.real))),
        "norm_A": float(np.linalg.norm(A, 2)),
    }
