"""Exponentially weighted controllability Gramian ``Q(lambda)``.

``Q`` is built two independent ways:

* quadrature of ``int_0^S e^{-2 lam s} g(s) g(s)^T ds`` where ``g(s)`` holds
  the boundary traces of the free flow started from every basis vector;
* the algebraic identity ``(A + lam I) Q + Q (lam I - A) = b b^T``, solved
  as a dense Sylvester equation.

Their agreement is the primary correctness check for both.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from ._io import atomic_write_bytes, write_json
from .discretization import Generator
from .errors import ConfigurationError, NearCriticalLengthError, NumericalError
from .propagator import PropagatorConfig, admissibility_constant

__all__ = [
    "Gramian",
    "GramianCache",
    "DEFAULT_COND_LIMIT",
    "assemble_quadrature",
    "assemble_sylvester",
    "sylvester_residual",
    "invert",
    "norm_bound_probe",
]

DEFAULT_COND_LIMIT = 1e12
SCHEME_TAG = "pinned-periodic-fd2"


@dataclass(frozen=True)
class Gramian:
    """Symmetric Gramian matrix with assembly metadata."""

    Q: np.ndarray = field(repr=False)
    lam: float
    method: str
    horizon: float | None = None
    meta: dict = field(default_factory=dict)

    def eigvalsh(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.Q)

    @property
    def lambda_min(self) -> float:
        return float(self.eigvalsh()[0])

    @property
    def lambda_max(self) -> float:
        return float(self.eigvalsh()[-1])


def _check_lambda(lam):
    if not (np.isfinite(lam) and lam > 0):
        raise ConfigurationError(f"lambda must be positive, got {lam}")


def _meta(gen: Generator, **extra) -> dict:
    m = {"L": gen.grid.L, "N": gen.grid.N, "scheme": SCHEME_TAG}
    m.update(extra)
    return m


def assemble_sylvester(gen: Generator, lam: float) -> Gramian:
    """Solve ``(A + lam I) Q + Q (lam I - A) = b b^T`` (Bartels-Stewart)."""
    _check_lambda(lam)
    n = gen.n
    eye = np.eye(n)
    rhs = np.outer(gen.b, gen.b)
    try:
        Q = sla.solve_sylvester(gen.A + lam * eye, lam * eye - gen.A, rhs)
    except (np.linalg.LinAlgError, ValueError) as exc:  # pragma: no cover - defensive
        raise NumericalError(f"Sylvester solve failed at L={gen.grid.L}, lambda={lam}: {exc}") from exc
    Q = 0.5 * (Q + Q.T)
    if not np.all(np.isfinite(Q)):
        raise NumericalError(f"Sylvester solve produced non-finite entries at L={gen.grid.L}, lambda={lam}")
    return Gramian(Q=Q, lam=float(lam), method="sylvester", meta=_meta(gen))


def sylvester_residual(gen: Generator, gram: Gramian) -> float:
    """Relative Frobenius residual of the Sylvester identity."""
    lam, Q = gram.lam, gram.Q
    bbT = np.outer(gen.b, gen.b)
    R = gen.A @ Q - Q @ gen.A + 2.0 * lam * Q - bbT
    return float(np.linalg.norm(R) / np.linalg.norm(bbT))


def quadrature_horizon(c_adm: float, lam: float, tol: float) -> float:
    """Truncation time ``S`` with tail ``e^{-2 lam S} C_adm / (1 - e^{-2 lam}) <= tol``.

    ``C_adm`` is the admissibility constant over a unit window; the geometric
    factor sums the windows ``[S + j, S + j + 1]``.
    """
    return max(1.0, np.log(c_adm / (tol * -np.expm1(-2.0 * lam))) / (2.0 * lam))


def assemble_quadrature(
    gen: Generator,
    lam: float,
    tol: float = 1e-10,
    cfg: PropagatorConfig | None = None,
    c_adm: float | None = None,
    nodes: int = 12,
) -> Gramian:
    """Quadrature of ``int_0^S e^{-2 lam s} g(s) g(s)^T ds`` with ``g(s) = e^{-sA} b``.

    The row of traces of all basis states at time ``s`` is
    ``b^T e^{sA} = g(s)^T``.  The integrand oscillates with the largest
    eigenvalues of ``A`` (of order ``h^-3``), far beyond what a fixed step
    can follow, so the integral is built by interval doubling:

    * ``Q_tau`` on a base window ``[0, tau]`` with ``tau ||A|| <= 1/2`` by
      Gauss-Legendre quadrature;
    * ``Q_{2 tau} = Q_tau + e^{-2 lam tau} E Q_tau E^T`` with
      ``E = e^{-tau A}``, squared at every doubling.

    Doubling stops once ``tau`` passes the truncation horizon ``S``.

    Parameters
    ----------
    gen : Generator
    lam : float
    tol : float
        Absolute tail tolerance per unit state for the truncation horizon.
    cfg : PropagatorConfig, optional
        Time step for the admissibility measurement.
    c_adm : float, optional
        Unit-window admissibility constant; measured when omitted.
    nodes : int
        Gauss-Legendre nodes on the base window.
    """
    _check_lambda(lam)
    cfg = cfg or PropagatorConfig()
    if c_adm is None:
        c_adm = admissibility_constant(gen, 1.0, samples=50, seed=0, cfg=cfg)
    S = quadrature_horizon(c_adm, lam, tol)
    norm_a = max(np.linalg.norm(gen.A, 2), 1.0)
    doublings = int(np.ceil(np.log2(S * norm_a / 0.5)))
    tau = S / 2.0**doublings
    x, w = np.polynomial.legendre.leggauss(nodes)
    sig = 0.5 * tau * (x + 1.0)
    wts = 0.5 * tau * w * np.exp(-2.0 * lam * sig)
    G = np.column_stack([sla.expm(-s * gen.A) @ gen.b for s in sig])
    Q = (G * wts) @ G.T
    E = sla.expm(-tau * gen.A)
    for _ in range(doublings):
        Q = Q + np.exp(-2.0 * lam * tau) * (E @ Q @ E.T)
        Q = 0.5 * (Q + Q.T)
        E = E @ E
        tau *= 2.0
    return Gramian(
        Q=Q,
        lam=float(lam),
        method="quadrature",
        horizon=float(tau),
        meta=_meta(gen, base_window=tau / 2.0**doublings, doublings=doublings, nodes=nodes,
                   dt=cfg.dt, solver_tol=cfg.solver_tol, tol=tol, c_adm=c_adm),
    )


def invert(gram: Gramian, cond_limit: float = DEFAULT_COND_LIMIT):
    """Cholesky inverse of ``Q`` with its 2-norm condition number.

    Returns
    -------
    Qinv : ndarray
    cond : float

    Raises
    ------
    NearCriticalLengthError
        If ``Q`` is not positive definite or ``cond > cond_limit``.  At a
        critical length (or when the grid is too coarse) the Gramian
        degenerates and lands here.
    """
    Q = gram.Q
    if not np.allclose(Q, Q.T, rtol=0, atol=1e-12 * np.linalg.norm(Q)):
        raise ConfigurationError("Gramian is not symmetric")
    ev = np.linalg.eigvalsh(Q)
    cond = float(ev[-1] / ev[0]) if ev[0] > 0 else float("inf")
    L = gram.meta.get("L")
    if cond > cond_limit:
        raise NearCriticalLengthError(
            f"Gramian condition number {cond:.3e} exceeds limit {cond_limit:.3e} "
            f"(L={L}, lambda={gram.lam}); L may be near a critical length or the grid too coarse",
            cond=cond,
        )
    try:
        c = sla.cho_factor(Q, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NearCriticalLengthError(f"Gramian not positive definite (L={L})", cond=cond) from exc
    Qinv = sla.cho_solve(c, np.eye(Q.shape[0]))
    return 0.5 * (Qinv + Qinv.T), cond


def norm_bound_probe(gen: Generator, lambdas) -> dict:
    """Extreme eigenvalues of ``Q(lambda)`` along ``lambdas``.

    Also fits ``log(1/lambda_min)`` against ``lambda^(1/3)``; the slope and
    residual are exploratory only.
    """
    rows = []
    for lam in lambdas:
        ev = assemble_sylvester(gen, lam).eigvalsh()
        rows.append((float(lam), float(ev[0]), float(ev[-1])))
    table = np.array(rows)
    out = {"table": rows, "slope": float("nan"), "fit_residual": float("nan")}
    if len(rows) >= 2 and np.all(table[:, 1] > 0):
        X = table[:, 0] ** (1.0 / 3.0)
        Y = np.log(1.0 / table[:, 1])
        coef, res, *_ = np.linalg.lstsq(np.column_stack([X, np.ones_like(X)]), Y, rcond=None)
        out["slope"] = float(coef[0])
        out["fit_residual"] = float(np.sqrt(res[0] / len(rows))) if res.size else 0.0
    return out


class GramianCache:
    """On-disk cache: ``<hash>.meta.json`` plus ``<hash>.q.bin``.

    The binary file holds the ``n^2`` entries (``n`` the state dimension) row-major as little-endian
    float64.  Loading re-checks every metadata field against the request.
    """

    def __init__(self, root):
        self.root = Path(root)

    @staticmethod
    def key_fields(gen: Generator, lam: float, method: str, **params) -> dict:
        d = {"L": float(gen.grid.L), "N": int(gen.grid.N), "n": int(gen.n), "lambda": float(lam), "method": method, "scheme": SCHEME_TAG}
        d.update({k: (float(v) if isinstance(v, (int, float, np.floating)) else v) for k, v in params.items()})
        return d

    @staticmethod
    def digest(fields: dict) -> str:
        blob = json.dumps(fields, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:24]

    def paths(self, fields: dict):
        h = self.digest(fields)
        return self.root / f"{h}.meta.json", self.root / f"{h}.q.bin"

    def save(self, gram: Gramian, fields: dict) -> str:
        meta_path, bin_path = self.paths(fields)
        q = np.ascontiguousarray(gram.Q, dtype="<f8")
        atomic_write_bytes(bin_path, q.tobytes(order="C"))
        meta = dict(fields)
        meta["horizon"] = gram.horizon
        meta["creation"] = {k: v for k, v in gram.meta.items() if k not in fields}
        write_json(meta_path, meta)
        return self.digest(fields)

    def load(self, fields: dict) -> Gramian | None:
        meta_path, bin_path = self.paths(fields)
        if not (meta_path.exists() and bin_path.exists()):
            return None
        meta = json.loads(meta_path.read_text())
        for k, v in fields.items():
            if meta.get(k) != v:
                return None
        n = int(fields["n"])
        raw = bin_path.read_bytes()
        if len(raw) != 8 * n * n:
            return None
        Q = np.frombuffer(raw, dtype="<f8").reshape(n, n).astype(float)
        return Gramian(
            Q=Q,
            lam=float(fields["lambda"]),
            method=str(fields["method"]),
            horizon=meta.get("horizon"),
            meta={"L": fields["L"], "N": fields["N"], **meta.get("creation", {})},
        )

    def get_or_build(self, gen: Generator, lam: float, method: str = "sylvester", builder=None, **params) -> Gramian:
        fields = self.key_fields(gen, lam, method, **params)
        g = self.load(fields)
        if g is None:
            g = builder() if builder is not None else assemble_sylvester(gen, lam)
            self.save(g, fields)
        return g


def default_cache_dir() -> Path | None:
    env = os.environ.get("KDVSTAB_CACHE")
    return Path(env) if env else None
