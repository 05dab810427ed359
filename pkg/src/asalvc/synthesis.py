"""Weight matrix ``phi = A^-1`` and diagonal metric ``L >= A``.

The diagonal metric is the solution of ``min tr(L) s.t. diag(L) - A >= 0``,
found here with a log-det barrier (interior-point) Newton method.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import LinAlgError, cholesky, eigh

from .network import IncidenceDecomposition, NetworkCase

log = logging.getLogger(__name__)


class SynthesisError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhiModel:
    """Symmetric positive-definite voltage weight.

    When built by :func:`phi_from_A` the matrix is held in the factored form
    ``M X^-1 M^T`` so that products need no solves.
    """

    matrix: NDArray[np.float64]
    E: NDArray[np.float64]
    M: NDArray[np.float64] | None = None
    x_inv: NDArray[np.float64] | None = None
    _inverse_of: dict = field(default_factory=dict, repr=False, compare=False)

    def apply(self, v) -> NDArray[np.float64]:
        if self.M is not None:
            return self.M @ (self.x_inv * (self.M.T @ v))
        return self.matrix @ v

    def is_inverse_of(self, model) -> bool:
        """True when this weight equals ``model.A^-1`` (checked once per model)."""
        if self.M is None:
            return False
        key = id(model.A)
        hit = self._inverse_of.get(key)
        if hit is None or hit[0] is not model.A:
            n = model.A.shape[0]
            ok = model.A.shape == self.matrix.shape and np.allclose(
                self.matrix @ model.A, np.eye(n), atol=1e-9
            )
            hit = (model.A, bool(ok))
            self._inverse_of[key] = hit
        return hit[1]

    @property
    def E_norm(self) -> float:
        return float(np.linalg.norm(self.E, 2)) if self.E.size else 0.0

    @classmethod
    def from_matrix(cls, phi) -> "PhiModel":
        phi = np.atleast_2d(np.asarray(phi, dtype=float))
        if not np.allclose(phi, phi.T, rtol=1e-12, atol=0):
            raise ValueError("phi must be symmetric")
        try:
            E = cholesky(phi, lower=False)
        except LinAlgError as exc:
            raise ValueError("phi must be positive definite") from exc
        return cls(matrix=phi, E=E)


def phi_from_A(case: NetworkCase, inc: IncidenceDecomposition) -> PhiModel:
    """``phi = A^-1 = M X^-1 M^T`` with its upper Cholesky factor ``E``."""
    x_inv = 1.0 / case.x
    M = np.array(inc.M)
    phi = M @ (x_inv[:, None] * M.T)
    phi = 0.5 * (phi + phi.T)
    try:
        E = cholesky(phi, lower=False)
    except LinAlgError as exc:
        raise SynthesisError(f"phi factorization failed: {exc}") from exc
    return PhiModel(matrix=phi, E=E, M=M, x_inv=x_inv)


@dataclass(frozen=True)
class LDiag:
    values: NDArray[np.float64]
    provenance: str = "optimized"
    min_eig: float = float("nan")

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if np.any(v <= 0):
            raise ValueError("L entries must be positive")
        object.__setattr__(self, "values", v)

    @property
    def trace(self) -> float:
        return float(self.values.sum())

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


class PsdCheck(NamedTuple):
    ok: bool
    min_eig: float


def _as_matrix(L) -> NDArray[np.float64]:
    if isinstance(L, LDiag):
        return np.diag(L.values)
    L = np.asarray(L, dtype=float)
    return np.diag(L) if L.ndim == 1 else L


def verify_psd(L, A) -> PsdCheck:
    """Check ``L - A >= 0`` up to ``1e-9 ||A||_2``; reports the minimum eigenvalue."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    D = _as_matrix(L) - A
    D = 0.5 * (D + D.T)
    eps = 1e-9 * np.linalg.norm(A, 2)
    try:
        cholesky(D + eps * np.eye(len(D)), lower=False)
        ok = True
    except LinAlgError:
        ok = False
    lam = float(np.linalg.eigvalsh(D)[0]) if len(D) else 0.0
    return PsdCheck(ok, lam)


def diag_dominant_seed(A) -> LDiag:
    """Row absolute sums: ``L - A`` is then diagonally dominant, hence PSD."""
    A = np.asarray(A, dtype=float)
    L = np.abs(A).sum(axis=1)
    return LDiag(L, provenance="seed", min_eig=verify_psd(L, A).min_eig)


def _is_pd(S) -> bool:
    try:
        cholesky(S, lower=False)
    except LinAlgError:
        return False
    return True


def _barrier_L(A, gap_tol, max_newton=500):
    """Central path of ``min t 1^T L - log det(diag(L) - A)`` by damped Newton."""
    n = len(A)
    L = np.abs(A).sum(axis=1) * (1.0 + 1e-3) + 1e-6 * np.max(np.diag(A))
    t = n / L.sum()
    steps = 0
    while True:
        for _ in range(100):
            S = np.diag(L) - A
            Si = np.linalg.inv(S)
            Si = 0.5 * (Si + Si.T)
            g = t - np.diag(Si)
            step = -np.linalg.solve(Si * Si, g)
            dec2 = float(-g @ step)
            steps += 1
            if dec2 < 1e-12 or steps > max_newton:
                break
            obj = t * L.sum() - np.linalg.slogdet(S)[1]
            a = 1.0
            while a > 1e-14:
                Ln = L + a * step
                Sn = np.diag(Ln) - A
                if _is_pd(Sn) and t * Ln.sum() - np.linalg.slogdet(Sn)[1] <= obj - 0.25 * a * dec2:
                    break
                a *= 0.5
            L = Ln
        if n / t <= gap_tol:
            return L, n / t, steps
        if steps > max_newton:
            raise SynthesisError(f"barrier method stalled at duality gap {n / t:.2e}")
        t *= 8.0


def solve_trace_min_L(A, tol: float = 1e-8) -> LDiag:
    """Minimum-trace diagonal ``L`` with ``L >= A``.

    Follows the central path of the log-det barrier until the duality gap
    ``N / t`` is below ``tol ||A||_2``; iterates stay strictly feasible. The
    result is scaled by the smallest factor that keeps it feasible under
    rounding and re-certified with :func:`verify_psd`.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    A = 0.5 * (A + A.T)
    n = len(A)
    if np.any(np.diag(A) <= 0):
        raise SynthesisError("A must have a positive diagonal")
    if n == 1:
        L = np.diag(A).copy()
    else:
        L, gap, steps = _barrier_L(A, tol * float(np.linalg.norm(A, 2)))
        log.debug("trace-min L: %d Newton steps, gap bound %.2e", steps, gap)

    s = float(eigh(A, np.diag(L), eigvals_only=True, subset_by_index=[n - 1, n - 1])[0])
    if s > 1.0:
        L = L * s * (1.0 + 4 * np.finfo(float).eps)
    # the row-sum seed is feasible; for entrywise nonnegative A it is optimal
    # (X = 11^T is dual feasible with value 1^T A 1), so keep the better one
    seed = np.abs(A).sum(axis=1)
    if seed.sum() <= L.sum() and verify_psd(seed, A).ok:
        L = seed
    check = verify_psd(L, A)
    if not check.ok:
        raise SynthesisError(f"synthesized L failed certification (min eig {check.min_eig:.3e})")
    return LDiag(L, provenance="optimized", min_eig=check.min_eig)
