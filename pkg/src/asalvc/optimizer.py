"""Generalized fast gradient method on box-constrained quadratics.

The problem is ``min f(q) = 0.5 ||A q + V_par - V_r||_phi^2`` over a VAr box.
A diagonal metric ``L >= A phi A`` replaces the scalar Lipschitz constant,
so the proximal step is a per-coordinate clamp.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .lindistflow import ExogenousState, SensitivityModel, v_par
from .synthesis import LDiag, PhiModel

log = logging.getLogger(__name__)


class OracleError(RuntimeError):
    pass


@dataclass
class BoxQP:
    """Voltage-regulation quadratic over a VAr box."""

    model: SensitivityModel
    phi: PhiModel
    vpar: NDArray[np.float64]
    lo: NDArray[np.float64]
    hi: NDArray[np.float64]
    V_r: NDArray[np.float64] | float = 1.0
    _H: NDArray[np.float64] | None = field(default=None, repr=False)

    def __post_init__(self):
        n = self.model.n_bus
        self.vpar = np.asarray(self.vpar, dtype=float)
        self.lo = np.broadcast_to(np.asarray(self.lo, dtype=float), (n,)).copy()
        self.hi = np.broadcast_to(np.asarray(self.hi, dtype=float), (n,)).copy()
        self.V_r = np.broadcast_to(np.asarray(self.V_r, dtype=float), (n,)).copy()
        if np.any(self.lo > self.hi):
            raise ValueError("lower bound exceeds upper bound")
        self._local = self.phi.is_inverse_of(self.model)

    @classmethod
    def from_case(cls, case, model, phi, d: ExogenousState | None = None, V_r=1.0, bounds=None):
        d = d or ExogenousState.from_case(case)
        lo, hi = bounds if bounds is not None else case.var_limits()
        return cls(model=model, phi=phi, vpar=v_par(model, d), lo=lo, hi=hi, V_r=V_r)

    @property
    def n(self) -> int:
        return self.model.n_bus

    @property
    def hessian(self) -> NDArray[np.float64]:
        """``A phi A`` (equal to ``A`` when ``phi = A^-1``)."""
        if self._H is None:
            A = self.model.A
            H = A if self._local else A @ self.phi.matrix @ A
            self._H = 0.5 * (H + H.T)
        return self._H

    def voltage(self, q) -> NDArray[np.float64]:
        return self.model.A @ q + self.vpar

    def f(self, q) -> float:
        e = self.voltage(q) - self.V_r
        return 0.5 * float(e @ self.phi.apply(e))

    def grad(self, q) -> NDArray[np.float64]:
        e = self.voltage(q) - self.V_r
        if self._local:
            return e
        return self.model.A @ self.phi.apply(e)

    def clamp(self, q) -> NDArray[np.float64]:
        return np.minimum(np.maximum(q, self.lo), self.hi)

    def kkt_residual(self, q) -> float:
        """Natural residual ``||q - clamp(q - grad f(q))||_inf``."""
        q = np.asarray(q, dtype=float)
        if self.n == 0:
            return 0.0
        return float(np.max(np.abs(q - self.clamp(q - self.grad(q)))))


def _lvals(L) -> NDArray[np.float64]:
    return L.values if isinstance(L, LDiag) else np.asarray(L, dtype=float)


def approx_model(problem: BoxQP, L, q, y) -> float:
    """Separable upper model ``f(y) + <grad f(y), q - y> + 0.5 ||q - y||_L^2``."""
    s = np.asarray(q) - np.asarray(y)
    return problem.f(y) + float(problem.grad(y) @ s) + 0.5 * float(s @ (_lvals(L) * s))


def p_L_step(problem: BoxQP, L, y) -> NDArray[np.float64]:
    """Minimizer of the separable model: ``clamp(y - grad f(y) / L)``."""
    y = np.asarray(y, dtype=float)
    return problem.clamp(y - problem.grad(y) / _lvals(L))


def gamma_next(gamma: float) -> float:
    return (1.0 + np.sqrt(1.0 + 4.0 * gamma * gamma)) / 2.0


def extrapolate(q, q_prev, gamma: float, gamma_next: float):
    mu = (gamma - 1.0) / gamma_next
    return np.asarray(q) + mu * (np.asarray(q) - np.asarray(q_prev))


@dataclass
class GfgmState:
    k: int
    q: NDArray[np.float64]
    q_prev: NDArray[np.float64]
    y: NDArray[np.float64]
    gamma: float
    f: float


@dataclass
class GfgmTrajectory:
    """Iterates ``q[0..K]``, the points ``y[k]`` they were computed from and ``gamma[k]``.

    ``y[0]`` and ``gamma[0]`` are placeholders for the initial point.
    """

    q: NDArray[np.float64]
    y: NDArray[np.float64]
    gamma: NDArray[np.float64]
    f: NDArray[np.float64]
    converged: bool

    @property
    def iterations(self) -> int:
        return len(self.q) - 1

    @property
    def final(self) -> NDArray[np.float64]:
        return self.q[-1]

    def states(self):
        for k in range(1, len(self.q)):
            yield GfgmState(k, self.q[k], self.q[k - 1], self.y[k], float(self.gamma[k]), float(self.f[k]))


def gfgm_solve(problem: BoxQP, L, tol: float | None = 1e-6, max_iter: int = 10_000, q0=None) -> GfgmTrajectory:
    """Run the accelerated scheme from ``q(0) = y(1) = q0`` (default 0), ``gamma(1) = 1``.

    Stops once ``||q(k) - q(k-1)||_inf <= tol``; ``tol=None`` runs all
    ``max_iter`` steps.
    """
    n = problem.n
    Lv = _lvals(L)
    q = np.zeros(n) if q0 is None else problem.clamp(np.asarray(q0, dtype=float))
    qs, ys, gs, fs = [q], [q], [np.nan], [problem.f(q)]
    q_prev = q
    y = q
    gamma = 1.0
    converged = False
    for k in range(1, max_iter + 1):
        q_new = problem.clamp(y - problem.grad(y) / Lv)
        g_new = gamma_next(gamma)
        qs.append(q_new)
        ys.append(y)
        gs.append(gamma)
        fs.append(problem.f(q_new))
        step = float(np.max(np.abs(q_new - q))) if n else 0.0
        y = extrapolate(q_new, q, gamma, g_new)
        q_prev, q, gamma = q, q_new, g_new
        if tol is not None and step <= tol:
            converged = True
            break
    return GfgmTrajectory(np.array(qs), np.array(ys), np.array(gs), np.array(fs), converged)


def _projected_newton(problem: BoxQP, q, H, max_steps=200, kkt_tol=1e-12):
    """Projected Newton iterations (Bertsekas) with an Armijo search on the projection arc."""
    lo, hi = problem.lo, problem.hi
    for _ in range(max_steps):
        g = problem.grad(q)
        res = float(np.max(np.abs(q - problem.clamp(q - g))))
        if res <= kkt_tol:
            break
        eps = min(1e-6, res)
        bound = ((q <= lo + eps) & (g > 0)) | ((q >= hi - eps) & (g < 0))
        free = ~bound
        d = np.zeros_like(q)
        if free.any():
            d[free] = -np.linalg.solve(H[np.ix_(free, free)], g[free])
        d[bound] = -g[bound] / np.diag(H)[bound]
        f0 = problem.f(q)
        alpha = 1.0
        while alpha > 1e-20:
            z = problem.clamp(q + alpha * d)
            decrease = -alpha * float(g[free] @ d[free]) + float(g[bound] @ (q - z)[bound])
            if f0 - problem.f(z) >= 1e-4 * decrease:
                break
            alpha *= 0.5
        else:
            break
        if np.array_equal(z, q):
            break
        q = z
    return q


def centralized_oracle(problem: BoxQP, kkt_tol: float = 1e-12, max_iter: int = 1_000_000,
                       fail_tol: float = 1e-10, batch: int = 500) -> NDArray[np.float64]:
    """Reference solution of the box QP.

    Projected gradient with step ``1 / lambda_max(H)``; after every batch of
    steps the iterate seeds a projected Newton refinement, whose result is
    kept only if it lowers the natural KKT residual. Projected gradient alone
    stalls on the ill-conditioned weights used in tests.
    """
    n = problem.n
    if n == 0:
        return np.zeros(0)
    if not (np.all(np.isfinite(problem.lo)) and np.all(np.isfinite(problem.hi))):
        raise ValueError("oracle needs a bounded box")
    H = problem.hessian
    lam = float(np.linalg.eigvalsh(H)[-1])
    step = 1.0 / lam
    q = problem.clamp(np.zeros(n))
    best = q
    best_res = problem.kkt_residual(q)
    done = 0
    while done < max_iter:
        for _ in range(min(batch, max_iter - done)):
            q = problem.clamp(q - step * problem.grad(q))
        done += batch
        for cand in (q, _projected_newton(problem, q, H, kkt_tol=kkt_tol)):
            rc = problem.kkt_residual(cand)
            if rc < best_res:
                best, best_res = cand, rc
        if best_res <= kkt_tol:
            log.debug("oracle converged after %d projected steps (KKT %.1e)", done, best_res)
            return best
        q = best
    if best_res > fail_tol:
        raise OracleError(f"KKT residual {best_res:.2e} after {done} steps")
    return best


def _rounding(f_vals, f_star):
    return 64 * np.finfo(float).eps * (np.abs(f_vals) + abs(f_star))


def check_rate_bound(traj: GfgmTrajectory, problem: BoxQP, q_star, L):
    """Per-iteration objective-gap check against ``2 ||q(0) - q*||_L^2 / (k+1)^2``.

    Returns ``(ok, gap, bound)`` arrays over ``k = 1..K``; the comparison
    allows only floating-point rounding of the two objective values.
    """
    f_star = problem.f(q_star)
    r0 = traj.q[0] - q_star
    dist0 = float(r0 @ (_lvals(L) * r0))
    k = np.arange(1, len(traj.q))
    gap = traj.f[1:] - f_star
    bound = 2.0 * dist0 / (k + 1) ** 2
    ok = gap <= bound + _rounding(traj.f[1:], f_star)
    return ok, gap, bound


def check_distance_bound(traj: GfgmTrajectory, problem: BoxQP, q_star, L, H=None):
    """Per-iteration ``||q(k) - q*||_2 <= 2 ||q(0) - q*||_L / ((k+1) sqrt(sigma_min(H)))``."""
    H = problem.hessian if H is None else H
    sig = float(np.linalg.eigvalsh(H)[0])
    r0 = traj.q[0] - q_star
    dist0 = np.sqrt(float(r0 @ (_lvals(L) * r0)))
    k = np.arange(1, len(traj.q))
    dist = np.linalg.norm(traj.q[1:] - q_star, axis=1)
    bound = 2.0 * dist0 / ((k + 1) * np.sqrt(sig))
    ok = dist <= bound * (1 + 1e-12) + 1e-15
    return ok, dist, bound


def write_trajectory_csv(path, traj: GfgmTrajectory, problem: BoxQP, q_star, L) -> None:
    """Columns k, f, gap, bound_rate, dist, bound_distance (one row per iteration)."""
    _, gap, b1 = check_rate_bound(traj, problem, q_star, L)
    _, dist, b2 = check_distance_bound(traj, problem, q_star, L)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "f", "gap", "bound_rate", "dist", "bound_distance"])
        for i in range(len(gap)):
            w.writerow([i + 1, repr(float(traj.f[i + 1])), repr(float(gap[i])), repr(float(b1[i])),
                        repr(float(dist[i])), repr(float(b2[i]))])
