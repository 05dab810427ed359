"""Nonlinear branch-flow plant for radial feeders.

The backward/forward sweep is written with the subtree matrix ``T`` (row j
marks the buses fed through line j), so a sweep is two mat-vec products::

    P = T (-p + r l),  Q = T (-q + x l),  l = (P^2 + Q^2) / V_from^2
    V^2 = V0^2 - T^T (2 (r P + x Q) - (r^2 + x^2) l)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import minimize

from .lindistflow import ExogenousState, sensitivity_for, v_linear
from .network import NetworkCase, Topology, build_topology

V2_FLOOR = 0.25
RESIDUAL_TOL = 1e-8


class PowerFlowError(RuntimeError):
    """Base class for plant failures."""


class ConvergenceError(PowerFlowError):
    pass


class VoltageCollapseError(PowerFlowError):
    pass


@dataclass(frozen=True)
class PFSolution:
    V: NDArray[np.float64]
    P: NDArray[np.float64]
    Q: NDArray[np.float64]
    iterations: int
    residual: float


class BranchFlowSolver:
    """Sweep solver bound to one feeder; reusable across injections."""

    def __init__(self, case: NetworkCase, topo: Topology | None = None):
        topo = topo or build_topology(case)
        self.case = case
        self.topo = topo
        self.T = topo.subtree_matrix()
        self.r = np.asarray(case.r)
        self.x = np.asarray(case.x)
        self.z2 = self.r**2 + self.x**2
        # index of the sending bus voltage for each line, -1 for the slack
        self.from_idx = np.array([topo.parent[j] - 1 for j in range(1, case.n_bus + 1)])
        self.v0 = float(case.slack_voltage)
        # C[j-1, k-1] = 1 when bus k is a child of bus j
        n = case.n_bus
        self.C = np.zeros((n, n))
        for k in range(1, n + 1):
            if topo.parent[k] > 0:
                self.C[topo.parent[k] - 1, k - 1] = 1.0

    def _v_from(self, V):
        return np.where(self.from_idx < 0, self.v0, V[self.from_idx])

    def solve(self, p, q, tol: float = 1e-10, max_iter: int = 200, V_init=None) -> PFSolution:
        """Solve for net injections ``p``, ``q`` (pu, consumption negative).

        ``V_init`` warm-starts the sweep, e.g. from the previous time step.
        """
        if tol <= 0:
            raise ValueError("tol must be positive")
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        n = self.case.n_bus
        if p.shape != (n,) or q.shape != (n,):
            raise ValueError(f"injections must have shape ({n},)")
        T, r, x = self.T, self.r, self.x
        V = np.full(n, self.v0) if V_init is None else np.array(V_init, dtype=float)
        ell = np.zeros(n)
        if V_init is not None:
            P = T @ -p
            Q = T @ -q
            ell = (P**2 + Q**2) / self._v_from(V) ** 2
        # overflow on infeasible loading ends in the collapse check below
        with np.errstate(over="ignore", invalid="ignore"):
            return self._sweep(p, q, V, ell, tol, max_iter, warm=V_init is not None)

    def _sweep(self, p, q, V, ell, tol, max_iter, warm) -> PFSolution:
        n = self.case.n_bus
        T, r, x = self.T, self.r, self.x
        for it in range(1, max_iter + 1):
            P = T @ (-p + r * ell)
            Q = T @ (-q + x * ell)
            vf = self._v_from(V)
            ell = (P**2 + Q**2) / vf**2
            V2 = self.v0**2 - T.T @ (2.0 * (r * P + x * Q) - self.z2 * ell)
            if not V2.min(initial=np.inf) >= V2_FLOOR:
                bad = int(np.argmin(np.nan_to_num(V2, nan=-np.inf))) + 1
                raise VoltageCollapseError(
                    f"voltage collapse at bus {self.case.labels[bad]!r} (iteration {it})"
                )
            V_new = np.sqrt(V2)
            change = float(np.max(np.abs(V_new - V))) if n else 0.0
            V = V_new
            if change <= tol and (it > 1 or not warm):
                # final flows consistent with the converged voltages
                vf = self._v_from(V)
                for _ in range(3):
                    P = T @ (-p + r * ell)
                    Q = T @ (-q + x * ell)
                    ell = (P**2 + Q**2) / vf**2
                res = branch_flow_residual(self, V, P, Q, p, q)
                if res <= RESIDUAL_TOL:
                    return PFSolution(V=V, P=P, Q=Q, iterations=it, residual=res)
        raise ConvergenceError(f"sweep did not converge in {max_iter} iterations")


def branch_flow_residual(solver: BranchFlowSolver, V, P, Q, p, q) -> float:
    """Largest absolute residual of the three branch-flow equations over all lines."""
    n = solver.case.n_bus
    r, x = solver.r, solver.x
    vf = solver._v_from(V)
    ell = (P**2 + Q**2) / vf**2
    child_P = solver.C @ P
    child_Q = solver.C @ Q
    r1 = P - child_P + p - r * ell
    r2 = Q - child_Q + q - x * ell
    r3 = vf**2 - V**2 - 2.0 * (r * P + x * Q) + (r**2 + x**2) * ell
    if n == 0:
        return 0.0
    return float(max(np.abs(r1).max(), np.abs(r2).max(), np.abs(r3).max()))


def solve_branch_flow(case, topo=None, injections=None, tol=1e-10, max_iter=200) -> PFSolution:
    """Functional wrapper around :class:`BranchFlowSolver`."""
    if injections is None:
        injections = (np.zeros(case.n_bus), np.zeros(case.n_bus))
    p, q = injections
    return BranchFlowSolver(case, topo).solve(p, q, tol=tol, max_iter=max_iter)


def plant_voltage(solver: BranchFlowSolver, q_g, d: ExogenousState, **kw) -> NDArray[np.float64]:
    """Nonlinear voltage map: DER VAr ``q_g`` on top of exogenous state ``d``."""
    return solver.solve(d.p, np.asarray(q_g) - d.q_c, **kw).V


def objective_m(case, phi, q_g, d, V_r=1.0, solver=None) -> float:
    """Weighted squared voltage deviation on the nonlinear plant."""
    solver = solver or BranchFlowSolver(case)
    e = plant_voltage(solver, q_g, d) - np.broadcast_to(V_r, (case.n_bus,))
    return 0.5 * float(e @ phi.apply(e))


@dataclass(frozen=True)
class GapReport:
    """Ingredients of the nonlinear-gap bound.

    ``delta`` is a sampled lower bound on ``max ||h - h_l||_2`` over the box;
    ``tau`` is ``|m(q_hat) - f*|`` with ``q_hat`` the best point found for the
    nonlinear objective.
    """

    delta: float
    tau: float
    E_norm: float
    q_hat: NDArray[np.float64] | None = None
    m_hat: float = float("nan")
    f_star: float = float("nan")

    def bound(self, k: int, dist0_L_sq: float) -> float:
        """Right-hand side at iteration ``k`` given ``||q(0) - q*||_L^2``."""
        return 0.5 * self.E_norm**2 * self.delta**2 + 2.0 * dist0_L_sq / (k + 1) ** 2 + self.tau


def measure_gap(
    case: NetworkCase,
    phi,
    bounds,
    samples: int = 64,
    d: ExogenousState | None = None,
    V_r=1.0,
    grid_points: int | None = None,
    f_star: float | None = None,
    extra_points=(),
    seed: int = 0,
    plant=None,
) -> GapReport:
    """Estimate the linearization gap and, on tiny feeders, the nonlinear optimum.

    ``plant`` maps ``(q_g, d)`` to voltages and defaults to the branch-flow
    solver; ``extra_points`` (e.g. an iterate trajectory) are added to the
    random and corner samples used for ``delta``.
    """
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    n = case.n_bus
    if samples < 1:
        raise ValueError("sample count must be >= 1")
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("bounds must be finite")
    if grid_points is not None and n > 3:
        raise ValueError("grid search is limited to feeders with at most 3 buses")
    d = d or ExogenousState.from_case(case)
    model = sensitivity_for(case)
    if plant is None:
        solver = BranchFlowSolver(case)

        def plant(q, dd):
            return plant_voltage(solver, q, dd)

    rng = np.random.default_rng(seed)
    pts = [lo, hi]
    if n <= 10:
        corners = np.array(np.meshgrid(*zip(lo, hi))).reshape(n, -1).T
        pts.extend(corners)
    pts.extend(lo + (hi - lo) * rng.random((samples, n)))
    pts.extend(np.atleast_2d(np.asarray(extra_points, dtype=float)).reshape(-1, n) if len(extra_points) else [])
    delta = max(float(np.linalg.norm(plant(q, d) - v_linear(model, q, d))) for q in pts)

    vr = np.broadcast_to(np.asarray(V_r, dtype=float), (n,))

    def m(q):
        e = plant(q, d) - vr
        return 0.5 * float(e @ phi.apply(e))

    tau = float("nan")
    q_hat = None
    m_hat = float("nan")
    if grid_points is not None:
        axes = [np.linspace(a, b, grid_points) for a, b in zip(lo, hi)]
        grid = np.array(np.meshgrid(*axes)).reshape(n, -1).T
        vals = np.array([m(q) for q in grid])
        q_hat = grid[int(np.argmin(vals))]
        res = minimize(m, q_hat, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                       options={"ftol": 1e-15, "gtol": 1e-12})
        if res.fun < vals.min():
            q_hat = np.clip(res.x, lo, hi)
        m_hat = m(q_hat)
        if f_star is not None:
            tau = abs(m_hat - f_star)
    return GapReport(delta=delta, tau=tau, E_norm=phi.E_norm, q_hat=q_hat, m_hat=m_hat,
                     f_star=np.nan if f_star is None else float(f_star))
