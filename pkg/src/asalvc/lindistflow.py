"""Linearized branch-flow (LinDistFlow) sensitivity model.

Voltages are affine in the DER VAr vector::

    V = A q_g + V_par(d),   V_par(d) = R_s p - A q_c + base_term

with ``A = M^-T X M^-1`` and ``R_s = M^-T R M^-1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import cho_factor, LinAlgError

from .network import IncidenceDecomposition, NetworkCase, Topology


@dataclass(frozen=True)
class ExogenousState:
    """Uncontrolled quantities: net real injections and load VAr consumption."""

    p: NDArray[np.float64]
    q_c: NDArray[np.float64]

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        q_c = np.asarray(self.q_c, dtype=float)
        if p.shape != q_c.shape:
            raise ValueError("p and q_c must have equal length")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q_c))):
            raise ValueError("exogenous state must be finite")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q_c", q_c)

    @classmethod
    def from_case(cls, case: NetworkCase, p_der=None) -> "ExogenousState":
        """Nominal loads of ``case`` plus optional DER real power."""
        p = case.p_load.copy()
        if p_der is not None:
            p = p + np.asarray(p_der, dtype=float)
        return cls(p=p, q_c=-case.q_load)


@dataclass(frozen=True)
class SensitivityModel:
    A: NDArray[np.float64]
    R_s: NDArray[np.float64]
    base_term: NDArray[np.float64]
    chol: tuple = None

    @property
    def n_bus(self) -> int:
        return self.A.shape[0]


def build_sensitivity(
    case: NetworkCase, topo: Topology, inc: IncidenceDecomposition
) -> SensitivityModel:
    n = case.n_bus
    # W = M^-1 (lines x buses), one triangular solve per column
    W = np.column_stack([inc.solve(e) for e in np.eye(n)]) if n else np.zeros((0, 0))
    A = W.T @ (case.x[:, None] * W)
    R_s = W.T @ (case.r[:, None] * W)
    A = 0.5 * (A + A.T)
    R_s = 0.5 * (R_s + R_s.T)
    base = -case.slack_voltage * inc.solve_t(inc.m0)
    try:
        chol = cho_factor(A, lower=False)
    except LinAlgError as exc:
        raise LinAlgError(f"sensitivity matrix is not positive definite: {exc}") from exc
    for a in (A, R_s, base):
        a.setflags(write=False)
    return SensitivityModel(A=A, R_s=R_s, base_term=base, chol=chol)


def sensitivity_for(case: NetworkCase) -> SensitivityModel:
    from .network import build_topology, incidence

    topo = build_topology(case)
    return build_sensitivity(case, topo, incidence(case, topo))


def path_overlap_matrix(case: NetworkCase, topo: Topology) -> NDArray[np.float64]:
    """Independent construction of ``A``: summed reactance on shared root paths."""
    n = case.n_bus
    paths = [set()] + [set(topo.path_to_root(j)) for j in range(1, n + 1)]
    out = np.zeros((n, n))
    for i in range(1, n + 1):
        for j in range(i, n + 1):
            common = paths[i] & paths[j]
            val = sum(case.x[k - 1] for k in common)
            out[i - 1, j - 1] = out[j - 1, i - 1] = val
    return out


def _check(model: SensitivityModel, *vecs):
    n = model.n_bus
    for v in vecs:
        if np.shape(v) != (n,):
            raise ValueError(f"dimension mismatch: expected ({n},), got {np.shape(v)}")


def v_par(model: SensitivityModel, d: ExogenousState) -> NDArray[np.float64]:
    _check(model, d.p, d.q_c)
    return model.R_s @ d.p - model.A @ d.q_c + model.base_term


def v_linear(model: SensitivityModel, q_g, d: ExogenousState) -> NDArray[np.float64]:
    q_g = np.asarray(q_g, dtype=float)
    _check(model, q_g)
    return model.A @ q_g + v_par(model, d)


def _v_ref(model, V_r):
    return np.broadcast_to(np.asarray(V_r, dtype=float), (model.n_bus,))


def objective_f(model, phi, q_g, d, V_r=1.0) -> float:
    """Weighted squared voltage deviation ``0.5 ||V - V_r||_phi^2`` (linear model)."""
    e = v_linear(model, q_g, d) - _v_ref(model, V_r)
    return 0.5 * float(e @ phi.apply(e))


def grad_f(model, phi, q_g, d, V_r=1.0) -> NDArray[np.float64]:
    """Gradient ``A phi (V - V_r)``; exactly ``V - V_r`` when ``phi = A^-1``."""
    e = v_linear(model, q_g, d) - _v_ref(model, V_r)
    if phi.is_inverse_of(model):
        return e
    return model.A @ phi.apply(e)
