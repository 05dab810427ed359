"""Local Volt/VAr controllers.

Every controller is a per-bus rule: the output at bus i depends only on bus
i's voltage measurement, its own history and its own parameters. The update
kernels below are written with elementwise numpy operations, so the same
code runs for one bus (scalars) or for a whole feeder at once (arrays); in
both cases no bus reads another bus's data.

Kinds
-----
CDC     ``q = [-a (V - V_r)]``
DDC     ``q = (1 - alpha) q_prev + alpha [-a (V - V_r)]``
GPDC    ``q = [q_prev - a (V - V_r)]``
SGPDC   ``q = [q_prev - a d (V - V_r)]``
ASALVC  ``q = [-a(k) (V(k-1) - V_r) + b(k)]`` with self-adapting ``a``, ``b``

``[.]`` is the clamp onto the bus's VAr limits.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .optimizer import gamma_next


class Kind(str, Enum):
    NONE = "none"
    CDC = "cdc"
    DDC = "ddc"
    GPDC = "gpdc"
    SGPDC = "sgpdc"
    ASALVC = "asalvc"


@dataclass(frozen=True)
class ControllerConfig:
    """Controller parameters; array-valued fields hold one entry per bus.

    ``a`` is the slope (CDC/DDC/GPDC/SGPDC), ``alpha`` the DDC weight, ``d``
    the SGPDC scaling, ``L`` the ASALVC metric and ``T_gamma`` the online
    momentum-reset period in controller updates.
    """

    kind: Kind
    a: np.ndarray | float = 1.0
    alpha: np.ndarray | float = 0.1
    d: np.ndarray | float | None = None
    L: np.ndarray | float | None = None
    T_gamma: int = 6
    V_r: np.ndarray | float = 1.0
    dead_band: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        for name in ("a", "alpha", "d", "L", "V_r"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.asarray(v, dtype=float))
        if np.any(self.a <= 0):
            raise ValueError("slopes a_i must be positive")
        if self.kind is Kind.DDC and np.any((self.alpha <= 0) | (self.alpha >= 1)):
            raise ValueError("DDC weight alpha must lie in (0, 1)")
        if self.kind is Kind.SGPDC and (self.d is None or np.any(self.d <= 0)):
            raise ValueError("SGPDC needs positive scalings d_i")
        if self.kind is Kind.ASALVC and (self.L is None or np.any(self.L <= 0)):
            raise ValueError("ASALVC needs positive metric entries L_i")
        if int(self.T_gamma) < 1:
            raise ValueError("T_gamma must be >= 1")
        if self.dead_band < 0:
            raise ValueError("dead band must be nonnegative")

    def bus(self, i: int) -> "ControllerConfig":
        """Scalar configuration for bus index ``i`` (0-based)."""
        def pick(v):
            if v is None or np.ndim(v) == 0:
                return v
            return float(v[i])

        return replace(self, a=pick(self.a), alpha=pick(self.alpha), d=pick(self.d),
                       L=pick(self.L), V_r=pick(self.V_r))

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value, "T_gamma": int(self.T_gamma), "dead_band": self.dead_band}
        for name in ("a", "alpha", "d", "L", "V_r"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v.tolist()
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "ControllerConfig":
        keys = {f.name for f in fields(cls)}
        unknown = set(doc) - keys
        if unknown:
            raise ValueError(f"unknown controller fields: {sorted(unknown)}")
        return cls(**doc)


@dataclass(frozen=True)
class VarLimits:
    q_min: np.ndarray | float
    q_max: np.ndarray | float

    def __post_init__(self):
        if np.any(np.asarray(self.q_min) > np.asarray(self.q_max)):
            raise ValueError("q_min exceeds q_max")

    @classmethod
    def from_capacity(cls, S, p_now) -> "VarLimits":
        """``+/- sqrt(S^2 - p^2)``, zero once real power reaches capacity."""
        head = np.sqrt(np.maximum(np.asarray(S, dtype=float) ** 2 - np.asarray(p_now, dtype=float) ** 2, 0.0))
        return cls(-head, head)

    def clamp(self, q):
        return np.minimum(np.maximum(q, self.q_min), self.q_max)

    def bus(self, i: int) -> "VarLimits":
        lo, hi = np.broadcast_arrays(self.q_min, self.q_max)
        return VarLimits(float(lo[i]), float(hi[i]))


# ---------------------------------------------------------------- states


@dataclass
class DroopState:
    """Previous output of a baseline controller."""

    q: np.ndarray | float = 0.0


@dataclass
class AsalvcBusState:
    """History carried by an ASALVC bus agent.

    ``gamma`` and ``mu`` are the momentum values used at the last step;
    ``a`` and ``b`` the slope and intercept applied there.
    """

    q_prev: np.ndarray | float = 0.0
    q_prev2: np.ndarray | float = 0.0
    v_prev2: np.ndarray | float = 1.0
    gamma: float = 1.0
    mu: float = 0.0
    a: np.ndarray | float = float("nan")
    b: np.ndarray | float = 0.0
    step: int = 0

    @classmethod
    def initial(cls, V_r=1.0, n: int | None = None) -> "AsalvcBusState":
        if n is None:
            return cls(v_prev2=float(V_r))
        return cls(q_prev=np.zeros(n), q_prev2=np.zeros(n),
                   v_prev2=np.broadcast_to(np.asarray(V_r, dtype=float), (n,)).copy(),
                   a=np.full(n, np.nan), b=np.zeros(n))


# --------------------------------------------------------------- kernels


def _deviation(V, cfg: ControllerConfig):
    dev = np.asarray(V, dtype=float) - cfg.V_r
    if cfg.dead_band > 0:
        dev = np.sign(dev) * np.maximum(np.abs(dev) - cfg.dead_band, 0.0)
    return dev


def _out(q):
    return float(q) if np.ndim(q) == 0 else q


def cdc_step(state: DroopState, V_meas, cfg: ControllerConfig, limits: VarLimits):
    q = limits.clamp(-cfg.a * _deviation(V_meas, cfg))
    state.q = _out(q)
    return state.q


def ddc_step(state: DroopState, V_meas, cfg: ControllerConfig, limits: VarLimits):
    target = limits.clamp(-cfg.a * _deviation(V_meas, cfg))
    # the final clamp only matters when the limits shrink between steps
    q = limits.clamp((1.0 - cfg.alpha) * state.q + cfg.alpha * target)
    state.q = _out(q)
    return state.q


def gpdc_step(state: DroopState, V_meas, cfg: ControllerConfig, limits: VarLimits):
    q = limits.clamp(state.q - cfg.a * _deviation(V_meas, cfg))
    state.q = _out(q)
    return state.q


def sgpdc_step(state: DroopState, V_meas, cfg: ControllerConfig, limits: VarLimits):
    q = limits.clamp(state.q - cfg.a * cfg.d * _deviation(V_meas, cfg))
    state.q = _out(q)
    return state.q


def _asalvc_update(state: AsalvcBusState, V_meas_prev, cfg: ControllerConfig, limits: VarLimits, reset: bool):
    if cfg.L is None:
        raise ValueError("ASALVC needs L")
    if state.step == 0 or reset:
        gamma, mu = 1.0, 0.0
    else:
        gamma = gamma_next(state.gamma)
        mu = (state.gamma - 1.0) / gamma
    L = cfg.L
    a = (1.0 + mu) / L
    b = (1.0 + mu) * state.q_prev - mu * state.q_prev2 + (mu / L) * (state.v_prev2 - cfg.V_r)
    q = limits.clamp(-a * _deviation(V_meas_prev, cfg) + b)
    state.q_prev2 = state.q_prev
    state.q_prev = _out(q)
    state.v_prev2 = _out(np.asarray(V_meas_prev, dtype=float))
    state.gamma, state.mu = float(gamma), float(mu)
    state.a, state.b = _out(a), _out(b)
    state.step += 1
    return state.q_prev


def asalvc_offline_step(state: AsalvcBusState, V_meas_prev, cfg: ControllerConfig, limits: VarLimits):
    """One iteration from ``V(k-1)``; momentum follows the unrestarted schedule."""
    if state is None:
        raise ValueError("uninitialized ASALVC state")
    return _asalvc_update(state, V_meas_prev, cfg, limits, reset=False)


def asalvc_online_step(state: AsalvcBusState, V_meas_prev, p_now, cfg: ControllerConfig,
                       capacity=None, limits: VarLimits | None = None):
    """One online update; limits come from ``capacity`` and ``p_now`` unless given.

    Momentum restarts (``gamma = 1``, ``mu = 0``) whenever the update count is
    a multiple of ``cfg.T_gamma``.
    """
    if limits is None:
        if capacity is None:
            raise ValueError("need either limits or an inverter capacity")
        limits = VarLimits.from_capacity(capacity, p_now)
    t = state.step + 1
    return _asalvc_update(state, V_meas_prev, cfg, limits, reset=(t % int(cfg.T_gamma) == 0))


def none_step(state: DroopState, V_meas, cfg, limits):
    state.q = _out(limits.clamp(np.zeros_like(np.asarray(V_meas, dtype=float))))
    return state.q


_BASELINE = {
    Kind.NONE: none_step,
    Kind.CDC: cdc_step,
    Kind.DDC: ddc_step,
    Kind.GPDC: gpdc_step,
    Kind.SGPDC: sgpdc_step,
}


# ------------------------------------------------------------------ bank


@dataclass
class ControllerBank:
    """One controller per bus, advanced together.

    ``step`` evaluates the per-bus kernels on whole vectors; each output entry
    is a function of the matching measurement entry and that bus's state.
    """

    cfg: ControllerConfig
    n: int
    online: bool = False
    state: AsalvcBusState | DroopState = field(init=False)

    def __post_init__(self):
        self.reset()

    def reset(self):
        if self.cfg.kind is Kind.ASALVC:
            self.state = AsalvcBusState.initial(self.cfg.V_r, self.n)
        else:
            self.state = DroopState(np.zeros(self.n))

    @property
    def output(self) -> np.ndarray:
        s = self.state
        return np.asarray(s.q_prev if isinstance(s, AsalvcBusState) else s.q, dtype=float)

    def step(self, V_meas_prev, limits: VarLimits) -> np.ndarray:
        V_meas_prev = np.asarray(V_meas_prev, dtype=float)
        if self.cfg.kind is Kind.ASALVC:
            if self.online:
                q = asalvc_online_step(self.state, V_meas_prev, None, self.cfg, limits=limits)
            else:
                q = asalvc_offline_step(self.state, V_meas_prev, self.cfg, limits)
        else:
            q = _BASELINE[self.cfg.kind](self.state, V_meas_prev, self.cfg, limits)
        return np.array(q, dtype=float)


def default_config(kind, A=None, L=None, phi=None, **kw) -> ControllerConfig:
    """Settings used in the comparison studies.

    CDC, DDC and GPDC use slope 1 (DDC weight 0.1); SGPDC uses slope 0.01
    scaled by the inverse Hessian diagonal ``[A phi A]_ii^-1`` (``A_ii^-1``
    when ``phi = A^-1``); ASALVC uses the synthesized ``L``.
    """
    kind = Kind(kind)
    if kind is Kind.SGPDC:
        if A is None:
            raise ValueError("SGPDC defaults need A")
        H = A if phi is None else A @ np.asarray(phi) @ A
        kw.setdefault("a", 0.01)
        kw.setdefault("d", 1.0 / np.diag(H))
    if kind is Kind.ASALVC:
        if L is None:
            raise ValueError("ASALVC needs L")
        kw.setdefault("L", np.asarray(L, dtype=float))
    if kind is Kind.DDC:
        kw.setdefault("alpha", 0.1)
    return ControllerConfig(kind=kind, **kw)


# ---------------------------------------------------------- equivalence


def asalvc_equivalence_trace(case, steps: int = 50, L=None, phi=None, d=None, V_r=1.0, bounds=None):
    """Run the centralized accelerated solver and the local offline controller side by side.

    The controller is fed voltages from the linear model. Returns the two
    iterate arrays ``(central, local)``, each of shape ``(steps + 1, N)``
    including the zero start.
    """
    from .lindistflow import ExogenousState, v_par
    from .network import build_topology, incidence
    from .lindistflow import build_sensitivity
    from .optimizer import BoxQP, gfgm_solve
    from .synthesis import phi_from_A, solve_trace_min_L

    topo = build_topology(case)
    inc = incidence(case, topo)
    model = build_sensitivity(case, topo, inc)
    phi = phi if phi is not None else phi_from_A(case, inc)
    L = L if L is not None else solve_trace_min_L(model.A)
    Lv = np.asarray(L, dtype=float)
    d = d or ExogenousState.from_case(case)
    lo, hi = bounds if bounds is not None else case.var_limits()
    problem = BoxQP(model=model, phi=phi, vpar=v_par(model, d), lo=lo, hi=hi, V_r=V_r)
    central = gfgm_solve(problem, Lv, tol=None, max_iter=steps).q

    cfg = ControllerConfig(kind=Kind.ASALVC, L=Lv, V_r=V_r)
    limits = VarLimits(problem.lo, problem.hi)
    bank = ControllerBank(cfg, case.n_bus)
    local = [np.zeros(case.n_bus)]
    q = local[0]
    for _ in range(steps):
        V = problem.voltage(q)
        q = bank.step(V, limits)
        local.append(q)
    return central, np.array(local)


def write_state_csv(path, state: AsalvcBusState, labels) -> None:
    """Per-bus ASALVC state dump."""
    n = len(labels)
    cols = ["q_prev", "q_prev2", "v_prev2", "a", "b"]
    vals = {c: np.broadcast_to(np.asarray(getattr(state, c), dtype=float), (n,)) for c in cols}
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bus", *cols, "gamma", "mu", "step"])
        for i, lab in enumerate(labels):
            w.writerow([lab, *(repr(float(vals[c][i])) for c in cols), state.gamma, state.mu, state.step])
