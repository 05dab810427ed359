"""Closed-loop simulation of local controllers on a feeder.

Timing follows the one-step-delayed measurement convention: the output at
step t is computed from the voltage measured at step t-1, then applied to
the plant together with the exogenous state of step t.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .acpf import BranchFlowSolver, PowerFlowError
from .controllers import ControllerBank, ControllerConfig, VarLimits
from .lindistflow import ExogenousState, sensitivity_for, v_par
from .network import NetworkCase, build_topology, incidence
from .synthesis import PhiModel, phi_from_A

log = logging.getLogger(__name__)

V_BAND = (0.95, 1.05)
CAP_TOL = 1e-12


@dataclass(frozen=True)
class ScenarioTimeline:
    """Per-step absolute injections in pu (loads negative, PV real power positive)."""

    dt: float
    p_load: NDArray[np.float64]
    q_load: NDArray[np.float64]
    p_pv: NDArray[np.float64]

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        arrs = [np.atleast_2d(np.asarray(a, dtype=float)) for a in (self.p_load, self.q_load, self.p_pv)]
        if not arrs[0].shape == arrs[1].shape == arrs[2].shape:
            raise ValueError("timeline series must share one shape (steps x buses)")
        for name, a in zip(("p_load", "q_load", "p_pv"), arrs):
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} contains non-finite values")
            object.__setattr__(self, name, a)

    @property
    def steps(self) -> int:
        return self.p_load.shape[0]

    @property
    def n_bus(self) -> int:
        return self.p_load.shape[1]

    @property
    def time_s(self) -> NDArray[np.float64]:
        return np.arange(self.steps) * self.dt

    def exogenous(self, t: int) -> ExogenousState:
        return ExogenousState(p=self.p_load[t] + self.p_pv[t], q_c=-self.q_load[t])

    def to_csv(self, path, labels) -> None:
        labels = list(labels)
        header = ["time_s"]
        for lab in labels:
            header += [f"p_load_{lab}", f"q_load_{lab}", f"p_pv_{lab}"]
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t in range(self.steps):
                row = [repr(float(t * self.dt))]
                for i in range(self.n_bus):
                    row += [repr(float(self.p_load[t, i])), repr(float(self.q_load[t, i])),
                            repr(float(self.p_pv[t, i]))]
                w.writerow(row)

    @classmethod
    def from_csv(cls, path, labels=None) -> "ScenarioTimeline":
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][0] != "time_s":
            raise ValueError(f"{path}: first column must be time_s")
        header, body = rows[0], np.array(rows[1:], dtype=float)
        if (len(header) - 1) % 3:
            raise ValueError(f"{path}: expected three columns per bus")
        found = [h[len("p_load_"):] for h in header[1::3]]
        if labels is not None and list(labels) != found:
            raise ValueError(f"{path}: bus columns do not match the case")
        t = body[:, 0]
        dt = float(t[1] - t[0]) if len(t) > 1 else 1.0
        return cls(dt=dt, p_load=body[:, 1::3], q_load=body[:, 2::3], p_pv=body[:, 3::3])


@dataclass
class SimulationTrace:
    """Per-step record; row t holds the state after the step-t update."""

    V: NDArray[np.float64]
    q: NDArray[np.float64]
    lo: NDArray[np.float64]
    hi: NDArray[np.float64]
    objective: NDArray[np.float64]
    mismatch: NDArray[np.float64]
    V_r: float = 1.0
    converged: bool = False
    error: str | None = None
    label: str = ""
    dt: float = 1.0

    @property
    def steps(self) -> int:
        return len(self.V)

    @property
    def saturated(self) -> NDArray[np.bool_]:
        return (np.abs(self.q - self.lo) <= CAP_TOL) | (np.abs(self.q - self.hi) <= CAP_TOL)

    @property
    def voltage_violation(self) -> NDArray[np.bool_]:
        return (self.V < V_BAND[0]) | (self.V > V_BAND[1])

    @property
    def capacity_violation(self) -> NDArray[np.bool_]:
        return (self.q < self.lo - CAP_TOL) | (self.q > self.hi + CAP_TOL)

    @property
    def dq(self) -> NDArray[np.float64]:
        """``||q(t) - q(t-1)||_inf`` for t >= 1."""
        return np.abs(np.diff(self.q, axis=0)).max(axis=1) if self.steps > 1 else np.zeros(0)

    def to_csv(self, path, labels) -> None:
        labels = list(labels)
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "time_s", "objective", "mismatch",
                        *(f"V_{b}" for b in labels), *(f"q_{b}" for b in labels)])
            for t in range(self.steps):
                w.writerow([t, repr(t * self.dt), repr(float(self.objective[t])), repr(float(self.mismatch[t])),
                            *(repr(float(v)) for v in self.V[t]), *(repr(float(v)) for v in self.q[t])])


class _Plant:
    def __init__(self, case: NetworkCase, kind: str):
        if kind not in ("linear", "nonlinear"):
            raise ValueError(f"unknown plant {kind!r}")
        self.kind = kind
        self.model = sensitivity_for(case)
        self.solver = BranchFlowSolver(case) if kind == "nonlinear" else None
        self._last = None

    def __call__(self, q, d: ExogenousState):
        if self.solver is None:
            return self.model.A @ q + v_par(self.model, d)
        V = self.solver.solve(d.p, q - d.q_c, V_init=self._last).V
        self._last = V
        return V


def _default_phi(case) -> PhiModel:
    topo = build_topology(case)
    return phi_from_A(case, incidence(case, topo))


class _Recorder:
    def __init__(self, phi: PhiModel, V_r: float):
        self.phi, self.V_r = phi, V_r
        self.rows: dict[str, list] = {k: [] for k in ("V", "q", "lo", "hi", "objective", "mismatch")}

    def add(self, V, q, lo, hi):
        e = V - self.V_r
        r = self.rows
        r["V"].append(V)
        r["q"].append(q)
        r["lo"].append(lo)
        r["hi"].append(hi)
        r["objective"].append(0.5 * float(e @ self.phi.apply(e)))
        r["mismatch"].append(float(np.linalg.norm(e)))

    def trace(self, **kw) -> SimulationTrace:
        arr = {k: np.array(v, dtype=float) for k, v in self.rows.items()}
        return SimulationTrace(V_r=self.V_r, **arr, **kw)


def run_offline(case: NetworkCase, cfg: ControllerConfig, plant: str = "linear", tol: float | None = 1e-6,
                max_iter: int = 10_000, d: ExogenousState | None = None, V_r: float = 1.0,
                phi: PhiModel | None = None, bounds=None) -> SimulationTrace:
    """Iterate measure -> update -> plant on a fixed exogenous state.

    Stops once ``||q(k) - q(k-1)||_inf <= tol`` (``tol=None`` runs
    ``max_iter`` iterations). Row 0 of the trace is the uncontrolled start.
    """
    d = d or ExogenousState.from_case(case)
    h = _Plant(case, plant)
    phi = phi or _default_phi(case)
    lo, hi = bounds if bounds is not None else case.var_limits()
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    limits = VarLimits(lo, hi)
    bank = ControllerBank(cfg, case.n_bus, online=False)
    rec = _Recorder(phi, V_r)
    q = np.zeros(case.n_bus)
    V = h(q, d)
    rec.add(V, q, lo, hi)
    converged = False
    try:
        for _ in range(max_iter):
            q_new = bank.step(V, limits)
            V = h(q_new, d)
            rec.add(V, q_new, lo, hi)
            step = float(np.max(np.abs(q_new - q))) if case.n_bus else 0.0
            q = q_new
            if tol is not None and step <= tol:
                converged = True
                break
    except PowerFlowError as exc:
        return rec.trace(converged=False, error=str(exc), label=cfg.kind.value)
    return rec.trace(converged=converged, label=cfg.kind.value)


def run_online(case: NetworkCase, timeline: ScenarioTimeline, cfg: ControllerConfig,
               plant: str = "nonlinear", V_r: float = 1.0, phi: PhiModel | None = None,
               noise: float = 0.0, seed: int = 0) -> SimulationTrace:
    """Controller in the loop over a timeline, one update per step.

    VAr limits are re-estimated every step from the PV real power. Optional
    Gaussian measurement noise (standard deviation ``noise`` pu) is seeded.
    A plant failure ends the run; the partial trace carries the message.
    """
    if timeline.n_bus != case.n_bus:
        raise ValueError("timeline bus count does not match the case")
    h = _Plant(case, plant)
    phi = phi or _default_phi(case)
    bank = ControllerBank(cfg, case.n_bus, online=True)
    rng = np.random.default_rng(seed)
    rec = _Recorder(phi, V_r)
    q = np.zeros(case.n_bus)
    try:
        for t in range(timeline.steps):
            d = timeline.exogenous(t)
            lo, hi = case.var_limits(timeline.p_pv[t])
            if t == 0:
                q = np.clip(q, lo, hi)
            else:
                meas = V + noise * rng.standard_normal(case.n_bus) if noise > 0 else V
                q = bank.step(meas, VarLimits(lo, hi))
            V = h(q, d)
            rec.add(V, q, lo, hi)
    except PowerFlowError as exc:
        log.warning("plant failure at step %d: %s", t, exc)
        return rec.trace(error=f"step {t}: {exc}", label=cfg.kind.value, dt=timeline.dt)
    return rec.trace(converged=True, label=cfg.kind.value, dt=timeline.dt)


def metrics(trace: SimulationTrace, phi: PhiModel | None = None, V_r: float | None = None) -> dict:
    """Summary numbers of a trace.

    With ``phi`` given the objective is recomputed from the stored voltages;
    otherwise the recorded values are averaged.
    """
    if trace.steps == 0:
        raise ValueError("empty trace")
    V_r = trace.V_r if V_r is None else V_r
    if phi is not None:
        e = trace.V - V_r
        obj = 0.5 * np.einsum("ti,ti->t", e, np.array([phi.apply(r) for r in e]))
    else:
        obj = trace.objective
    vv = trace.voltage_violation
    return {
        "steps": int(trace.steps),
        "time_avg_objective": float(np.mean(obj)),
        "final_objective": float(obj[-1]),
        "v_max": float(trace.V.max()),
        "v_min": float(trace.V.min()),
        "voltage_violation_steps": int(vv.any(axis=1).sum()),
        "voltage_violation_count": int(vv.sum()),
        "capacity_violation_count": int(trace.capacity_violation.sum()),
        "final_mismatch": float(np.linalg.norm(trace.V[-1] - V_r)),
        "converged": bool(trace.converged),
        "error": trace.error,
    }


def settling_step(trace: SimulationTrace, threshold: float = 1e-4, after: int = 0) -> int:
    """Last step ``t > after`` with ``||q(t) - q(t-1)||_inf > threshold`` (``after`` if none)."""
    dq = trace.dq
    idx = np.nonzero(dq[after:] > threshold)[0]
    return int(after + idx[-1] + 1) if idx.size else after


def write_summary(path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True))


# --------------------------------------------------------------- scenarios


def _daily_load_shape(hours):
    """Per-unit daily demand: night trough, morning shoulder, evening peak near 18:30."""
    return (0.55 + 0.25 * np.exp(-((hours - 8.0) / 2.0) ** 2)
            + 0.55 * np.exp(-((hours - 18.5) / 2.2) ** 2))


def _pv_shape(hours):
    """Clear-sky PV shape between 6:00 and 18:00, peak at noon."""
    s = np.sin(np.pi * (hours - 6.0) / 12.0)
    return np.where((hours > 6.0) & (hours < 18.0), np.maximum(s, 0.0) ** 1.5, 0.0)


@dataclass
class ScenarioParams:
    """Knobs for :func:`make_scenario` (pu values on the case base)."""

    steps: int | None = None
    dt: float | None = None
    change_step: int = 10
    multiplier: float = 1.5
    load_scale: float = 1.0
    pv_peak: float = 0.0
    pv_buses: tuple[int, ...] | None = None
    load_noise: float = 0.05
    pv_noise: float = 0.1
    extra: dict = field(default_factory=dict)


def make_scenario(kind: str, case: NetworkCase, params: ScenarioParams | dict | None = None,
                  seed: int = 0) -> ScenarioTimeline:
    """Build a timeline.

    static
        Nominal case loads repeated, no PV (default 60 steps of 1 s).
    sudden_change
        Nominal loads scaled by ``multiplier`` from ``change_step`` on
        (default 60 steps of 1 s, 1.5x at step 10).
    continuous
        24 h at 6 s (14400 steps): daily load and PV shapes with seeded
        per-step perturbations; ``pv_peak`` is the PV real power at noon
        on each PV bus (all buses unless ``pv_buses`` is given).
    """
    if params is None:
        params = ScenarioParams()
    elif isinstance(params, dict):
        params = ScenarioParams(**params)
    n = case.n_bus
    p0 = case.p_load * params.load_scale
    q0 = case.q_load * params.load_scale
    if kind == "static":
        T = params.steps or 60
        dt = params.dt or 1.0
        mult = np.ones(T)
        return ScenarioTimeline(dt, np.outer(mult, p0), np.outer(mult, q0), np.zeros((T, n)))
    if kind == "sudden_change":
        T = params.steps or 60
        dt = params.dt or 1.0
        mult = np.where(np.arange(T) >= params.change_step, params.multiplier, 1.0)
        return ScenarioTimeline(dt, np.outer(mult, p0), np.outer(mult, q0), np.zeros((T, n)))
    if kind == "continuous":
        dt = params.dt or 6.0
        T = params.steps or int(round(24 * 3600 / dt))
        rng = np.random.default_rng(seed)
        hours = np.arange(T) * dt / 3600.0
        load = _daily_load_shape(hours)[:, None] * (1.0 + params.load_noise * rng.standard_normal((T, n)))
        load = np.maximum(load, 0.0)
        cloud = 1.0 - params.pv_noise * np.abs(rng.standard_normal((T, n)))
        pv = params.pv_peak * _pv_shape(hours)[:, None] * np.clip(cloud, 0.0, 1.0)
        if params.pv_buses is not None:
            mask = np.zeros(n, dtype=bool)
            mask[np.asarray(params.pv_buses, dtype=int) - 1] = True
            pv[:, ~mask] = 0.0
        cap = case.der_capacity
        pv = np.minimum(pv, cap[None, :])
        return ScenarioTimeline(dt, load * p0[None, :], load * q0[None, :], pv)
    raise ValueError(f"unknown scenario kind {kind!r}")
