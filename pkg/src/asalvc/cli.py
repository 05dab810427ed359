"""Command-line front end.

Exit codes: 0 success, 1 numerical failure, 2 input error. The worker count
for batches of runs is read from ``ASALVC_THREADS`` (default 1).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .acpf import PowerFlowError
from .cases import make_synthetic_feeder
from .controllers import Kind, default_config
from .lindistflow import ExogenousState, path_overlap_matrix
from .network import CaseError, build_topology, incidence, load_case, save_case
from .lindistflow import build_sensitivity
from .optimizer import BoxQP, OracleError, centralized_oracle
from .simulator import ScenarioTimeline, make_scenario, metrics, run_offline, run_online, settling_step
from .synthesis import SynthesisError, diag_dominant_seed, phi_from_A, solve_trace_min_L, verify_psd

log = logging.getLogger("asalvc")

EXIT_OK, EXIT_NUMERIC, EXIT_INPUT = 0, 1, 2
NUMERIC_ERRORS = (PowerFlowError, SynthesisError, OracleError, np.linalg.LinAlgError)


class InputError(Exception):
    pass


def _threads() -> int:
    raw = os.environ.get("ASALVC_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise InputError(f"ASALVC_THREADS must be an integer, got {raw!r}") from None


def _load(path):
    path = Path(path)
    if not path.exists():
        raise InputError(f"case file not found: {path}")
    return load_case(path)


def _prepare(case):
    topo = build_topology(case)
    inc = incidence(case, topo)
    model = build_sensitivity(case, topo, inc)
    return topo, inc, model


# ------------------------------------------------------------------ check


def run_checks(case, corrupt_A=None) -> list[tuple[str, bool, str]]:
    """Invariant battery; ``corrupt_A`` (test hook) may alter ``A`` before checking."""
    topo, inc, model = _prepare(case)
    A = np.array(model.A)
    if corrupt_A is not None:
        A = corrupt_A(A)
    n = case.n_bus
    rows = []
    full = inc.full
    rows.append(("incidence column sums", bool(np.all(full.sum(axis=0) == 0)), ""))
    asym = float(np.max(np.abs(A - A.T))) if n else 0.0
    rows.append(("A symmetric", asym <= 1e-12 * max(np.abs(A).max(), 1e-300), f"max |A - A^T| = {asym:.2e}"))
    eig = np.linalg.eigvalsh(0.5 * (A + A.T)) if n else np.array([1.0])
    rows.append(("A positive definite", bool(eig[0] > 0), f"sigma_min(A) = {eig[0]:.6e}"))
    dev = float(np.max(np.abs(A - path_overlap_matrix(case, topo)))) if n else 0.0
    rows.append(("A matches path overlap", dev <= 1e-10, f"max dev = {dev:.2e}"))
    phi = phi_from_A(case, inc)
    pa = float(np.max(np.abs(phi.matrix @ A - np.eye(n)))) if n else 0.0
    rows.append(("phi A = I", pa <= 1e-9, f"max dev = {pa:.2e}"))
    seed = diag_dominant_seed(model.A)
    chk = verify_psd(seed, A)
    rows.append(("seed L feasible", chk.ok, f"min eig(L - A) = {chk.min_eig:.3e}"))
    return rows


def cmd_check(args) -> int:
    case = _load(args.case)
    hook = None
    if args.corrupt_a:
        def hook(A):
            A = A.copy()
            if A.shape[0] > 1:
                A[0, -1] += 1e-3
            else:
                A[0, 0] = -abs(A[0, 0])
            return A
    rows = run_checks(case, hook)
    width = max(len(r[0]) for r in rows)
    for name, ok, info in rows:
        print(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}  {info}")
    return EXIT_OK


# ---------------------------------------------------------------- synth-l


def cmd_synth_l(args) -> int:
    case = _load(args.case)
    _, _, model = _prepare(case)
    L = solve_trace_min_L(model.A, tol=args.tol)
    out = {lab: float(v) for lab, v in zip(case.labels[1:], L.values)}
    out["_certificate"] = {
        "min_eig_L_minus_A": L.min_eig,
        "tolerance": -1e-9 * float(np.linalg.norm(model.A, 2)),
        "trace": L.trace,
        "seed_trace": diag_dominant_seed(model.A).trace,
    }
    text = json.dumps(out, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return EXIT_OK


# ------------------------------------------------------------- make-case


def cmd_make_case(args) -> int:
    if args.buses < 1:
        raise InputError("bus count must be >= 1")
    case = make_synthetic_feeder(
        n_bus=args.buses, seed=args.seed, der_kvar=args.der_kvar,
        der_capacity_kva=args.capacity_kva, slack_voltage=args.slack_voltage,
    )
    save_case(case, args.out)
    return EXIT_OK


def cmd_make_timeline(args) -> int:
    case = _load(args.case)
    params = {k: v for k, v in {
        "steps": args.steps, "dt": args.dt, "change_step": args.change_step,
        "multiplier": args.multiplier, "pv_peak": args.pv_peak, "load_scale": args.load_scale,
    }.items() if v is not None}
    tl = make_scenario(args.kind, case, params, seed=args.seed)
    tl.to_csv(args.out, case.labels[1:])
    return EXIT_OK


# -------------------------------------------------------------------- run


@dataclass
class RunSpec:
    case: Path
    scenario: str = "static"
    scenario_params: dict = field(default_factory=dict)
    seed: int = 0
    timeline: Path | None = None
    controllers: list[str] = field(default_factory=lambda: ["asalvc"])
    plant: str | None = None
    out: Path = Path("run")
    tol: float = 1e-6
    max_iter: int = 10_000
    oracle: bool = False
    T_gamma: int = 6

    def validate(self):
        if not Path(self.case).exists():
            raise InputError(f"case file not found: {self.case}")
        if self.timeline is not None and not Path(self.timeline).exists():
            raise InputError(f"timeline file not found: {self.timeline}")
        if not self.controllers:
            raise InputError("at least one controller is required")
        for c in self.controllers:
            try:
                Kind(c)
            except ValueError:
                raise InputError(f"unknown controller {c!r}") from None
        if self.scenario not in ("static", "sudden_change", "continuous"):
            raise InputError(f"unknown scenario {self.scenario!r}")
        if self.plant not in (None, "linear", "nonlinear"):
            raise InputError(f"unknown plant {self.plant!r}")

    @classmethod
    def from_json(cls, path) -> "RunSpec":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read run spec {path}: {exc}") from None
        return cls(**doc)


def _first_at_or_below(values, tol):
    idx = np.nonzero(values <= tol)[0]
    return int(idx[0]) if idx.size else None


def execute(spec: RunSpec) -> tuple[dict, dict]:
    """Run every configured controller; returns (summary, traces)."""
    spec.validate()
    case = load_case(spec.case)
    topo, inc, model = _prepare(case)
    L = solve_trace_min_L(model.A) if "asalvc" in spec.controllers else None
    phi = phi_from_A(case, inc)
    cfgs = {c: default_config(c, A=model.A, L=L, T_gamma=spec.T_gamma) for c in spec.controllers}
    summary: dict = {"case": str(spec.case), "scenario": spec.scenario, "controllers": {}}

    if spec.scenario == "static" and spec.timeline is None:
        plant = spec.plant or "linear"
        d = ExogenousState.from_case(case)
        f_star = None
        if spec.oracle:
            problem = BoxQP.from_case(case, model, phi, d=d)
            f_star = problem.f(centralized_oracle(problem))
            summary["oracle_objective"] = f_star

        def job(name):
            return run_offline(case, cfgs[name], plant=plant, tol=spec.tol, max_iter=spec.max_iter, d=d, phi=phi)
    else:
        plant = spec.plant or "nonlinear"
        if spec.timeline is not None:
            tl = ScenarioTimeline.from_csv(spec.timeline, case.labels[1:])
        else:
            tl = make_scenario(spec.scenario, case, spec.scenario_params, seed=spec.seed)
        f_star = None
        if spec.oracle:
            d = tl.exogenous(tl.steps - 1)
            problem = BoxQP.from_case(case, model, phi, d=d, bounds=case.var_limits(tl.p_pv[-1]))
            f_star = problem.f(centralized_oracle(problem))
            summary["oracle_objective_final_step"] = f_star

        def job(name):
            return run_online(case, tl, cfgs[name], plant=plant, phi=phi)

    summary["plant"] = plant
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        traces = dict(zip(spec.controllers, pool.map(job, spec.controllers)))
    for name, tr in traces.items():
        s = metrics(tr)
        if spec.scenario == "static" and spec.timeline is None:
            s["iterations"] = tr.steps - 1
            if f_star is not None:
                s["iterations_to_gap"] = _first_at_or_below(tr.objective - f_star, spec.tol)
        else:
            s["settling_step"] = settling_step(tr, 1e-4)
        summary["controllers"][name] = s
    return summary, traces


def cmd_run(args) -> int:
    if args.spec:
        spec = RunSpec.from_json(args.spec)
    else:
        if args.case is None:
            raise InputError("a case file (or --spec) is required")
        spec = RunSpec(
            case=Path(args.case), scenario=args.scenario, seed=args.seed,
            timeline=Path(args.timeline) if args.timeline else None,
            controllers=[c.strip() for c in args.controllers.split(",") if c.strip()],
            plant=args.plant, out=Path(args.out), tol=args.tol, max_iter=args.max_iter,
            oracle=args.oracle, T_gamma=args.t_gamma,
        )
    spec.case = Path(spec.case)
    summary, traces = execute(spec)
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    labels = load_case(spec.case).labels[1:]
    for name, tr in traces.items():
        tr.to_csv(out / f"trace_{name}.csv", labels)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    failed = [n for n, tr in traces.items() if tr.error]
    for n in failed:
        print(f"{n}: {traces[n].error}", file=sys.stderr)
    return EXIT_NUMERIC if failed else EXIT_OK


# ------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="asalvc", description="Local Volt/VAr control toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate controllers on a case")
    r.add_argument("case", nargs="?", help="case JSON file")
    r.add_argument("--spec", help="run specification JSON (overrides flags)")
    r.add_argument("--scenario", default="static", choices=["static", "sudden_change", "continuous"])
    r.add_argument("--timeline", help="timeline CSV (online run)")
    r.add_argument("--controllers", default="asalvc", help="comma-separated: none,cdc,ddc,gpdc,sgpdc,asalvc")
    r.add_argument("--plant", choices=["linear", "nonlinear"], help="default: linear offline, nonlinear online")
    r.add_argument("--out", default="run", help="output directory")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--tol", type=float, default=1e-6)
    r.add_argument("--max-iter", type=int, default=10_000)
    r.add_argument("--t-gamma", type=int, default=6, help="online momentum reset period (updates)")
    r.add_argument("--oracle", action="store_true", help="add the centralized optimum to the summary")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("synth-l", help="synthesize the diagonal metric L")
    s.add_argument("case")
    s.add_argument("-o", "--out")
    s.add_argument("--tol", type=float, default=1e-8)
    s.set_defaults(func=cmd_synth_l)

    c = sub.add_parser("check", help="run the invariant battery on a case")
    c.add_argument("case")
    c.add_argument("--corrupt-a", action="store_true", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_check)

    m = sub.add_parser("make-case", help="write a synthetic radial feeder")
    m.add_argument("-n", "--buses", type=int, default=123)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--der-kvar", type=float, default=10.0, help="fixed +/- VAr box per DER")
    m.add_argument("--capacity-kva", type=float, help="inverter capacity (capacity-derived limits)")
    m.add_argument("--slack-voltage", type=float, default=1.0)
    m.add_argument("-o", "--out", required=True)
    m.set_defaults(func=cmd_make_case)

    t = sub.add_parser("make-timeline", help="write a scenario timeline CSV")
    t.add_argument("case")
    t.add_argument("--kind", default="continuous", choices=["static", "sudden_change", "continuous"])
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--steps", type=int)
    t.add_argument("--dt", type=float)
    t.add_argument("--change-step", type=int)
    t.add_argument("--multiplier", type=float)
    t.add_argument("--pv-peak", type=float)
    t.add_argument("--load-scale", type=float)
    t.add_argument("-o", "--out", required=True)
    t.set_defaults(func=cmd_make_timeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, CaseError, OSError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
