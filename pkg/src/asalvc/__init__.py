"""Self-adaptive local Volt/VAr control on radial distribution feeders."""

from .acpf import BranchFlowSolver, PFSolution, PowerFlowError, objective_m, solve_branch_flow
from .controllers import AsalvcBusState, ControllerConfig, Kind, VarLimits, default_config
from .lindistflow import ExogenousState, SensitivityModel, build_sensitivity, v_linear, v_par
from .network import CaseError, NetworkCase, build_topology, incidence, load_case, save_case
from .optimizer import BoxQP, centralized_oracle, gfgm_solve
from .simulator import ScenarioTimeline, SimulationTrace, make_scenario, metrics, run_offline, run_online
from .synthesis import LDiag, PhiModel, diag_dominant_seed, phi_from_A, solve_trace_min_L, verify_psd

__version__ = "0.1.0"
