"""Distributed active-set QP solvers for networked model predictive control.

The package builds partially separable QPs for networks of coupled linear
systems (:mod:`~dmpcqp.model`, :mod:`~dmpcqp.qp_builder`), solves them with
a distributed primal active-set method whose inner systems are condensed
per agent and resolved by a decentralized conjugate gradient
(:mod:`~dmpcqp.condense`, :mod:`~dmpcqp.dcg`, :mod:`~dmpcqp.asm`), and ships
a consensus ADMM baseline (:mod:`~dmpcqp.admm`), centralized reference
solvers (:mod:`~dmpcqp.oracle`), a metered communication fabric
(:mod:`~dmpcqp.fabric`), and a closed-loop experiment CLI
(:mod:`~dmpcqp.cli`).
"""

from .admm import (ADMM_PRESETS, AdmmConfig, AdmmResult, admm_average,
                   admm_converged, admm_dual_update, admm_local_qp,
                   admm_solve, shift_averaged)
from .asm import (AsmConfig, AsmResult, AsmState, AsmStats, asm_solve,
                  compute_step_length, initialize_feasible, network_objective,
                  shift_active, verify_iterate)
from .condense import (CondensedAgent, DualRecovery, WorkingConstraints,
                       backsubstitute, condense, recover_duals,
                       working_constraints)
from .dcg import (DcgResult, SchurPiece, as_piece, build_overlaps, dcg_init,
                  dcg_iterate, dcg_solve)
from .fabric import CommLedger, Fabric, InProcessTransport, verify_comm_identities
from .model import (AgentModel, NetworkModel, PlantState,
                    build_chain_of_masses, plant_step)
from .oracle import (DenseQp, DenseSolution, Rollout, centralized_mpc_rollout,
                     dense_qp_from_stacked, enumerate_active_sets,
                     kkt_residual, prepare_kkt, solve_dense_qp,
                     stacked_dynamics)
from .qp_builder import (AgentQP, CouplingIndex, StackedQp, VariableLayout,
                         build_agent_qp, build_coupling_index,
                         build_network_qps, rollout_feasible_point,
                         stack_global, update_initial_state)
from .cli import ExperimentConfig, compare_runs, load_network, run_experiment, save_network

__all__ = [name for name in dir() if not name.startswith("_")]
