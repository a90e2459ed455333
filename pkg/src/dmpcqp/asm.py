"""Distributed primal active-set method over a message fabric.

The solver keeps one working set per agent.  Every outer iteration condenses
the agents' step systems onto their working-set null spaces, solves the
coupling-multiplier system with the decentralized conjugate gradient, and
back-substitutes per-agent steps.  When all steps are negligible the
working-set multipliers are recovered locally and either certify optimality
or name the constraint to release; otherwise the largest feasible step is
taken and the blocking bound activated.

Communication per outer iteration is one flag round plus one scalar min
reduction (the step length or the smallest multiplier); all remaining
traffic belongs to the inner CG.  The feasible-point initialization resolves
the warm-started working set in the absolute variable and activates each
agent's most violated bound until none remain.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .condense import backsubstitute, condense, recover_duals, working_constraints
from .dcg import as_piece, dcg_solve
from .errors import (AsmIterationLimit, FeasibilityViolation, InfeasibleStart,
                     RankDeficientWorkingSet)
from .fabric import CommLedger, Fabric

_RATIO_TOL = 1e-12
_DEGENERATE_STEP = 1e-12


@dataclass
class AsmConfig:
    """Tolerances and caps for the distributed active-set solver.

    ``eps_step`` declares a per-agent step negligible (max norm),
    ``eps_dcg`` is the inner CG residual tolerance, ``eps_dual`` the
    tolerance below zero accepted for working-set multipliers, and
    ``eps_violation`` the bound violation that triggers activation.  The
    ``tol_*`` values guard the per-iterate feasibility checks performed when
    ``check_iterates`` is on.
    """

    eps_step: float = 1e-6
    eps_dcg: float = 1e-8
    eps_dual: float = 1e-8
    eps_violation: float = 1e-9
    tol_eq: float = 1e-8
    tol_ineq: float = 1e-9
    tol_cpl: float = 1e-7
    tol_objective: float = 1e-10
    max_outer: int | None = None
    max_dcg: int | None = None
    max_init_rounds: int | None = None
    check_iterates: bool = True


@dataclass
class AsmStats:
    """Iteration counters and the communication consumed by one solve."""

    outer_iterations: int = 0
    init_rounds: int = 0
    dcg_feasible_guess: int = 0
    dcg_active_set: int = 0
    ledger: CommLedger | None = None

    @property
    def dcg_total(self) -> int:
        return self.dcg_feasible_guess + self.dcg_active_set


@dataclass
class AsmState:
    """Solver state between phases: iterates, working sets, multiplier seed."""

    z: list[np.ndarray]
    active: list[list[int]]
    lambdas: list[np.ndarray]
    phase: str
    stats: AsmStats


@dataclass(frozen=True)
class AsmResult:
    z: list[np.ndarray]
    active: tuple[tuple[int, ...], ...]
    eq_duals: list[np.ndarray]
    ineq_duals: list[np.ndarray]
    cpl_duals: list[np.ndarray]
    objective: float
    stats: AsmStats


def compute_step_length(z: np.ndarray, dz: np.ndarray, qp,
                        active: Sequence[int]) -> tuple[float, int | None]:
    """Largest fraction of ``dz`` keeping every inactive bound feasible.

    Returns ``(alpha, blocking_row)`` with ``blocking_row = None`` for a full
    step.  Ties pick the lowest row index.  A bound already violated beyond
    tolerance marks the iterate infeasible and raises.
    """
    if qp.ineq_matrix.shape[0] == 0:
        return 1.0, None
    cz = qp.ineq_matrix @ z
    cdz = qp.ineq_matrix @ dz
    slack = qp.ineq_rhs - cz
    active = set(int(a) for a in active)
    alpha, blocking = 1.0, None
    for row in range(qp.ineq_matrix.shape[0]):
        if row in active or cdz[row] <= _RATIO_TOL:
            continue
        if slack[row] < -1e-9:
            raise FeasibilityViolation(
                f"agent {qp.index}: bound row {row} violated by "
                f"{-slack[row]:.3e} before stepping")
        ratio = max(0.0, slack[row] / cdz[row])
        if ratio < alpha:
            alpha, blocking = ratio, row
    return alpha, blocking


def _condense_all(qps, active, gradients, *, homogeneous, repair=False):
    """Condense every agent, optionally dropping dependent warm-start rows."""
    cas, works = [], []
    for qp, act in zip(qps, active):
        grad = gradients[qp.index] if gradients is not None else None
        while True:
            work = working_constraints(qp, act, homogeneous=homogeneous)
            try:
                cas.append(condense(qp, work, grad))
                works.append(work)
                break
            except RankDeficientWorkingSet as exc:
                if not repair or exc.active_position is None:
                    raise
                del act[exc.active_position]
    return cas, works


def _coupling_residual(qps, zs) -> float:
    n_c = qps[0].n_coupling
    if n_c == 0:
        return 0.0
    total = np.zeros(n_c)
    for qp, z in zip(qps, zs):
        if qp.coupled_rows.size:
            total[qp.coupled_rows] += qp.cpl_local @ z
    return float(np.abs(total).max())


def verify_iterate(qps, zs, cfg: AsmConfig) -> None:
    """Assert primal feasibility of a distributed iterate.

    Checks equality rows, bound rows, and the assembled coupling rows
    against the configured tolerances; raises
    :class:`FeasibilityViolation` naming the worst offender.
    """
    for qp, z in zip(qps, zs):
        eq = float(np.abs(qp.eq_matrix @ z - qp.eq_rhs).max(initial=0.0))
        if eq > cfg.tol_eq:
            raise FeasibilityViolation(
                f"agent {qp.index}: equality residual {eq:.3e}")
        if qp.ineq_matrix.shape[0]:
            vi = float((qp.ineq_matrix @ z - qp.ineq_rhs).max())
            if vi > cfg.tol_ineq:
                raise FeasibilityViolation(
                    f"agent {qp.index}: bound violation {vi:.3e}")
    cpl = _coupling_residual(qps, zs)
    if cpl > cfg.tol_cpl:
        raise FeasibilityViolation(f"coupling residual {cpl:.3e}")


def network_objective(qps, zs) -> float:
    """Summed quadratic objective ``0.5 sum_i z_i' H_i z_i``."""
    return 0.5 * float(sum(z @ (qp.hessian @ z) for qp, z in zip(qps, zs)))


def shift_active(qp, rows: Sequence[int]) -> list[int]:
    """Advance one agent's active bound rows by one time step.

    A receding-horizon plan marches forward each sample, so a bound that was
    active at step ``k`` of the old plan is expected at step ``k - 1`` of the
    new one.  Bound rows are stored time-major within each one-sided block,
    so the move is a uniform offset of ``-n_inputs``; step-0 rows fall off
    the front and the fresh terminal step starts unpinned.
    """
    m = qp.layout.n_inputs
    half = qp.layout.horizon * m
    shifted = []
    for row in rows:
        if (int(row) % half) >= m:
            shifted.append(int(row) - m)
    return shifted


def initialize_feasible(qps, warm_active, fabric: Fabric,
                        cfg: AsmConfig | None = None,
                        stats: AsmStats | None = None) -> AsmState:
    """Produce a primal feasible iterate whose working set is consistent.

    Starting from the warm-started working set (dependent warm rows are
    dropped, oldest first), the working-set system is solved in the absolute
    variable with a cold multiplier.  Agents then activate their most
    violated bound and re-solve until every bound holds; the violation flags
    ride one coordinator round per pass, charged to the ``init`` phase.
    """
    cfg = cfg or AsmConfig()
    stats = stats if stats is not None else AsmStats()
    M = len(qps)
    active = [list(dict.fromkeys(int(r) for r in rows))
              for rows in (warm_active or [[] for _ in range(M)])]
    max_rounds = cfg.max_init_rounds
    if max_rounds is None:
        max_rounds = sum(qp.n_ineq for qp in qps) + 2
    max_dcg = cfg.max_dcg
    repair = True
    for _ in range(max_rounds):
        cas, _ = _condense_all(qps, active, None, homogeneous=False,
                               repair=repair)
        repair = False
        sol = dcg_solve([as_piece(ca) for ca in cas], None, cfg.eps_dcg,
                        fabric, max_iter=max_dcg)
        stats.dcg_feasible_guess += sol.iterations
        stats.init_rounds += 1
        zs = [backsubstitute(ca, lam) for ca, lam in zip(cas, sol.lambdas)]
        worst = []
        for qp, z, act in zip(qps, zs, active):
            viol = qp.ineq_matrix @ z - qp.ineq_rhs
            viol[list(act)] = -np.inf
            row = int(np.argmax(viol)) if viol.size else 0
            worst.append(row if viol.size and viol[row] > cfg.eps_violation
                         else None)
        clean = fabric.global_flags([w is None for w in worst], phase="init")
        if clean:
            return AsmState(z=zs, active=active, lambdas=list(sol.lambdas),
                            phase="feasible", stats=stats)
        for act, row in zip(active, worst):
            if row is not None:
                act.append(row)
    raise InfeasibleStart(stats.init_rounds)


def asm_solve(qps, warm_active=None, cfg: AsmConfig | None = None,
              fabric: Fabric | None = None) -> AsmResult:
    """Distributed active-set solve of the partially separable QP.

    Parameters
    ----------
    qps : sequence of AgentQP
        One QP per agent, sharing a coupling index.
    warm_active : sequence of row lists, optional
        Working set to warm start from (e.g. the previous sample's).
    cfg : AsmConfig, optional
    fabric : Fabric, optional
        Communication fabric; a fresh metered fabric is created when
        omitted.

    Returns
    -------
    AsmResult
        Minimizing iterates, final working sets, working-set and coupling
        multipliers, and solver statistics.
    """
    cfg = cfg or AsmConfig()
    fabric = fabric if fabric is not None else Fabric(len(qps))
    start = fabric.ledger.snapshot()
    stats = AsmStats()
    state = initialize_feasible(qps, warm_active, fabric, cfg, stats)
    zs, active, lam_seed = state.z, state.active, state.lambdas
    if cfg.check_iterates:
        verify_iterate(qps, zs, cfg)
    objective = network_objective(qps, zs)

    max_outer = cfg.max_outer
    if max_outer is None:
        max_outer = 10 * sum(qp.n_ineq for qp in qps)
    trace = []
    for _ in range(max_outer):
        stats.outer_iterations += 1
        gradients = [qp.hessian @ z for qp, z in zip(qps, zs)]
        cas, works = _condense_all(qps, active, gradients, homogeneous=True)
        sol = dcg_solve([as_piece(ca) for ca in cas], lam_seed, cfg.eps_dcg,
                        fabric, max_iter=cfg.max_dcg)
        stats.dcg_active_set += sol.iterations
        lam_seed = list(sol.lambdas)
        dzs = [backsubstitute(ca, lam) for ca, lam in zip(cas, sol.lambdas)]
        small = [float(np.abs(dz).max(initial=0.0)) < cfg.eps_step
                 for dz in dzs]
        if fabric.global_flags(small, phase="asm"):
            recoveries = [recover_duals(qp, work, grad, lam)
                          for qp, work, grad, lam in
                          zip(qps, works, gradients, sol.lambdas)]
            mins = []
            for rec in recoveries:
                nu = rec.ineq_duals
                mins.append(float(nu.min()) if nu.size else np.inf)
            worst, agent = fabric.global_reduce(mins, op="min", phase="asm")
            if worst >= -cfg.eps_dual:
                stats.ledger = fabric.ledger.delta(start)
                return AsmResult(
                    z=zs, active=tuple(tuple(a) for a in active),
                    eq_duals=[r.eq_duals for r in recoveries],
                    ineq_duals=[r.ineq_duals for r in recoveries],
                    cpl_duals=list(sol.lambdas),
                    objective=objective, stats=stats)
            nu = recoveries[agent].ineq_duals
            pos = int(np.argmin(nu))
            trace.append(("release", agent, active[agent][pos]))
            del active[agent][pos]
        else:
            steps = [compute_step_length(z, dz, qp, act)
                     for z, dz, qp, act in zip(zs, dzs, qps, active)]
            alpha, agent = fabric.global_reduce(
                [s[0] for s in steps], op="min", phase="asm")
            alpha = min(alpha, 1.0)
            if alpha >= _DEGENERATE_STEP:
                zs = [z + alpha * dz for z, dz in zip(zs, dzs)]
            if alpha < 1.0:
                blocking = steps[agent][1]
                trace.append(("activate", agent, blocking))
                active[agent].append(blocking)
            else:
                trace.append(("step", -1, None))
            if cfg.check_iterates:
                verify_iterate(qps, zs, cfg)
                new_objective = network_objective(qps, zs)
                if new_objective > objective + cfg.tol_objective * (
                        1.0 + abs(objective)):
                    raise FeasibilityViolation(
                        f"objective increased from {objective:.12e} to "
                        f"{new_objective:.12e}")
                objective = new_objective
            else:
                objective = network_objective(qps, zs)
    raise AsmIterationLimit(stats.outer_iterations, trace[-20:])
