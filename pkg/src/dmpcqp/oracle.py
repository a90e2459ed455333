"""Centralized reference solvers.

This module provides single-process ground truth for the distributed
machinery: a dense primal active-set QP solver working on saddle-point KKT
systems, a brute-force solver that enumerates candidate active sets, and a
centralized receding-horizon rollout.  It deliberately shares no solver code
with the distributed path (no null-space condensing, no decomposed CG); only
problem construction from :mod:`dmpcqp.qp_builder` is reused.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.optimize

from .errors import InfeasibleProblem, SolverError
from .model import NetworkModel
from .qp_builder import (StackedQp, build_network_qps, rollout_feasible_point,
                         stack_global)

_RATIO_TOL = 1e-12
_DEGENERATE_STEP = 1e-12


@dataclass(frozen=True)
class DenseQp:
    """Minimize ``0.5 z' H z`` subject to equalities and one-sided rows."""

    hessian: np.ndarray
    eq_matrix: np.ndarray
    eq_rhs: np.ndarray
    ineq_matrix: np.ndarray
    ineq_rhs: np.ndarray

    @property
    def size(self) -> int:
        return self.hessian.shape[0]


@dataclass(frozen=True)
class DenseSolution:
    z: np.ndarray
    eq_duals: np.ndarray
    ineq_duals: np.ndarray
    active: tuple[int, ...]
    objective: float
    iterations: int
    kkt_residual: float


def dense_qp_from_stacked(stacked: StackedQp) -> DenseQp:
    """Fold the coupling rows into the equality block of a stacked QP."""
    if stacked.cpl_matrix.shape[0]:
        eq = np.vstack([stacked.eq_matrix, stacked.cpl_matrix])
        rhs = np.concatenate([stacked.eq_rhs,
                              np.zeros(stacked.cpl_matrix.shape[0])])
    else:
        eq, rhs = stacked.eq_matrix, stacked.eq_rhs
    return DenseQp(hessian=stacked.hessian, eq_matrix=eq, eq_rhs=rhs,
                   ineq_matrix=stacked.ineq_matrix,
                   ineq_rhs=stacked.ineq_rhs)


class PreparedKkt:
    """LU factorization of the equality-only saddle-point matrix.

    Active bound rows are appended as a low-rank border, so one
    factorization serves every working set of the same problem structure.
    """

    def __init__(self, qp: DenseQp):
        n, me = qp.size, qp.eq_matrix.shape[0]
        K = np.zeros((n + me, n + me))
        K[:n, :n] = qp.hessian
        K[:n, n:] = qp.eq_matrix.T
        K[n:, :n] = qp.eq_matrix
        try:
            self.lu = scipy.linalg.lu_factor(K)
        except scipy.linalg.LinAlgError as exc:  # pragma: no cover
            raise SolverError(f"singular saddle-point matrix: {exc}") from exc
        self.n = n
        self.m_eq = me

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return scipy.linalg.lu_solve(self.lu, rhs)


def prepare_kkt(qp: DenseQp) -> PreparedKkt:
    return PreparedKkt(qp)


def _phase1(qp: DenseQp) -> np.ndarray:
    n = qp.size
    res = scipy.optimize.linprog(
        c=np.zeros(n),
        A_ub=qp.ineq_matrix if qp.ineq_matrix.shape[0] else None,
        b_ub=qp.ineq_rhs if qp.ineq_matrix.shape[0] else None,
        A_eq=qp.eq_matrix if qp.eq_matrix.shape[0] else None,
        b_eq=qp.eq_rhs if qp.eq_matrix.shape[0] else None,
        bounds=[(None, None)] * n,
        method="highs",
    )
    if res.status == 2:
        raise InfeasibleProblem("phase-1 linear program is infeasible")
    if not res.success:
        raise SolverError(f"phase-1 linear program failed: {res.message}")
    return np.asarray(res.x, dtype=float)


def kkt_residual(qp: DenseQp, z, eq_duals, ineq_duals, active=()) -> float:
    """Max-norm KKT residual (stationarity, feasibility, complementarity)."""
    grad = qp.hessian @ z
    if qp.eq_matrix.shape[0]:
        grad = grad + qp.eq_matrix.T @ eq_duals
    nu = np.zeros(qp.ineq_matrix.shape[0])
    if len(active):
        nu[list(active)] = ineq_duals
    if nu.size:
        grad = grad + qp.ineq_matrix.T @ nu
    parts = [np.abs(grad).max() if grad.size else 0.0]
    if qp.eq_matrix.shape[0]:
        parts.append(np.abs(qp.eq_matrix @ z - qp.eq_rhs).max())
    if qp.ineq_matrix.shape[0]:
        slack = qp.ineq_matrix @ z - qp.ineq_rhs
        parts.append(max(0.0, slack.max()))
        parts.append(np.abs(nu * slack).max())
        parts.append(max(0.0, -nu.min()) if nu.size else 0.0)
    return float(max(parts))


def solve_dense_qp(qp: DenseQp, z0: np.ndarray | None = None, *,
                   prepared: PreparedKkt | None = None,
                   warm_active: Sequence[int] = (),
                   eps_step: float = 1e-11, eps_dual: float = 1e-10,
                   max_iter: int | None = None) -> DenseSolution:
    """Primal active-set method on the stacked dense QP.

    Starts from ``z0`` when given (must satisfy every constraint, and hold
    ``warm_active`` rows with equality), otherwise from a phase-1 linear
    program.  Each inner equality-constrained step is solved through the
    bordered saddle-point system; small equality drift in the start point is
    corrected by the first step.

    Returns
    -------
    DenseSolution
        Minimizer with working-set multipliers (equality duals over all
        rows, inequality duals aligned with ``active``).
    """
    n_ineq = qp.ineq_matrix.shape[0]
    if max_iter is None:
        max_iter = 3 * n_ineq + 30
    if prepared is None:
        prepared = prepare_kkt(qp)
    if z0 is None:
        z = _phase1(qp)
        active: list[int] = []
    else:
        z = np.asarray(z0, dtype=float).copy()
        active = list(warm_active)
        if qp.eq_matrix.shape[0] and \
                np.abs(qp.eq_matrix @ z - qp.eq_rhs).max() > 1e-7:
            raise ValueError("start point violates equality rows")
        if n_ineq and (qp.ineq_matrix @ z - qp.ineq_rhs).max() > 1e-8:
            raise ValueError("start point violates inequality rows")

    n, me = prepared.n, prepared.m_eq
    for it in range(1, max_iter + 1):
        rhs = np.concatenate([-(qp.hessian @ z),
                              qp.eq_rhs - qp.eq_matrix @ z])
        base = prepared.solve(rhs)
        if active:
            E = qp.ineq_matrix[active]
            F = np.zeros((n + me, len(active)))
            F[:n] = E.T
            X = prepared.solve(F)
            S = E @ X[:n]
            target = qp.ineq_rhs[active] - E @ z
            try:
                nu = np.linalg.solve(S, E @ base[:n] - target)
            except np.linalg.LinAlgError as exc:
                raise SolverError(
                    f"dependent working set {tuple(active)}") from exc
            y = base - X @ nu
        else:
            nu = np.zeros(0)
            y = base
        p, mu = y[:n], y[n:]

        if np.abs(p).max(initial=0.0) <= eps_step * (1.0 + np.abs(z).max(initial=0.0)):
            if nu.size == 0 or nu.min() >= -eps_dual:
                obj = 0.5 * float(z @ (qp.hessian @ z))
                res = kkt_residual(qp, z, mu, nu, active)
                return DenseSolution(z=z, eq_duals=mu, ineq_duals=nu,
                                     active=tuple(active), objective=obj,
                                     iterations=it, kkt_residual=res)
            active.pop(int(np.argmin(nu)))
            continue

        alpha, blocking = 1.0, None
        if n_ineq:
            cp = qp.ineq_matrix @ p
            slack = qp.ineq_rhs - qp.ineq_matrix @ z
            for row in range(n_ineq):
                if row in active or cp[row] <= _RATIO_TOL:
                    continue
                ratio = max(0.0, slack[row] / cp[row])
                if ratio < alpha:
                    alpha, blocking = ratio, row
        if alpha >= _DEGENERATE_STEP:
            z = z + alpha * p
        if blocking is not None:
            active.append(blocking)
    raise SolverError(f"active-set oracle hit the {max_iter}-iteration cap")


def enumerate_active_sets(qp: DenseQp, max_ineq: int = 20) -> DenseSolution:
    """Brute-force minimizer by enumerating candidate active sets.

    Every subset of inequality rows is treated as equalities, the resulting
    KKT system solved by least squares, and candidates kept when the system
    is consistent, the remaining rows feasible, and the subset multipliers
    non-negative.  Intended for tiny problems; refuses more than
    ``max_ineq`` inequality rows.
    """
    n_ineq = qp.ineq_matrix.shape[0]
    if n_ineq > max_ineq:
        raise ValueError(f"{n_ineq} inequality rows exceed cap {max_ineq}")
    n, me = qp.size, qp.eq_matrix.shape[0]
    best = None
    for size in range(n_ineq + 1):
        for subset in itertools.combinations(range(n_ineq), size):
            A = np.vstack([qp.eq_matrix, qp.ineq_matrix[list(subset)]]) \
                if subset else qp.eq_matrix
            b = np.concatenate([qp.eq_rhs, qp.ineq_rhs[list(subset)]]) \
                if subset else qp.eq_rhs
            ma = A.shape[0]
            KKT = np.zeros((n + ma, n + ma))
            KKT[:n, :n] = qp.hessian
            KKT[:n, n:] = A.T
            KKT[n:, :n] = A
            rhs = np.concatenate([np.zeros(n), b])
            sol, *_ = np.linalg.lstsq(KKT, rhs, rcond=None)
            scale = 1.0 + np.abs(rhs).max(initial=0.0)
            if np.abs(KKT @ sol - rhs).max(initial=0.0) > 1e-8 * scale:
                continue
            z, duals = sol[:n], sol[n:]
            others = [r for r in range(n_ineq) if r not in subset]
            if others and (qp.ineq_matrix[others] @ z
                           - qp.ineq_rhs[others]).max() > 1e-9:
                continue
            nu = duals[me:]
            if nu.size and nu.min() < -1e-9:
                continue
            obj = 0.5 * float(z @ (qp.hessian @ z))
            if best is None or obj < best.objective - 1e-12:
                best = DenseSolution(
                    z=z, eq_duals=duals[:me], ineq_duals=nu,
                    active=subset, objective=obj, iterations=0,
                    kkt_residual=kkt_residual(qp, z, duals[:me], nu, subset))
    if best is None:
        raise InfeasibleProblem("no active set yields a feasible KKT point")
    return best


def stacked_dynamics(net: NetworkModel) -> tuple[np.ndarray, np.ndarray]:
    """Blockwise dense assembly of the network update ``x+ = A x + B u``."""
    dims = net.state_dims()
    mdims = net.input_dims()
    offs = np.concatenate(([0], np.cumsum(dims)))
    moffs = np.concatenate(([0], np.cumsum(mdims)))
    A = np.zeros((offs[-1], offs[-1]))
    B = np.zeros((offs[-1], moffs[-1]))
    for agent in net.agents:
        i = agent.index
        A[offs[i]:offs[i + 1], offs[i]:offs[i + 1]] = agent.A_self
        B[offs[i]:offs[i + 1], moffs[i]:moffs[i + 1]] = agent.B
        for j, block in agent.A_in.items():
            A[offs[i]:offs[i + 1], offs[j]:offs[j + 1]] = block
    return A, B


@dataclass(frozen=True)
class Rollout:
    """Closed-loop trajectories from a receding-horizon run.

    ``states`` has shape ``(steps + 1, sum n_i)``, ``inputs`` has shape
    ``(steps, sum m_i)``; both are sliced per agent via the offset tuples.
    """

    states: np.ndarray
    inputs: np.ndarray
    state_offsets: tuple[int, ...]
    input_offsets: tuple[int, ...]
    iterations: tuple[int, ...]

    def state_of(self, t: int, i: int) -> np.ndarray:
        o = self.state_offsets
        return self.states[t, o[i]:o[i + 1]]

    def input_of(self, t: int, i: int) -> np.ndarray:
        o = self.input_offsets
        return self.inputs[t, o[i]:o[i + 1]]


def _warm_inputs(net: NetworkModel, horizon: int, active, stacked: StackedQp):
    """Per-agent input trajectories that hold the given bound rows tight."""
    inputs = [np.zeros((horizon, a.m)) for a in net.agents]
    for row in active:
        agent = int(np.searchsorted(stacked.ineq_offsets, row, side="right")) - 1
        local = row - stacked.ineq_offsets[agent]
        a = net.agents[agent]
        block = horizon * a.m
        upper = local < block
        k, c = divmod(local if upper else local - block, a.m)
        inputs[agent][k, c] = a.u_hi[c] if upper else a.u_lo[c]
    return inputs


def centralized_mpc_rollout(net: NetworkModel, x0s: Sequence[np.ndarray],
                            horizon: int, steps: int) -> Rollout:
    """Receding-horizon control with the dense oracle as the QP solver.

    Per sample the stacked QP is refreshed with the measured state, a
    feasible start is built by simulating the network under inputs that keep
    the previous sample's active bounds tight, and the first input move of
    the minimizer is applied to the plant.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    qps = build_network_qps(net, horizon, x0s)
    stacked = stack_global(qps)
    dense = dense_qp_from_stacked(stacked)
    prepared = prepare_kkt(dense)
    A, B = stacked_dynamics(net)
    dims = net.state_dims()
    offs = tuple(int(v) for v in np.concatenate(([0], np.cumsum(dims))))
    moffs = tuple(int(v) for v in
                  np.concatenate(([0], np.cumsum(net.input_dims()))))
    eq_offsets = stacked.eq_offsets

    x = np.concatenate([np.asarray(v, dtype=float).ravel() for v in x0s])
    states = [x.copy()]
    inputs = []
    iters = []
    active: tuple[int, ...] = ()
    eq_rhs = dense.eq_rhs.copy()
    for _ in range(steps):
        for i in range(net.n_agents):
            eq_rhs[eq_offsets[i]:eq_offsets[i] + dims[i]] = \
                x[offs[i]:offs[i + 1]]
        sample_qp = replace(dense, eq_rhs=eq_rhs.copy())
        x_parts = [x[offs[i]:offs[i + 1]] for i in range(net.n_agents)]
        z0 = stacked.join(rollout_feasible_point(
            net, horizon, x_parts, _warm_inputs(net, horizon, active, stacked)))
        sol = solve_dense_qp(sample_qp, z0, prepared=prepared,
                             warm_active=active)
        active = sol.active
        u = np.concatenate([
            stacked.split(sol.z)[i][qps[i].layout.u_slice(0)]
            for i in range(net.n_agents)])
        x = A @ x + B @ u
        states.append(x.copy())
        inputs.append(u)
        iters.append(sol.iterations)
    return Rollout(states=np.array(states), inputs=np.array(inputs),
                   state_offsets=offs, input_offsets=moffs,
                   iterations=tuple(iters))
