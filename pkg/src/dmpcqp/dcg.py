"""Decentralized conjugate gradient for the coupling-multiplier system.

The aggregated system ``(sum_i S_i) lam = sum_i s_i`` over the coupling rows
is solved without ever assembling it: each agent keeps only the entries of
the multiplier, residual, and search direction on its own coupling rows
(every row is shared by exactly two agents).  Scalar curvature and residual
norms are formed from local contributions weighted by the inverse of the
row multiplicity and combined through two coordinator sums per iteration;
matrix-vector products are completed by exchanging shared entries with
neighbors.  Per iteration the fabric charges ``4 M`` global floats, ``2 M``
global booleans, and ``2 n_c`` local floats; the residual bootstrap before
the first iteration is charged to the ``init`` phase.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CurvatureBreakdown, DcgIterationLimit, InconsistentWarmStart
from .fabric import Fabric


@dataclass(frozen=True)
class SchurPiece:
    """One agent's compressed contribution to the aggregated system."""

    agent: int
    rows: np.ndarray
    schur: np.ndarray
    schur_rhs: np.ndarray


def as_piece(ca) -> SchurPiece:
    """View a condensed agent as its Schur contribution."""
    return SchurPiece(agent=ca.agent, rows=ca.rows, schur=ca.schur,
                      schur_rhs=ca.schur_rhs)


@dataclass
class DcgLocalState:
    """Per-agent conjugate-gradient state, compressed to the agent's rows."""

    agent: int
    rows: np.ndarray
    schur: np.ndarray
    lam: np.ndarray
    residual: np.ndarray
    direction: np.ndarray
    inv_mult: np.ndarray
    eta: float = 0.0
    iteration: int = 0

    def residual_norm(self) -> float:
        return float(np.abs(self.residual).max(initial=0.0))


@dataclass(frozen=True)
class DcgResult:
    lambdas: list[np.ndarray]
    iterations: int
    residual_inf: float
    converged: bool


def build_overlaps(pieces: Sequence[SchurPiece]) -> dict:
    """Index maps of shared rows per directed agent pair."""
    overlaps = {}
    for a in range(len(pieces)):
        for b in range(a + 1, len(pieces)):
            shared, ia, ib = np.intersect1d(
                pieces[a].rows, pieces[b].rows,
                assume_unique=True, return_indices=True)
            if shared.size:
                overlaps[(a, b)] = (ia, ib)
                overlaps[(b, a)] = (ib, ia)
    return overlaps


def _multiplicities(pieces: Sequence[SchurPiece]) -> list[np.ndarray]:
    counts = {}
    for piece in pieces:
        for row in piece.rows:
            counts[int(row)] = counts.get(int(row), 0) + 1
    bad = {r: c for r, c in counts.items() if c != 2}
    if bad:
        raise ValueError(f"coupling rows not shared by exactly two agents: {bad}")
    return [np.full(piece.rows.size, 2.0) for piece in pieces]


def _exchange_shared(vectors, overlaps, fabric: Fabric, phase: str):
    """Send shared entries of per-agent vectors and sum them at receivers.

    Returns per-agent ``sum_j I_ij vectors_j`` including the own term; the
    received contributions are accumulated in ascending sender index so the
    result is reproducible bit for bit.
    """
    payloads = {}
    for (src, dst), (src_idx, _) in overlaps.items():
        payloads[(src, dst)] = vectors[src][src_idx]
    delivered = fabric.neighbor_exchange(payloads, phase=phase)
    sums = [vec.copy() for vec in vectors]
    for dst in range(len(vectors)):
        senders = sorted(src for (src, d) in overlaps if d == dst)
        for src in senders:
            _, dst_idx = overlaps[(src, dst)]
            sums[dst][dst_idx] += delivered[(src, dst)]
    return sums


def dcg_init(pieces: Sequence[SchurPiece],
             lambda0: Sequence[np.ndarray] | None,
             fabric: Fabric, overlaps=None, *, phase: str = "init"):
    """Bootstrap the per-agent CG states for a warm-started multiplier.

    Validates that the warm start agrees exactly on shared rows, then forms
    the initial residual ``r0 = s - S lam0`` with one neighbor exchange
    (charged to ``phase``).
    """
    if overlaps is None:
        overlaps = build_overlaps(pieces)
    inv_mults = [1.0 / m for m in _multiplicities(pieces)]
    if lambda0 is None:
        lams = [np.zeros(p.rows.size) for p in pieces]
    else:
        lams = [np.asarray(l, dtype=float).reshape(p.rows.size).copy()
                for l, p in zip(lambda0, pieces)]
        for (a, b), (ia, ib) in overlaps.items():
            if a < b and not np.array_equal(lams[a][ia], lams[b][ib]):
                raise InconsistentWarmStart(
                    f"multiplier warm start differs between agents {a} and {b}")
    fabric.register_overlaps({pair: idx[0].size
                              for pair, idx in overlaps.items()})
    locals_ = [p.schur_rhs - p.schur @ lam for p, lam in zip(pieces, lams)]
    residuals = _exchange_shared(locals_, overlaps, fabric, phase)
    states = [DcgLocalState(
        agent=p.agent, rows=p.rows, schur=p.schur, lam=lams[i],
        residual=residuals[i], direction=residuals[i].copy(),
        inv_mult=inv_mults[i]) for i, p in enumerate(pieces)]
    return states, overlaps


def dcg_iterate(states: Sequence[DcgLocalState], overlaps, fabric: Fabric,
                eps: float, *, phase: str = "dcg") -> bool:
    """One synchronous CG round; returns the aggregated convergence flag.

    The round reduces the residual weight ``eta`` (which also fixes the
    direction update of the previous round), then the curvature ``sigma``,
    takes the multiplier and residual steps, and finally exchanges
    convergence flags on the updated residual.
    """
    etas = [float(s.residual @ (s.inv_mult * s.residual)) for s in states]
    eta = fabric.global_reduce(etas, op="sum", phase=phase)
    for s in states:
        if s.iteration == 0:
            s.direction = s.residual.copy()
        else:
            beta = eta / s.eta if s.eta > 0.0 else 0.0
            s.direction = s.residual + beta * s.direction
        s.eta = eta

    products = [s.schur @ s.direction for s in states]
    sigmas = [float(s.direction @ t) for s, t in zip(states, products)]
    sigma = fabric.global_reduce(sigmas, op="sum", phase=phase)
    if sigma <= 0.0:
        # Zero or negative curvature is fatal unless the residual is already
        # negligible; in that case finish the round with a zero step so the
        # per-iteration communication pattern stays intact.
        residual_inf = max(s.residual_norm() for s in states)
        if residual_inf > eps:
            raise CurvatureBreakdown(sigma, residual_inf)
        step = 0.0
        forced = True
    else:
        step = eta / sigma
        forced = False

    summed = _exchange_shared(products, overlaps, fabric, phase)
    flags = []
    for s, total in zip(states, summed):
        s.lam = s.lam + step * s.direction
        s.residual = s.residual - step * total
        s.iteration += 1
        flags.append(s.residual_norm() < eps)
    return fabric.global_flags(flags, phase=phase) or forced


def dcg_solve(pieces: Sequence[SchurPiece],
              lambda0: Sequence[np.ndarray] | None,
              eps: float, fabric: Fabric, *,
              max_iter: int | None = None) -> DcgResult:
    """Drive the decentralized CG to ``max_i ||r_i||_inf < eps``.

    The bootstrap (initial residual exchange and the pre-loop convergence
    flags) is charged to the ``init`` phase so per-iteration accounting
    identities stay exact.  Raises :class:`DcgIterationLimit` carrying the
    best iterate when the cap is exceeded.
    """
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    states, overlaps = dcg_init(pieces, lambda0, fabric, phase="init")
    if max_iter is None:
        n_c = sum(p.rows.size for p in pieces) // 2
        max_iter = 3 * n_c + 60
    flags = [s.residual_norm() < eps for s in states]
    if fabric.global_flags(flags, phase="init"):
        return DcgResult(lambdas=[s.lam for s in states], iterations=0,
                         residual_inf=max(s.residual_norm() for s in states),
                         converged=True)
    for _ in range(max_iter):
        if dcg_iterate(states, overlaps, fabric, eps):
            return DcgResult(
                lambdas=[s.lam for s in states],
                iterations=states[0].iteration,
                residual_inf=max(s.residual_norm() for s in states),
                converged=True)
    raise DcgIterationLimit(
        lambdas=[s.lam for s in states],
        residual_inf=max(s.residual_norm() for s in states),
        iterations=states[0].iteration)
