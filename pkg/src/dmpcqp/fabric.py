"""Synchronous message fabric with exact communication metering.

All cross-agent traffic goes through a :class:`Fabric`: scalar reductions and
convergence flags through a central coordinator, vector payloads through
point-to-point neighbor channels.  Every operation charges a
:class:`CommLedger` under one of four phases so experiments can report exact
communication footprints and verify per-iteration accounting identities.

The fabric simulates one synchronous round per collective call; agents are
evaluated sequentially but the reduction order is fixed (ascending agent
index) so results do not depend on scheduling.  The delivery mechanism is
isolated in :class:`InProcessTransport`, the single point to replace with a
socket-backed implementation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CommAccountingError, FabricDeadlock

PHASES = ("init", "dcg", "asm", "admm")


@dataclass
class PhaseCounters:
    """Message counts charged under a single phase."""

    global_floats: int = 0
    global_booleans: int = 0
    local_floats: int = 0

    def copy(self) -> "PhaseCounters":
        return PhaseCounters(self.global_floats, self.global_booleans,
                             self.local_floats)

    def as_dict(self) -> dict:
        return {
            "global_floats": self.global_floats,
            "global_booleans": self.global_booleans,
            "local_floats": self.local_floats,
        }


class CommLedger:
    """Monotone counters of exchanged values, broken down by phase.

    Global counts cover agent-to-coordinator traffic (both directions),
    local counts cover neighbor-to-neighbor payload entries.
    """

    def __init__(self):
        self._phases = {p: PhaseCounters() for p in PHASES}

    def charge(self, phase, *, global_floats=0, global_booleans=0, local_floats=0):
        if phase not in self._phases:
            raise ValueError(f"unknown phase {phase!r}")
        if min(global_floats, global_booleans, local_floats) < 0:
            raise ValueError("ledger charges must be non-negative")
        ctr = self._phases[phase]
        ctr.global_floats += int(global_floats)
        ctr.global_booleans += int(global_booleans)
        ctr.local_floats += int(local_floats)

    def phase(self, phase) -> PhaseCounters:
        return self._phases[phase]

    @property
    def global_floats(self) -> int:
        return sum(c.global_floats for c in self._phases.values())

    @property
    def global_booleans(self) -> int:
        return sum(c.global_booleans for c in self._phases.values())

    @property
    def local_floats(self) -> int:
        return sum(c.local_floats for c in self._phases.values())

    def snapshot(self) -> "CommLedger":
        out = CommLedger()
        for p, ctr in self._phases.items():
            out._phases[p] = ctr.copy()
        return out

    def delta(self, since: "CommLedger") -> "CommLedger":
        """Counts accumulated after ``since`` was snapshotted."""
        out = CommLedger()
        for p in PHASES:
            a, b = self._phases[p], since._phases[p]
            d = PhaseCounters(
                a.global_floats - b.global_floats,
                a.global_booleans - b.global_booleans,
                a.local_floats - b.local_floats,
            )
            if min(d.global_floats, d.global_booleans, d.local_floats) < 0:
                raise ValueError("ledger delta would be negative")
            out._phases[p] = d
        return out

    def as_dict(self) -> dict:
        out = {p: c.as_dict() for p, c in self._phases.items()}
        out["total"] = {
            "global_floats": self.global_floats,
            "global_booleans": self.global_booleans,
            "local_floats": self.local_floats,
        }
        return out


class InProcessTransport:
    """Delivers neighbor payloads by reference inside one process.

    Any object with a ``deliver(payloads) -> payloads`` method can stand in,
    e.g. a serializing socket transport.
    """

    def deliver(self, payloads):
        return dict(payloads)


class Fabric:
    """Coordinator plus neighbor channels for a fixed set of agents."""

    def __init__(self, n_agents, ledger=None, transport=None):
        if n_agents < 1:
            raise ValueError("fabric needs at least one agent")
        self.n_agents = int(n_agents)
        self.ledger = ledger if ledger is not None else CommLedger()
        self.transport = transport if transport is not None else InProcessTransport()
        self.round_index = 0
        self._overlap_sizes = None

    def register_overlaps(self, sizes):
        """Declare expected payload sizes per directed pair (src, dst).

        A value may be a single size or a collection of admissible sizes
        (one directed channel can carry differently sized payloads at
        different points of an iteration).
        """
        norm = {}
        for pair, size in sizes.items():
            if isinstance(size, (set, frozenset, tuple, list)):
                norm[pair] = frozenset(int(s) for s in size)
            else:
                norm[pair] = frozenset((int(size),))
        self._overlap_sizes = norm

    def _require_all(self, values, what):
        if len(values) < self.n_agents:
            raise FabricDeadlock(missing=range(len(values), self.n_agents),
                                 round_index=self.round_index)
        if len(values) > self.n_agents:
            raise ValueError(f"{what}: got {len(values)} contributions for "
                             f"{self.n_agents} agents")
        missing = [i for i, v in enumerate(values) if v is None]
        if missing:
            raise FabricDeadlock(missing=missing, round_index=self.round_index)

    def global_reduce(self, values, op="sum", phase="dcg"):
        """One coordinator round over per-agent scalars (or scalar tuples).

        ``op='sum'`` reduces componentwise, accumulating in ascending agent
        index, and returns the broadcast tuple (or scalar).  ``op='min'``
        reduces a single scalar per agent and returns ``(value, agent)``
        with ties broken by the lowest agent index.  Each round charges
        ``2 * n_agents * width`` global floats (up and down).
        """
        self._require_all(values, "global_reduce")
        first = values[0]
        width = len(first) if isinstance(first, (tuple, list, np.ndarray)) else 1
        self.ledger.charge(phase, global_floats=2 * self.n_agents * width)
        self.round_index += 1
        if op == "sum":
            if width == 1:
                total = 0.0
                for v in values:
                    total += float(v)
                return total
            totals = [0.0] * width
            for v in values:
                if len(v) != width:
                    raise ValueError("global_reduce: ragged contribution widths")
                for c in range(width):
                    totals[c] += float(v[c])
            return tuple(totals)
        if op == "min":
            if width != 1:
                raise ValueError("global_reduce: min reduces one scalar per agent")
            best = float(values[0])
            best_agent = 0
            for i in range(1, self.n_agents):
                v = float(values[i])
                if v < best:
                    best, best_agent = v, i
            return best, best_agent
        raise ValueError(f"unknown reduction {op!r}")

    def global_flags(self, flags, phase="dcg"):
        """Boolean AND across agents; charges ``2 * n_agents`` booleans."""
        self._require_all(flags, "global_flags")
        self.ledger.charge(phase, global_booleans=2 * self.n_agents)
        self.round_index += 1
        return all(bool(f) for f in flags)

    def neighbor_exchange(self, payloads, phase="dcg"):
        """Deliver vectors between neighbor pairs; charges their total length.

        ``payloads`` maps directed pairs ``(src, dst)`` to 1-D arrays.  When
        overlap sizes were registered, payload sizes are validated against
        them.
        """
        total = 0
        for (src, dst), vec in payloads.items():
            if not (0 <= src < self.n_agents and 0 <= dst < self.n_agents):
                raise ValueError(f"neighbor_exchange: bad pair {(src, dst)}")
            vec = np.asarray(vec)
            if self._overlap_sizes is not None:
                expected = self._overlap_sizes.get((src, dst))
                if expected is None or vec.size not in expected:
                    allowed = sorted(expected) if expected else None
                    raise ValueError(
                        f"neighbor_exchange: payload {(src, dst)} has size "
                        f"{vec.size}, expected {allowed}")
            total += vec.size
        self.ledger.charge(phase, local_floats=total)
        self.round_index += 1
        return self.transport.deliver(payloads)


def verify_comm_identities(delta, n_agents, n_coupling, *, dcg_iterations=0,
                           asm_iterations=0, admm_iterations=0):
    """Check a ledger delta against the per-iteration accounting identities.

    Per iteration the distributed CG accounts for ``4M`` global floats,
    ``2M`` global booleans and ``2 n_c`` local floats; the active-set loop
    for ``2M`` global floats and ``2M`` booleans; ADMM for ``2M`` booleans
    and ``2 n_c`` local floats.  Initialization traffic is excluded (it is
    charged under the ``init`` phase).  Raises :class:`CommAccountingError`
    on any mismatch.
    """
    M = int(n_agents)
    expected = {
        "dcg": (4 * M * dcg_iterations, 2 * M * dcg_iterations,
                2 * n_coupling * dcg_iterations),
        "asm": (2 * M * asm_iterations, 2 * M * asm_iterations, 0),
        "admm": (0, 2 * M * admm_iterations, 2 * n_coupling * admm_iterations),
    }
    for phase, (gf, gb, lf) in expected.items():
        got = delta.phase(phase)
        if (got.global_floats, got.global_booleans, got.local_floats) != (gf, gb, lf):
            raise CommAccountingError(
                f"phase {phase}: measured ({got.global_floats}, "
                f"{got.global_booleans}, {got.local_floats}) != expected "
                f"({gf}, {gb}, {lf}) for iterations "
                f"dcg={dcg_iterations} asm={asm_iterations} admm={admm_iterations}")
