"""Closed-loop experiments and the command line interface.

``run_experiment`` rolls a receding-horizon controller over a batch of
random initial conditions, solving every sample with the selected solver
(distributed active-set, one of two ADMM presets, or the centralized
oracle), and writes deterministic CSV artifacts plus a ``meta.json`` into
the output directory:

- ``iterations.csv``    per-sample iteration counters,
- ``communication.csv`` per-sample message counts, one row per phase,
- ``trajectories.csv``  closed-loop states and applied inputs,
- ``deviation.csv``     per-sample state deviation from the centralized
  oracle run on the same initial condition,
- ``summary.csv``       mean/max aggregates over all samples except the
  first of each initial condition,
- ``meta.json``         configuration, problem dimensions, and aggregates.

Initial conditions are drawn independently per agent, uniformly from
``[-y0_range, y0_range]`` for the first state component and
``[-v0_range, v0_range]`` for the second, using NumPy's ``default_rng``
(PCG64) seeded from the configuration, so identical configurations
reproduce byte-identical CSV files.

Networks can be loaded from JSON: ``{"agents": [{"A_self": [[...]],
"B": [[...]], "A_in": {"<j>": [[...]]}, "u_lo": [...], "u_hi": [...],
"Q": [[...]], "R": [[...]], "P": [[...]]}, ...]}`` with agents listed in
index order.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .admm import ADMM_PRESETS, AdmmConfig, admm_solve, shift_averaged
from .asm import AsmConfig, asm_solve, shift_active
from .errors import SolverError
from .fabric import PHASES, Fabric, verify_comm_identities
from .model import AgentModel, NetworkModel, PlantState, build_chain_of_masses, plant_step
from .oracle import centralized_mpc_rollout
from .qp_builder import build_network_qps, update_initial_state

SOLVERS = ("asm-dcg", "admm1", "admm2", "centralized")


@dataclass
class ExperimentConfig:
    """Scenario, solver, and output settings for one experiment."""

    scenario: str = "chain"
    network_file: str | None = None
    n_masses: int = 10
    mass: float = 1.0
    stiffness: float = 3.0
    damping: float = 3.0
    dt: float = 0.2
    u_max: float = 1.0
    q_diag: tuple[float, float] = (10.0, 10.0)
    r_weight: float = 1.0
    p_weight: float = 0.0
    horizon: int = 12
    steps: int = 25
    n_inits: int = 30
    seed: int = 0
    solver: str = "asm-dcg"
    rho: float = 1.0
    eps_dcg: float = 1e-8
    eps_asm: float = 1e-6
    y0_range: float = 1.0
    v0_range: float = 0.5
    out_dir: str = "results"

    def validate(self) -> None:
        if self.scenario not in ("chain", "file"):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.scenario == "file" and not self.network_file:
            raise ValueError("scenario 'file' requires a network file")
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.horizon < 1 or self.steps < 1 or self.n_inits < 1:
            raise ValueError("horizon, steps and inits must be positive")
        if self.rho <= 0.0:
            raise ValueError("rho must be positive")


def load_network(path) -> NetworkModel:
    """Build a network from the JSON schema documented in this module."""
    with open(path) as fh:
        doc = json.load(fh)
    agents = []
    for idx, entry in enumerate(doc["agents"]):
        agents.append(AgentModel(
            index=idx,
            A_self=np.array(entry["A_self"], dtype=float),
            B=np.array(entry["B"], dtype=float),
            A_in={int(j): np.array(blk, dtype=float)
                  for j, blk in entry.get("A_in", {}).items()},
            u_lo=np.array(entry["u_lo"], dtype=float),
            u_hi=np.array(entry["u_hi"], dtype=float),
            Q=np.array(entry["Q"], dtype=float),
            R=np.array(entry["R"], dtype=float),
            P=np.array(entry["P"], dtype=float),
        ))
    return NetworkModel(agents)


def save_network(net: NetworkModel, path) -> None:
    doc = {"agents": [{
        "A_self": agent.A_self.tolist(),
        "B": agent.B.tolist(),
        "A_in": {str(j): blk.tolist() for j, blk in sorted(agent.A_in.items())},
        "u_lo": agent.u_lo.tolist(),
        "u_hi": agent.u_hi.tolist(),
        "Q": agent.Q.tolist(),
        "R": agent.R.tolist(),
        "P": agent.P.tolist(),
    } for agent in net.agents]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def build_network(cfg: ExperimentConfig) -> NetworkModel:
    if cfg.scenario == "chain":
        return build_chain_of_masses(
            cfg.n_masses, mass=cfg.mass, stiffness=cfg.stiffness,
            damping=cfg.damping, dt=cfg.dt, u_max=cfg.u_max,
            q_diag=cfg.q_diag, r_weight=cfg.r_weight, p_weight=cfg.p_weight)
    return load_network(cfg.network_file)


def sample_initial_states(net: NetworkModel, rng: np.random.Generator,
                          y0_range: float, v0_range: float) -> list[np.ndarray]:
    """Uniform initial states; second components use the velocity range."""
    states = []
    for agent in net.agents:
        x = np.empty(agent.n)
        for c in range(agent.n):
            r = v0_range if c == 1 else y0_range
            x[c] = rng.uniform(-r, r)
        states.append(x)
    return states


@dataclass
class SampleRecord:
    """Everything recorded about one MPC sample."""

    init: int
    sample: int
    status: str = "ok"
    asm_iterations: int | None = None
    init_rounds: int | None = None
    dcg_feasible_guess: int | None = None
    dcg_active_set: int | None = None
    admm_iterations: int | None = None
    oracle_iterations: int | None = None
    comm: dict = field(default_factory=dict)
    deviation: float | None = None

    @property
    def dcg_total(self) -> int | None:
        if self.dcg_feasible_guess is None:
            return None
        return self.dcg_feasible_guess + self.dcg_active_set


@dataclass
class ExperimentResult:
    out_dir: Path
    records: list[SampleRecord]
    aggregates: dict
    failures: int


def _closed_loop_distributed(net, cfg, x0s):
    """Run one initial condition with the configured distributed solver.

    Returns ``(states, inputs, sample_stats)`` where states is a list of
    per-agent state lists over time.
    """
    M = net.n_agents
    qps = build_network_qps(net, cfg.horizon, x0s)
    n_c = qps[0].n_coupling
    fabric = Fabric(M)
    state = PlantState(states=tuple(x0s))
    states = [list(state.states)]
    inputs = []
    samples = []
    if cfg.solver == "asm-dcg":
        asm_cfg = AsmConfig(eps_step=cfg.eps_asm, eps_dcg=cfg.eps_dcg)
        warm = None
        for t in range(cfg.steps):
            before = fabric.ledger.snapshot()
            res = asm_solve(qps, warm, asm_cfg, fabric)
            delta = fabric.ledger.delta(before)
            verify_comm_identities(
                delta, M, n_c, dcg_iterations=res.stats.dcg_total,
                asm_iterations=res.stats.outer_iterations)
            warm = [shift_active(qp, a) for qp, a in zip(qps, res.active)]
            u = [res.z[i][qps[i].layout.u_slice(0)] for i in range(M)]
            state = plant_step(net, state, u)
            states.append(list(state.states))
            inputs.append(u)
            samples.append(dict(
                asm_iterations=res.stats.outer_iterations,
                init_rounds=res.stats.init_rounds,
                dcg_feasible_guess=res.stats.dcg_feasible_guess,
                dcg_active_set=res.stats.dcg_active_set,
                comm=delta.as_dict()))
            qps = [update_initial_state(qp, x)
                   for qp, x in zip(qps, state.states)]
    else:
        preset = cfg.solver
        admm_cfg = AdmmConfig.preset(preset, rho=cfg.rho)
        z_avg = None
        for t in range(cfg.steps):
            before = fabric.ledger.snapshot()
            res = admm_solve(qps, fabric, admm_cfg, z_avg)
            delta = fabric.ledger.delta(before)
            verify_comm_identities(delta, M, n_c,
                                   admm_iterations=res.iterations)
            if not res.converged:
                raise SolverError(
                    f"ADMM did not converge within {admm_cfg.max_iter} "
                    f"iterations at sample {t}")
            z_avg = shift_averaged(qps, res.z_avg)
            u = [res.z[i][qps[i].layout.u_slice(0)] for i in range(M)]
            state = plant_step(net, state, u)
            states.append(list(state.states))
            inputs.append(u)
            samples.append(dict(admm_iterations=res.iterations,
                                comm=delta.as_dict()))
            qps = [update_initial_state(qp, x)
                   for qp, x in zip(qps, state.states)]
    return states, inputs, samples


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Execute the configured experiment and write its artifacts.

    Solver failures are recorded per sample; remaining initial conditions
    still run.  Returns the collected records and aggregate statistics.
    """
    cfg.validate()
    net = build_network(cfg)
    rng = np.random.default_rng(cfg.seed)
    inits = [sample_initial_states(net, rng, cfg.y0_range, cfg.v0_range)
             for _ in range(cfg.n_inits)]
    probe = build_network_qps(net, cfg.horizon,
                              [np.zeros(a.n) for a in net.agents])
    dims = {
        "n_z": int(sum(qp.size for qp in probe)),
        "eq": int(sum(qp.n_eq for qp in probe)),
        "ineq": int(sum(qp.n_ineq for qp in probe)),
        "coupling": int(probe[0].n_coupling),
    }

    records: list[SampleRecord] = []
    trajectory_rows = []
    failures = 0
    for idx, x0s in enumerate(inits):
        reference = centralized_mpc_rollout(net, x0s, cfg.horizon, cfg.steps)
        if cfg.solver == "centralized":
            states = [[reference.state_of(t, i) for i in range(net.n_agents)]
                      for t in range(cfg.steps + 1)]
            inputs = [[reference.input_of(t, i) for i in range(net.n_agents)]
                      for t in range(cfg.steps)]
            for t in range(cfg.steps):
                records.append(SampleRecord(
                    init=idx, sample=t, deviation=0.0,
                    oracle_iterations=reference.iterations[t]))
        else:
            try:
                states, inputs, samples = _closed_loop_distributed(
                    net, cfg, x0s)
            except SolverError as exc:
                failures += 1
                records.append(SampleRecord(init=idx, sample=-1,
                                            status=f"error: {exc}"))
                continue
            for t, sample in enumerate(samples):
                dev = max(
                    float(np.abs(np.asarray(states[t + 1][i])
                                 - reference.state_of(t + 1, i)).max())
                    for i in range(net.n_agents))
                records.append(SampleRecord(init=idx, sample=t,
                                            deviation=dev, **sample))
        for t in range(cfg.steps + 1):
            for i in range(net.n_agents):
                x = np.asarray(states[t][i])
                u = "" if t >= cfg.steps else \
                    float(np.asarray(inputs[t][i]).ravel()[0])
                trajectory_rows.append({
                    "init": idx, "time": t, "agent": i,
                    "y": float(x[0]),
                    "v": float(x[1]) if x.size > 1 else "",
                    "u": u,
                })

    aggregates = _aggregate(records)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_iterations(out / "iterations.csv", records)
    _write_communication(out / "communication.csv", records)
    _write_rows(out / "trajectories.csv",
                ["init", "time", "agent", "y", "v", "u"], trajectory_rows)
    _write_rows(out / "deviation.csv", ["init", "sample", "deviation"],
                [{"init": r.init, "sample": r.sample,
                  "deviation": r.deviation if r.deviation is not None else ""}
                 for r in records])
    _write_summary(out / "summary.csv", aggregates)
    meta = {
        "config": dataclasses.asdict(cfg),
        "dims": dims,
        "prng": {"generator": "numpy.random.default_rng",
                 "bit_generator": "PCG64", "seed": cfg.seed},
        "aggregates": aggregates,
        "failures": failures,
    }
    with open(out / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    return ExperimentResult(out_dir=out, records=records,
                            aggregates=aggregates, failures=failures)


_METRICS = ("asm_iterations", "dcg_feasible_guess", "dcg_active_set",
            "dcg_total", "admm_iterations", "oracle_iterations",
            "global_floats", "global_booleans", "local_floats", "deviation")


def _metric_value(record: SampleRecord, metric: str):
    if metric in ("global_floats", "global_booleans", "local_floats"):
        if not record.comm:
            return None
        return record.comm["total"][metric]
    if metric == "dcg_total":
        return record.dcg_total
    return getattr(record, metric)


def _aggregate(records) -> dict:
    """Mean/max per metric over all samples except each init's first."""
    rows = [r for r in records if r.sample > 0 and r.status == "ok"]
    out = {}
    for metric in _METRICS:
        values = [_metric_value(r, metric) for r in rows]
        values = [v for v in values if v is not None]
        if values:
            out[metric] = {"mean": float(np.mean(values)),
                           "max": float(np.max(values))}
    return out


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        writer.writerows(rows)


def _write_iterations(path, records):
    header = ["init", "sample", "status", "asm_iterations", "init_rounds",
              "dcg_feasible_guess", "dcg_active_set", "dcg_total",
              "admm_iterations", "oracle_iterations"]
    rows = []
    for r in records:
        row = {h: "" for h in header}
        row.update(init=r.init, sample=r.sample, status=r.status)
        for name in header[3:]:
            value = r.dcg_total if name == "dcg_total" else getattr(r, name)
            if value is not None:
                row[name] = value
        rows.append(row)
    _write_rows(path, header, rows)


def _write_communication(path, records):
    header = ["init", "sample", "phase", "global_floats", "global_booleans",
              "local_floats"]
    rows = []
    for r in records:
        if not r.comm:
            continue
        for phase in PHASES:
            counts = r.comm[phase]
            rows.append({"init": r.init, "sample": r.sample, "phase": phase,
                         **counts})
    _write_rows(path, header, rows)


def _write_summary(path, aggregates):
    header = ["metric", "mean", "max"]
    rows = [{"metric": m, "mean": agg["mean"], "max": agg["max"]}
            for m, agg in aggregates.items()]
    _write_rows(path, header, rows)


@dataclass(frozen=True)
class ComparisonResult:
    metrics: dict
    max_trajectory_diff: float


_SCENARIO_KEYS = ("scenario", "network_file", "n_masses", "mass", "stiffness",
                  "damping", "dt", "u_max", "q_diag", "r_weight", "p_weight",
                  "horizon", "steps", "n_inits", "seed", "y0_range",
                  "v0_range")


def compare_runs(run_a, run_b) -> ComparisonResult:
    """Side-by-side statistics of two experiment directories.

    Requires both runs to share the scenario definition and seed; solver
    settings may differ.  Returns per-metric aggregate pairs and the largest
    recorded trajectory difference.
    """
    run_a, run_b = Path(run_a), Path(run_b)
    metas = []
    for run in (run_a, run_b):
        with open(run / "meta.json") as fh:
            metas.append(json.load(fh))
    for key in _SCENARIO_KEYS:
        va, vb = metas[0]["config"].get(key), metas[1]["config"].get(key)
        if va != vb:
            raise ValueError(f"scenario mismatch: {key} differs ({va} vs {vb})")
    metrics = {}
    for metric in _METRICS:
        pair = [meta["aggregates"].get(metric) for meta in metas]
        if any(p is not None for p in pair):
            metrics[metric] = {"a": pair[0], "b": pair[1]}

    def _read_traj(run):
        table = {}
        with open(run / "trajectories.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                key = (row["init"], row["time"], row["agent"])
                vals = [float(row["y"])]
                if row["v"] != "":
                    vals.append(float(row["v"]))
                if row["u"] != "":
                    vals.append(float(row["u"]))
                table[key] = np.array(vals)
        return table

    ta, tb = _read_traj(run_a), _read_traj(run_b)
    if set(ta) != set(tb):
        raise ValueError("trajectory tables do not align")
    diff = 0.0
    for key, va in ta.items():
        vb = tb[key]
        if va.size != vb.size:
            raise ValueError("trajectory tables do not align")
        diff = max(diff, float(np.abs(va - vb).max()))
    return ComparisonResult(metrics=metrics, max_trajectory_diff=diff)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dmpcqp",
        description="Distributed QP solvers for networked MPC experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a closed-loop experiment")
    run.add_argument("--scenario", choices=("chain", "file"), default="chain")
    run.add_argument("--network", help="network JSON (scenario 'file')")
    run.add_argument("--masses", type=int, default=10,
                     help="number of masses in the chain")
    run.add_argument("--mass", type=float, default=1.0)
    run.add_argument("--stiffness", type=float, default=3.0)
    run.add_argument("--damping", type=float, default=3.0)
    run.add_argument("--dt", type=float, default=0.2)
    run.add_argument("--u-max", type=float, default=1.0)
    run.add_argument("--q-diag", type=float, nargs=2, default=(10.0, 10.0))
    run.add_argument("--r-weight", type=float, default=1.0)
    run.add_argument("--p-weight", type=float, default=0.0)
    run.add_argument("--horizon", type=int, default=12)
    run.add_argument("--steps", type=int, default=25)
    run.add_argument("--inits", type=int, default=30)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--solver", choices=SOLVERS, default="asm-dcg")
    run.add_argument("--rho", type=float, default=1.0)
    run.add_argument("--eps-dcg", type=float, default=1e-8)
    run.add_argument("--eps-asm", type=float, default=1e-6)
    run.add_argument("--y0-range", type=float, default=1.0)
    run.add_argument("--v0-range", type=float, default=0.5)
    run.add_argument("--out", default="results")

    cmp_p = sub.add_parser("compare", help="compare two run directories")
    cmp_p.add_argument("run_a")
    cmp_p.add_argument("run_b")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        cfg = ExperimentConfig(
            scenario=args.scenario, network_file=args.network,
            n_masses=args.masses, mass=args.mass, stiffness=args.stiffness,
            damping=args.damping, dt=args.dt, u_max=args.u_max,
            q_diag=tuple(args.q_diag), r_weight=args.r_weight,
            p_weight=args.p_weight, horizon=args.horizon, steps=args.steps,
            n_inits=args.inits, seed=args.seed, solver=args.solver,
            rho=args.rho, eps_dcg=args.eps_dcg, eps_asm=args.eps_asm,
            y0_range=args.y0_range, v0_range=args.v0_range, out_dir=args.out)
        try:
            result = run_experiment(cfg)
        except (ValueError, SolverError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        print(f"wrote {result.out_dir}")
        for metric, agg in result.aggregates.items():
            print(f"  {metric}: mean {agg['mean']:.3f}  max {agg['max']:.3f}")
        if result.failures:
            print(f"  {result.failures} initial conditions failed",
                  file=sys.stderr)
            return 1
        return 0
    try:
        comparison = compare_runs(args.run_a, args.run_b)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for metric, pair in comparison.metrics.items():
        print(f"{metric}: {pair['a']} vs {pair['b']}")
    print(f"max trajectory difference: {comparison.max_trajectory_diff:.3e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
