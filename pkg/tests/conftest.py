"""Shared builders for randomized solver tests."""

import numpy as np
import pytest

from dmpcqp import AgentModel, NetworkModel, build_chain_of_masses


def norm_inf(x):
    x = np.asarray(x)
    if x.size == 0:
        return 0.0
    return float(np.abs(x).max())


def spd_matrix(rng, n, scale=1.0):
    F = rng.normal(size=(n, n))
    return scale * (F @ F.T + n * np.eye(n))


def stable_matrix(rng, n, radius=0.9):
    A = rng.normal(size=(n, n))
    r = np.abs(np.linalg.eigvals(A)).max()
    return A * (radius / max(r, 1e-9))


def random_network(rng, n_agents=3, max_state=2, max_input=2,
                   edge_prob=0.6, coupling_scale=0.25, terminal_cost=True):
    """Random coupled network with mildly stable dynamics.

    Always contains at least one coupling edge so the Schur system is
    non-trivial; decoupled corner cases get dedicated tests.
    """
    while True:
        dims = [int(rng.integers(1, max_state + 1)) for _ in range(n_agents)]
        edges = [(i, j) for i in range(n_agents) for j in range(n_agents)
                 if i != j and rng.random() < edge_prob]
        if edges:
            break
    agents = []
    for i in range(n_agents):
        n = dims[i]
        m = int(rng.integers(1, max_input + 1))
        A_in = {j: coupling_scale * rng.normal(size=(n, dims[j]))
                for (dst, j) in edges if dst == i}
        if terminal_cost and rng.random() < 0.5:
            P = spd_matrix(rng, n, 0.1)
        else:
            P = np.zeros((n, n))
        agents.append(AgentModel(
            index=i,
            A_self=stable_matrix(rng, n, rng.uniform(0.5, 1.1)),
            B=rng.normal(size=(n, m)),
            A_in=A_in,
            u_lo=-rng.uniform(0.5, 2.0, size=m),
            u_hi=rng.uniform(0.5, 2.0, size=m),
            Q=spd_matrix(rng, n),
            R=spd_matrix(rng, m, 0.5),
            P=P,
        ))
    return NetworkModel(agents)


def tiny_network(rng):
    """Two single-input agents, at most 8 bound rows at horizon 2."""
    return random_network(rng, n_agents=2, max_state=2, max_input=1,
                          edge_prob=0.9)


def random_x0(rng, net, scale=1.0):
    return [scale * rng.normal(size=a.n) for a in net.agents]


@pytest.fixture(scope="session")
def chain10():
    return build_chain_of_masses(10)


@pytest.fixture(scope="session")
def chain3():
    return build_chain_of_masses(3)
