import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmpcqp import (VariableLayout, build_agent_qp, build_coupling_index,
                    build_network_qps, rollout_feasible_point, stack_global,
                    update_initial_state)
from dmpcqp.oracle import dense_qp_from_stacked, solve_dense_qp

from conftest import norm_inf, random_network, random_x0


def _baseline_qps(chain10):
    x0s = [np.full(2, 0.1 * (i + 1)) for i in range(10)]
    return build_network_qps(chain10, 12, x0s)


def test_baseline_dimensions(chain10):
    qps = _baseline_qps(chain10)
    assert sum(qp.size for qp in qps) == 812
    assert sum(qp.n_eq for qp in qps) == 260
    assert sum(qp.n_ineq for qp in qps) == 240
    assert qps[0].n_coupling == 432
    # interior agents copy two 2-state neighbors, the ends just one
    assert qps[0].size == 62
    assert qps[5].size == 86


@given(horizon=st.integers(1, 6), n=st.integers(1, 3), m=st.integers(1, 3),
       dims=st.lists(st.integers(1, 3), min_size=0, max_size=3))
@settings(max_examples=60, deadline=None)
def test_layout_slices_partition_vector(horizon, n, m, dims):
    lay = VariableLayout(horizon=horizon, n_states=n, n_inputs=m,
                         in_neighbors=tuple(range(len(dims))),
                         neighbor_dims=tuple(dims))
    covered = np.zeros(lay.size, dtype=int)
    for k in range(horizon + 1):
        covered[lay.x_slice(k)] += 1
    for k in range(horizon):
        covered[lay.u_slice(k)] += 1
    for j in range(len(dims)):
        covered[lay.v_block_slice(j)] += 1
    assert covered.tolist() == [1] * lay.size


def test_layout_rejects_out_of_range():
    lay = VariableLayout(horizon=3, n_states=2, n_inputs=1,
                         in_neighbors=(), neighbor_dims=())
    with pytest.raises(IndexError):
        lay.x_slice(4)
    with pytest.raises(IndexError):
        lay.u_slice(3)


def test_coupling_rows_belong_to_exactly_two_agents():
    rng = np.random.default_rng(5)
    for _ in range(8):
        net = random_network(rng, n_agents=4)
        idx = build_coupling_index(net, horizon=3)
        hits = np.zeros(idx.n_coupling, dtype=int)
        for i in range(net.n_agents):
            hits[idx.rows_of(i)] += 1
        assert np.all(hits == 2)
        total = sum(3 * net.agents[j].n
                    for i in range(net.n_agents) for j in net.in_neighbors(i))
        assert idx.n_coupling == total


def test_coupling_edges_ordered_by_copier_then_owner(chain10):
    idx = build_coupling_index(chain10, horizon=2)
    keys = [(e.copier, e.owner) for e in idx.edges]
    assert keys == sorted(keys)
    offs = [e.offset for e in idx.edges]
    assert offs == sorted(offs)


def test_equality_rows_pin_initial_state_then_dynamics(chain3):
    x0 = [np.array([0.3, -0.2])] * 3
    qp = build_agent_qp(chain3, 1, 4, x0[1])
    n = 2
    np.testing.assert_allclose(qp.eq_matrix[:n, qp.layout.x_slice(0)], np.eye(n))
    np.testing.assert_allclose(qp.eq_rhs[:n], x0[1])
    # remaining rows encode x_{k+1} - A x_k - B u_k - sum_j A_in v_jk = 0
    assert qp.n_eq == (4 + 1) * n
    z = rollout_feasible_point(chain3, 4, x0)[1]
    np.testing.assert_allclose(qp.eq_matrix @ z, qp.eq_rhs, atol=1e-12)


def test_zero_initial_state_zeroes_rhs_head(chain3):
    qp = build_agent_qp(chain3, 0, 3, np.zeros(2))
    np.testing.assert_array_equal(qp.eq_rhs[:2], np.zeros(2))


def test_bound_rows_upper_then_lower(chain3):
    qp = build_agent_qp(chain3, 0, 3, np.zeros(2))
    N = 3
    assert qp.n_ineq == 2 * N
    z = np.zeros(qp.size)
    z[qp.layout.u_slice(1)] = 0.7
    vals = qp.ineq_matrix @ z
    np.testing.assert_allclose(vals[:N], [0.0, 0.7, 0.0])
    np.testing.assert_allclose(vals[N:], [0.0, -0.7, 0.0])
    np.testing.assert_allclose(qp.ineq_rhs, np.ones(2 * N))


def test_rollout_feasible_point_satisfies_everything():
    rng = np.random.default_rng(17)
    for _ in range(6):
        net = random_network(rng, n_agents=3)
        x0s = random_x0(rng, net)
        qps = build_network_qps(net, 4, x0s)
        zs = rollout_feasible_point(net, 4, x0s)
        total = np.zeros(qps[0].n_coupling)
        for qp, z in zip(qps, zs):
            assert norm_inf(qp.eq_matrix @ z - qp.eq_rhs) < 1e-10
            assert np.all(qp.ineq_matrix @ z - qp.ineq_rhs <= 1e-12)
            total += qp.cpl_matrix @ z
        assert norm_inf(total) < 1e-10


def test_rollout_with_inputs_reproduces_plant():
    rng = np.random.default_rng(23)
    net = random_network(rng, n_agents=3)
    x0s = random_x0(rng, net)
    us = [0.3 * rng.uniform(-1, 1, size=(4, a.m)) for a in net.agents]
    zs = rollout_feasible_point(net, 4, x0s, inputs=us)
    for a, z in zip(net.agents, zs):
        lay = build_agent_qp(net, a.index, 4, x0s[a.index]).layout
        for k in range(4):
            np.testing.assert_allclose(z[lay.u_slice(k)], us[a.index][k])


def test_update_initial_state_idempotent_and_fresh(chain3):
    rng = np.random.default_rng(2)
    x0s = random_x0(rng, chain3)
    qps = build_network_qps(chain3, 5, x0s)
    y0s = random_x0(rng, chain3)
    moved = [update_initial_state(qp, y) for qp, y in zip(qps, y0s)]
    again = [update_initial_state(qp, y) for qp, y in zip(moved, y0s)]
    for a, b in zip(moved, again):
        np.testing.assert_array_equal(a.eq_rhs, b.eq_rhs)

    fresh = build_network_qps(chain3, 5, y0s)
    sol_moved = solve_dense_qp(dense_qp_from_stacked(stack_global(moved)))
    sol_fresh = solve_dense_qp(dense_qp_from_stacked(stack_global(fresh)))
    assert norm_inf(sol_moved.z - sol_fresh.z) < 1e-9


def test_stack_split_join_roundtrip(chain3):
    x0s = [np.zeros(2)] * 3
    qps = build_network_qps(chain3, 3, x0s)
    stacked = stack_global(qps)
    rng = np.random.default_rng(0)
    z = rng.normal(size=stacked.hessian.shape[0])
    parts = stacked.split(z)
    assert [p.size for p in parts] == [qp.size for qp in qps]
    np.testing.assert_array_equal(stacked.join(parts), z)


def test_stacked_blocks_match_agents(chain3):
    x0s = [np.array([0.1, 0.2])] * 3
    qps = build_network_qps(chain3, 3, x0s)
    stacked = stack_global(qps)
    o = stacked.offsets
    for qp in qps:
        i = qp.index
        blk = stacked.hessian[o[i]:o[i] + qp.size, o[i]:o[i] + qp.size]
        np.testing.assert_array_equal(blk, qp.hessian)
    # coupling columns line up with per-agent restrictions
    rng = np.random.default_rng(1)
    zs = [rng.normal(size=qp.size) for qp in qps]
    assembled = stacked.cpl_matrix @ np.concatenate(zs)
    total = np.zeros(qps[0].n_coupling)
    for qp, z in zip(qps, zs):
        total += qp.cpl_matrix @ z
    np.testing.assert_allclose(assembled, total, atol=1e-12)


def test_cost_spreading_preserves_network_objective():
    rng = np.random.default_rng(29)
    net = random_network(rng, n_agents=3)
    x0s = random_x0(rng, net)
    qps = build_network_qps(net, 3, x0s)
    zs = rollout_feasible_point(net, 3, x0s,
                                inputs=[0.2 * rng.uniform(-1, 1, size=(3, a.m))
                                        for a in net.agents])
    spread = 0.5 * sum(z @ qp.hessian @ z for qp, z in zip(qps, zs))
    direct = 0.0
    for a, z in zip(net.agents, zs):
        lay = qps[a.index].layout
        for k in range(3):
            xk = z[lay.x_slice(k)]
            uk = z[lay.u_slice(k)]
            direct += xk @ a.Q @ xk + uk @ a.R @ uk
        xN = z[lay.x_slice(3)]
        direct += xN @ a.P @ xN
    assert abs(spread - 0.5 * direct) < 1e-10 * (1.0 + abs(direct))
