"""Fleet grouping and group-proportional setpoint allocation."""

import numpy as np
import pytest

import voltvar.dispatch as dp
import voltvar.powerflow as pf
from voltvar.feeder import apply_operating_point

from _builders import random_feeder


def loss_gradients(feeder, load=0.6, sun=0.8):
    ix = pf.NetworkIndex(feeder)
    op = apply_operating_point(feeder, load, sun)
    res = pf.solve(feeder, op, ix)
    return pf.reduced_gradient(feeder, res, op,
                               pf.loss_state_gradient(feeder, res, op, ix), ix)


def test_group_shape_checked(mod_feeder):
    with pytest.raises(ValueError, match="one gradient per inverter"):
        dp.group_inverters(mod_feeder, np.zeros(3))


def test_groups_partition_the_fleet(mod_feeder):
    g = loss_gradients(mod_feeder)
    groups = dp.group_inverters(mod_feeder, g, similarity_tol=0.5)
    seen = sorted(i for grp in groups for i in grp.members)
    assert seen == list(range(len(mod_feeder.pv_units)))
    for grp in groups:
        assert grp.leader == grp.members[0]
        assert len(grp) >= 1


def test_groups_are_gradient_coherent(mod_feeder):
    tol = 0.5
    g = loss_gradients(mod_feeder)
    groups = dp.group_inverters(mod_feeder, g, similarity_tol=tol)
    for grp in groups:
        ref = g[grp.leader]
        for i in grp.members:
            assert abs(g[i] - ref) <= tol * abs(ref) + 1e-15


def test_tighter_tolerance_means_more_groups(mod_feeder):
    g = loss_gradients(mod_feeder)
    loose = dp.group_inverters(mod_feeder, g, similarity_tol=0.5)
    tight = dp.group_inverters(mod_feeder, g, similarity_tol=0.05)
    assert len(tight) >= len(loose)
    one_per_unit = dp.group_inverters(mod_feeder, g, similarity_tol=0.0)
    assert len(one_per_unit) == len(mod_feeder.pv_units)


def test_groups_are_contiguous_randomized():
    """A member's path to the source passes its group's other territory
    before any foreign inverter-bearing stretch."""
    rng = np.random.default_rng(31)
    for _ in range(6):
        feeder = random_feeder(rng, n_nodes=12, pv_count=5)
        g = loss_gradients(feeder, 0.7, 0.5)
        groups = dp.group_inverters(feeder, g, similarity_tol=0.4)
        owner = {}
        for grp in groups:
            for i in grp.members:
                owner.setdefault(feeder.pv_units[i].node, grp.id)
        for grp in groups:
            for i in grp.members:
                anc = feeder.pv_units[i].node
                while anc != feeder.source_node:
                    anc = feeder.parent[anc][0]
                    if anc in owner:
                        assert owner[anc] == grp.id or i == grp.leader
                        break


def test_partition_sums_members():
    groups = [dp.SlaveGroup(0, 0, [0, 2]), dp.SlaveGroup(1, 1, [1, 3])]
    q = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_allclose(dp.partition_solution(groups, q), [4.0, 6.0])


def test_allocation_proportional_and_clamped():
    qm = np.array([10.0, 30.0, 60.0])
    a = dp.allocate_within_group(50.0, qm)
    np.testing.assert_allclose(a, [5.0, 15.0, 30.0])
    full = dp.allocate_within_group(250.0, qm)       # beyond capability
    np.testing.assert_allclose(full, qm)
    sink = dp.allocate_within_group(-250.0, qm)
    np.testing.assert_allclose(sink, -qm)
    assert dp.allocate_within_group(40.0, np.zeros(2)).tolist() == [0.0, 0.0]


def test_allocation_properties_randomized():
    rng = np.random.default_rng(5)
    for _ in range(50):
        n = int(rng.integers(1, 8))
        qm = rng.uniform(0.0, 80.0, size=n)
        total = float(rng.uniform(-1.5, 1.5) * max(qm.sum(), 1.0))
        a = dp.allocate_within_group(total, qm)
        assert np.all(np.abs(a) <= qm + 1e-12)
        want = np.clip(total, -qm.sum(), qm.sum())
        assert a.sum() == pytest.approx(want, abs=1e-9)


def test_update_capacity_quadrature(mod_feeder):
    p = np.array([pv.p_max * 0.6 for pv in mod_feeder.pv_units])
    qm = dp.update_capacity(mod_feeder, p)
    s = np.array([pv.s_rating for pv in mod_feeder.pv_units])
    np.testing.assert_allclose(p ** 2 + qm ** 2, s ** 2, rtol=1e-12)


def test_dispatch_fleet_roundtrip(mod_feeder):
    g = loss_gradients(mod_feeder)
    groups = dp.group_inverters(mod_feeder, g, similarity_tol=0.5)
    op = apply_operating_point(mod_feeder, 0.6, 0.8)
    rng = np.random.default_rng(2)
    q_target = rng.uniform(-1.0, 1.0, len(mod_feeder.pv_units)) * op.q_max
    q_new, records = dp.dispatch_fleet(mod_feeder, groups, q_target, op)
    assert np.all(np.abs(q_new) <= op.q_max + 1e-12)
    totals = dp.partition_solution(groups, q_target)
    for rec, total, grp in zip(records, totals, groups):
        cap = op.q_max[grp.members].sum()
        assert rec.total_kvar == pytest.approx(total)
        assert rec.issued_kvar == pytest.approx(np.clip(total, -cap, cap), abs=1e-9)
