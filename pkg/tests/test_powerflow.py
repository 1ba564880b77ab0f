"""Sweep solver, loss bookkeeping and gradient machinery."""

import csv
import math
import pathlib

import numpy as np
import pytest

import voltvar.powerflow as pf
from voltvar.feeder import apply_operating_point

from _builders import two_bus, two_bus_exact, random_feeder

TEST_DATA = pathlib.Path(__file__).parent / "data"


@pytest.mark.parametrize("r,x,p,q", [
    (0.03, 0.06, 300.0, 150.0),
    (0.10, 0.04, 120.0, 90.0),
    (0.01, 0.08, 600.0, 10.0),
])
def test_two_bus_matches_closed_form(r, x, p, q):
    feeder = two_bus(r, x, p, q)
    op = apply_operating_point(feeder, 1.0, 0.0)
    res = pf.solve(feeder, op, tol=1e-10)
    assert res.converged
    v_ref, ang_ref, loss_ref = two_bus_exact(r, x, p, q)
    v2 = res.voltage("l", "a")
    assert abs(abs(v2) - v_ref) < 5e-9
    assert abs(np.angle(v2) - ang_ref) < 5e-9
    for method in ("pairs", "current"):
        loss = pf.total_loss_kw(feeder, res, op, method=method)
        assert loss == pytest.approx(loss_ref, rel=1e-7)


def test_two_bus_flat_when_unloaded():
    feeder = two_bus(p_kw=0.0, q_kvar=0.0)
    op = apply_operating_point(feeder, 1.0, 0.0)
    res = pf.solve(feeder, op)
    assert abs(res.voltage("l", "a") - 1.0) < 1e-12
    assert pf.total_loss_kw(feeder, res, op) < 1e-9


def test_solver_flags_collapse():
    # load far beyond the maximum transferable power: no solution exists
    feeder = two_bus(p_kw=80000.0, q_kvar=40000.0)
    op = apply_operating_point(feeder, 1.0, 0.0)
    res = pf.solve(feeder, op, max_iter=60)
    assert not res.converged


def test_ieee34_base_matches_frozen_newton(base_feeder, base_index):
    """Stored reference came from an independent Newton solve of the same data."""
    op = apply_operating_point(base_feeder, 1.0, 0.0)
    res = pf.solve(base_feeder, op, base_index)
    assert res.converged
    assert res.max_mismatch_pu < 1e-5
    worst_v = worst_a = 0.0
    with open(TEST_DATA / "ieee34_base_solution.csv", newline="") as fh:
        for rec in csv.DictReader(fh):
            got = res.voltage(rec["node"], rec["phase"])
            worst_v = max(worst_v, abs(abs(got) - float(rec["v_pu"])))
            da = math.degrees(np.angle(got)) - float(rec["angle_deg"])
            worst_a = max(worst_a, abs(da))
    assert worst_v < 1e-3
    assert worst_a < 0.05
    import json
    ref = json.loads((TEST_DATA / "ieee34_base_solution.json").read_text())
    loss = pf.total_loss_kw(base_feeder, res, op, base_index)
    assert loss == pytest.approx(ref["loss_kw"], rel=5e-3)


def test_loss_methods_agree_randomized():
    rng = np.random.default_rng(42)
    for _ in range(10):
        feeder = random_feeder(rng, n_nodes=int(rng.integers(4, 12)))
        op = apply_operating_point(feeder, rng.uniform(0.3, 1.0), rng.uniform(0.0, 1.0))
        res = pf.solve(feeder, op)
        assert res.converged
        a = pf.total_loss_kw(feeder, res, op, method="pairs")
        b = pf.total_loss_kw(feeder, res, op, method="current")
        assert a == pytest.approx(b, abs=1e-8 * max(1.0, a))


def test_power_balance_randomized():
    """Sum of injections over every node equals the series loss."""
    rng = np.random.default_rng(7)
    for _ in range(5):
        feeder = random_feeder(rng, n_nodes=9)
        op = apply_operating_point(feeder, 0.8, 0.5)
        ix = pf.NetworkIndex(feeder)
        res = pf.solve(feeder, op, ix)
        Y = pf.ybus(feeder, op, ix)
        s_all = res.v * np.conj(Y @ res.v) * ix.s1
        loss = pf.total_loss_kw(feeder, res, op, ix)
        assert float(np.sum(s_all.real)) == pytest.approx(loss, abs=1e-5 * max(1.0, loss))


def test_jacobian_matches_finite_difference():
    rng = np.random.default_rng(3)
    feeder = random_feeder(rng, n_nodes=5, regulators=1, pv_count=2)
    op = apply_operating_point(feeder, 0.7, 0.6)
    ix = pf.NetworkIndex(feeder)
    res = pf.solve(feeder, op, ix)
    info = pf.assemble_jacobian(feeder, res, op, ix)
    fr = info.free_rows
    Y = pf.ybus(feeder, op, ix)
    s_spec = ix.injection_pu(op)
    th0 = np.angle(res.v)[fr]
    vm0 = np.abs(res.v)[fr]

    def g(x):
        v = res.v.copy()
        v[fr] = x[fr.size:] * np.exp(1j * x[:fr.size])
        resid = s_spec - v * np.conj(Y @ v)
        return np.concatenate([resid.real[fr], resid.imag[fr]])

    x0 = np.concatenate([th0, vm0])
    eps = 1e-6
    J_fd = np.empty_like(info.J)
    for k in range(x0.size):
        hi, lo = x0.copy(), x0.copy()
        hi[k] += eps
        lo[k] -= eps
        J_fd[:, k] = (g(hi) - g(lo)) / (2 * eps)
    assert np.allclose(info.J, J_fd, atol=1e-5, rtol=1e-5)


@pytest.mark.parametrize("objective", ["loss", "voltage"])
def test_reduced_gradient_matches_finite_difference(objective):
    rng = np.random.default_rng(11)
    feeder = random_feeder(rng, n_nodes=8, pv_count=3)
    ix = pf.NetworkIndex(feeder)
    op = apply_operating_point(feeder, 0.9, 0.7,
                               q=rng.uniform(-20, 20, size=len(feeder.pv_units)))
    res = pf.solve(feeder, op, ix, tol=1e-10)
    if objective == "loss":
        def f(o, r):
            return pf.total_loss_kw(feeder, r, o, ix)
        dfdx = pf.loss_state_gradient(feeder, res, op, ix)
        w = None
    else:
        w = np.ones(ix.n)  # all-keys deviation keeps the objective smooth
        def f(o, r):
            return pf.voltage_deviation(r, w)
        dfdx = pf.voltage_state_gradient(res, w)
    grad = pf.reduced_gradient(feeder, res, op, dfdx, ix)
    du = 0.5  # kvar
    for k in range(len(feeder.pv_units)):
        q_hi, q_lo = op.pv_q.copy(), op.pv_q.copy()
        q_hi[k] += du
        q_lo[k] -= du
        f_hi = f(op.with_q(q_hi), pf.solve(feeder, op.with_q(q_hi), ix, v0=res.v, tol=1e-10))
        f_lo = f(op.with_q(q_lo), pf.solve(feeder, op.with_q(q_lo), ix, v0=res.v, tol=1e-10))
        fd = (f_hi - f_lo) / (2 * du)
        assert grad[k] == pytest.approx(fd, rel=1e-4, abs=1e-7)


def test_warm_start_cuts_iterations(base_feeder, base_index):
    op = apply_operating_point(base_feeder, 1.0, 0.0)
    cold = pf.solve(base_feeder, op, base_index)
    again = pf.solve(base_feeder, op, base_index, v0=cold.v)
    assert again.converged and again.iterations <= 2
    nudged = apply_operating_point(base_feeder, 0.99, 0.0)
    warm = pf.solve(base_feeder, nudged, base_index, v0=cold.v)
    fresh = pf.solve(base_feeder, nudged, base_index)
    assert warm.converged and fresh.converged
    assert warm.iterations < fresh.iterations


def test_violation_reporting_and_margin():
    feeder = two_bus(p_kw=900.0, q_kvar=450.0)  # sags below 0.95
    op = apply_operating_point(feeder, 1.0, 0.0)
    res = pf.solve(feeder, op)
    keys = res.violations()
    assert ("l", "a") in [(n, p) for n, p, _ in keys]
    assert not res.in_band()
    w = pf.limit_violation_weights(res)
    assert w.sum() == 1.0

    mild = two_bus(p_kw=330.0, q_kvar=160.0)  # inside the band, below nominal
    op = apply_operating_point(mild, 1.0, 0.0)
    res = pf.solve(mild, op)
    vm = abs(res.voltage("l", "a"))
    assert 0.95 < vm < 1.0
    assert res.in_band()
    margin = vm - 0.95 + 0.002  # push the shrunk band just past the solution
    assert not res.in_band(margin=margin)
    assert pf.limit_violation_weights(res, margin=margin).sum() == 1.0


def test_regulator_taps_raise_downstream_voltage():
    rng = np.random.default_rng(5)
    feeder = random_feeder(rng, n_nodes=7, regulators=1, pv_count=0)
    reg = feeder.regulators[0]
    zero = {reg.id: np.zeros(len(reg.taps), dtype=int)}
    high = {reg.id: np.full(len(reg.taps), 8, dtype=int)}
    op0 = apply_operating_point(feeder, 0.8, 0.0, taps=zero)
    op8 = apply_operating_point(feeder, 0.8, 0.0, taps=high)
    r0 = pf.solve(feeder, op0)
    r8 = pf.solve(feeder, op8)
    assert r0.converged and r8.converged
    below = set()
    stack = [reg.to_node]
    while stack:
        nid = stack.pop()
        below.add(nid)
        stack.extend(feeder.children[nid])
    ix = r0.index
    down = [i for i, (n, p) in enumerate(ix.keys) if n in below]
    assert down, "regulator feeds nothing downstream"
    assert np.all(r8.v_mag()[down] > r0.v_mag()[down])
