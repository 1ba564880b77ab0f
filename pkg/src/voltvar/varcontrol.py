"""Inverter reactive-power optimization by reduced-gradient steepest descent.

Two objectives share one optimizer:

- "loss":    series losses in kW; a candidate step is admissible only if it
             lowers the objective AND leaves every voltage inside the band
             (Var resources must not fix losses at the cost of new limit
             violations).
- "voltage": weighted squared deviation from 1 pu, with indicator weights on
             the keys currently outside the band; any objective decrease is
             admissible. The gradient uses the weight set frozen at the
             start of each descent iteration (refreshed from the latest
             solution), while the acceptance value re-derives the weights at
             every trial point, so a step that trades the targeted keys for
             new, worse violations is rejected instead of oscillating.

Each iteration computes the fleet gradient through one adjoint solve, then
runs a geometric line search: the first trial moves the most-sensitive
inverter by du_min kvar, and the step grows by a fixed factor until the
objective stops improving or a trial becomes inadmissible. Setpoints are
projected onto the box +-q_max(t) after every trial.

When the loss descent runs out of room because some voltages sit on a band
edge, the gradient is re-projected onto the tangent space of the binding
edges (plus a small inward bias) and the search continues along the
boundary; the descent only stops once no admissible direction remains.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import powerflow as pf
from .feeder import Feeder, OperatingPoint, VoltageLimits


@dataclass
class StepSizeSchedule:
    du_min_kvar: float = 0.02        # smallest meaningful setpoint change
    growth: float = 1.1              # geometric step-size factor
    max_trials: int = 80             # per line search


@dataclass
class VarObjective:
    kind: str                        # "loss" or "voltage"
    limits: VoltageLimits | None = None
    weights: np.ndarray | None = None
    band_margin: float = 0.0         # shrink the admissible band inward (pu)
    headroom: float = 0.0            # loss only: strip near each edge that
                                     # trials may leave but not press into
    slide: bool = True               # loss only: continue along binding band
                                     # edges once plain descent runs out of room
    weak_tol: float = 0.0            # loss only: fleet sensitivity below this
                                     # marks a key as unsteerable
    weak_guard_pu: float = 0.0       # unsteerable keys must keep this much
                                     # band slack, or at least not lose any

    def __post_init__(self):
        if self.kind not in ("loss", "voltage"):
            raise ValueError(f"unknown objective kind {self.kind!r}")

    def limits_for(self, feeder: Feeder) -> VoltageLimits:
        return self.limits or feeder.limits

    def refresh_weights(self, result: pf.PowerFlowResult, feeder: Feeder) -> None:
        if self.kind == "voltage":
            self.weights = pf.limit_violation_weights(
                result, self.limits_for(feeder), self.band_margin)

    def value(self, feeder: Feeder, result: pf.PowerFlowResult, op: OperatingPoint,
              index: pf.NetworkIndex) -> float:
        if self.kind == "loss":
            return pf.total_loss_kw(feeder, result, op, index)
        # live weights: the merit sums over the keys violated AT THIS point,
        # so a trial that swaps one violation for a worse one cannot pass as
        # an improvement (the per-iteration weight set steers only the
        # gradient, not the acceptance test)
        live = pf.limit_violation_weights(result, self.limits_for(feeder), self.band_margin)
        return pf.voltage_deviation(result, live)

    def state_gradient(self, feeder: Feeder, result: pf.PowerFlowResult, op: OperatingPoint,
                       index: pf.NetworkIndex) -> np.ndarray:
        if self.kind == "loss":
            return pf.loss_state_gradient(feeder, result, op, index)
        if self.weights is None:
            self.refresh_weights(result, feeder)
        return pf.voltage_state_gradient(result, self.weights)

    def admissible(self, value: float, incumbent: float, result: pf.PowerFlowResult,
                   feeder: Feeder, ref_vm: np.ndarray | None = None,
                   guard: tuple[np.ndarray, np.ndarray] | None = None) -> bool:
        if value >= incumbent:
            return False
        if self.kind != "loss":
            return True
        lim = self.limits_for(feeder)
        if not result.in_band(lim, self.band_margin):
            return False
        if guard is not None:
            vm = result.v_mag()
            ghi, glo = guard
            if np.any(vm > ghi + 1e-12) or np.any(vm < glo - 1e-12):
                return False
        if self.headroom <= self.band_margin or ref_vm is None:
            return True
        # keys inside a headroom strip may creep toward the edge only by an
        # allowance that tapers to zero at the edge itself: the descent can
        # never park the profile taut against the band, so the next tick's
        # drift always has somewhere to go. Keys that simply live close to
        # an edge (short stubs off the source) keep their natural level.
        vm = result.v_mag()
        h = self.headroom
        rise = self.headroom / 100.0 * np.clip((lim.v_max - vm) / h, 0.0, 1.0)
        fall = self.headroom / 100.0 * np.clip((vm - lim.v_min) / h, 0.0, 1.0)
        hi = vm > lim.v_max - h + 1e-12
        lo = vm < lim.v_min + h - 1e-12
        return bool(np.all(vm[hi] <= ref_vm[hi] + rise[hi] + 1e-12) and
                    np.all(vm[lo] >= ref_vm[lo] - fall[lo] - 1e-12))


def evaluate_objective(feeder: Feeder, op: OperatingPoint, objective: VarObjective,
                       index: pf.NetworkIndex | None = None,
                       v0: np.ndarray | None = None) -> tuple[float, pf.PowerFlowResult]:
    ix = index if index is not None else pf.NetworkIndex(feeder)
    res = pf.solve(feeder, op, ix, v0=v0)
    return objective.value(feeder, res, op, ix), res


def geometric_search(eval_fn, beta0: float, growth: float = 1.1, max_trials: int = 80):
    """Grow the step geometrically while it keeps paying off.

    eval_fn(beta) -> (value, admissible, payload). Trials stop at the first
    inadmissible or non-improving value; returns (best_or_None, trials).
    Admissibility is judged against the incumbent by the caller inside
    eval_fn, improvement against the best trial here.
    """
    best = None
    beta = beta0
    trials = 0
    while trials < max_trials:
        trials += 1
        value, ok, payload = eval_fn(beta)
        if not ok or (best is not None and value >= best[1]):
            break
        best = (beta, value, payload)
        beta *= growth
    return best, trials


def line_search(feeder: Feeder, op: OperatingPoint, objective: VarObjective,
                gradient: np.ndarray, incumbent: float,
                schedule: StepSizeSchedule | None = None,
                index: pf.NetworkIndex | None = None,
                v0: np.ndarray | None = None,
                ref_vm: np.ndarray | None = None,
                guard: tuple[np.ndarray, np.ndarray] | None = None):
    """Descend along -gradient from op's setpoints; returns (best, trials).

    best is (q_kvar, value, result) for the winning trial, or None when even
    the smallest step is inadmissible. The first trial size moves the most
    sensitive unit by du_min kvar. ref_vm anchors the headroom allowance
    (defaults to the warm-start profile); guard is a (ceiling, floor) pair of
    per-key magnitude bounds for unsteerable keys.
    """
    sched = schedule or StepSizeSchedule()
    ix = index if index is not None else pf.NetworkIndex(feeder)
    if gradient.size == 0:
        return None, 0
    gmax = float(np.max(np.abs(gradient)))
    if gmax <= 0.0:
        return None, 0

    if ref_vm is None:
        ref_vm = np.abs(v0) if v0 is not None else None

    def trial(beta):
        q = op.pv_q - beta * gradient
        top = op.with_q(q)                        # projects onto +-q_max
        value, res = evaluate_objective(feeder, top, objective, ix, v0=v0)
        ok = objective.admissible(value, incumbent, res, feeder, ref_vm, guard) and res.converged
        return value, ok, (top.pv_q, res)

    best, trials = geometric_search(trial, sched.du_min_kvar / gmax,
                                    sched.growth, sched.max_trials)
    if best is None:
        return None, trials
    beta, value, (q, res) = best
    return (q, value, res), trials


def steerability_guard(feeder: Feeder, result: pf.PowerFlowResult, op: OperatingPoint,
                       objective: VarObjective, index: pf.NetworkIndex,
                       ref_vm: np.ndarray | None = None):
    """Per-key magnitude bounds for keys the fleet cannot steer, or None.

    Keys whose magnitude barely answers to any unit (below weak_tol per kvar)
    must keep weak_guard_pu of band slack -- or at least hold their current
    level if they already sit closer. A descent that parks one near an edge
    leaves nothing able to pull it back when the operating point drifts. One
    probe per magnitude row against the warm-start factorization classifies
    the whole profile.
    """
    if (objective.kind != "loss" or objective.weak_tol <= 0.0
            or objective.weak_guard_pu <= 0.0 or not result.converged):
        return None
    ix = index
    lim = objective.limits_for(feeder)
    vm0 = result.v_mag() if ref_vm is None else ref_vm
    nf = ix.free_rows.size
    probe = np.zeros((nf, 2 * nf))
    probe[np.arange(nf), nf + np.arange(nf)] = 1.0
    sens = np.abs(pf.reduced_gradient(feeder, result, op, probe, ix)).max(axis=1)
    rows = ix.free_rows[sens < objective.weak_tol]
    if not rows.size:
        return None
    ghi = np.full(vm0.shape, np.inf)
    glo = np.full(vm0.shape, -np.inf)
    ghi[rows] = np.maximum(vm0[rows], lim.v_max - objective.weak_guard_pu)
    glo[rows] = np.minimum(vm0[rows], lim.v_min + objective.weak_guard_pu)
    return ghi, glo


def _band_tangent_gradient(feeder: Feeder, result: pf.PowerFlowResult, op: OperatingPoint,
                           dfdx: np.ndarray, index: pf.NetworkIndex,
                           limits: VoltageLimits, margin: float = 0.0,
                           act_tol: float = 2e-4, max_active: int = 16,
                           weak_tol: float = 0.0):
    """Loss gradient projected along the binding band edges, or None.

    Keys hugging an edge contribute a constraint normal d|V|/du (sign-flipped
    on the lower edge so feasible directions always satisfy a . du <= 0).
    The working set grows until the projected direction violates no normal;
    a small inward bias keeps line-search trials off the edge itself. All
    normals come out of one factorization alongside the objective row.

    Keys the fleet can barely move (regulated buses, stubs off the source;
    per-unit sensitivity under weak_tol) enter the working set outright: the
    fast loop could never pull them back once a drift tips them over, so the
    descent must not press them toward an edge at all.
    """
    vm = result.v_mag()
    fr = index.free_rows
    nf = fr.size
    hi = limits.v_max - margin
    lo = limits.v_min + margin
    edges = []                                   # (slack to edge, row, sign)
    for r in fr:
        if vm[r] >= hi - act_tol:
            edges.append((hi - vm[r], r, 1.0))
        elif vm[r] <= lo + act_tol:
            edges.append((vm[r] - lo, r, -1.0))
    if not edges:
        return None
    edges.sort()
    edges = edges[:max_active]

    stack = np.zeros((1 + len(edges), 2 * nf))
    stack[0] = dfdx
    for i, (_, r, sign) in enumerate(edges):
        stack[1 + i, nf + index.free_pos[r]] = sign
    grads = pf.reduced_gradient(feeder, result, op, stack, index)
    g, A = grads[0], grads[1:]
    sens = np.abs(A).max(axis=1)
    scale = np.where(sens > 0.0, sens, 1.0)
    A = A / scale[:, None]                       # unit rows condition the projection

    d = -g
    work = [i for i in range(len(A)) if sens[i] < weak_tol]
    if work:
        Aw = A[work]
        d = -(g - Aw.T @ np.linalg.pinv(Aw @ Aw.T) @ (Aw @ g))
    for _ in range(len(A)):
        push = [i for i in range(len(A)) if i not in work
                and A[i] @ d > 1e-12 * max(1.0, np.abs(d).max())]
        if not push:
            break
        work += push
        Aw = A[work]
        d = -(g - Aw.T @ np.linalg.pinv(Aw @ Aw.T) @ (Aw @ g))
    if np.abs(d).max() <= 1e-10 * max(1.0, np.abs(g).max()):
        return None                              # stationary along the boundary
    strong = [i for i in work if sens[i] >= weak_tol]
    if strong:
        inward = -A[strong].sum(axis=0)
        nrm = np.abs(inward).max()
        if nrm > 0.0:
            d = d + 0.05 * np.abs(d).max() / nrm * inward
    return -d                                    # gradient convention: step is -grad


@dataclass
class VarOptReport:
    q_kvar: np.ndarray
    objective: list[float]           # incumbent value per iteration, starts at f(u0)
    iterations: int = 0              # accepted gradient steps
    evaluations: int = 0             # power-flow solves spent
    converged: bool = False
    feasible: bool = False           # final state inside the voltage band
    stalled: bool = False            # no admissible move from the start point
    result: pf.PowerFlowResult | None = field(default=None, repr=False)


def optimize(feeder: Feeder, op: OperatingPoint, objective: VarObjective,
             index: pf.NetworkIndex | None = None,
             schedule: StepSizeSchedule | None = None,
             max_outer: int = 30, rel_tol: float = 1e-7) -> VarOptReport:
    """Steepest descent on the inverter setpoints from op.pv_q.

    Stops when a line search yields no admissible improvement, when the
    relative improvement falls under rel_tol, or after max_outer gradient
    steps; for the voltage objective also as soon as the band is clean.
    """
    ix = index if index is not None else pf.NetworkIndex(feeder)
    sched = schedule or StepSizeSchedule()
    cur = op.copy()
    f, res = evaluate_objective(feeder, cur, objective, ix)
    report = VarOptReport(q_kvar=cur.pv_q.copy(), objective=[f], evaluations=1, result=res)
    lim = objective.limits_for(feeder)
    ref0 = res.v_mag()       # headroom allowances anchor to the start profile
    guard = steerability_guard(feeder, res, cur, objective, ix, ref0)

    for _ in range(max_outer):
        objective.refresh_weights(res, feeder)
        if objective.kind == "voltage":
            f = objective.value(feeder, res, cur, ix)
            if res.in_band(lim, objective.band_margin):
                report.converged = True
                break
        dfdx = objective.state_gradient(feeder, res, cur, ix)
        grad = pf.reduced_gradient(feeder, res, cur, dfdx, ix)
        best, trials = line_search(feeder, cur, objective, grad, f, sched, ix,
                                   v0=res.v, ref_vm=ref0, guard=guard)
        report.evaluations += trials
        if best is None and objective.kind == "loss" and objective.slide:
            slide = _band_tangent_gradient(feeder, res, cur, dfdx, ix, lim,
                                           max(objective.band_margin, objective.headroom),
                                           weak_tol=objective.weak_tol)
            if slide is not None:
                best, trials = line_search(feeder, cur, objective, slide, f,
                                           sched, ix, v0=res.v, ref_vm=ref0, guard=guard)
                report.evaluations += trials
        if best is None:
            report.converged = True
            report.stalled = report.iterations == 0
            break
        q, f_new, res = best
        cur = cur.with_q(q)
        report.iterations += 1
        report.objective.append(f_new)
        improved = (f - f_new) / max(abs(f), 1e-12)
        f = f_new
        if improved < rel_tol:
            report.converged = True
            break
    else:
        report.converged = objective.kind == "voltage" and res.in_band(lim, objective.band_margin)

    report.q_kvar = cur.pv_q.copy()
    report.result = res
    # feasibility (and hence escalation upstream) is judged on the true band,
    # even when the descent itself targets a margin-shrunk one
    report.feasible = res.in_band(lim)
    if objective.kind == "voltage" and res.in_band(lim, objective.band_margin):
        report.converged = True
    return report


def local_compensation(feeder: Feeder, op: OperatingPoint) -> np.ndarray:
    """Naive droop-free start: each inverter offsets its own node-phase kvar."""
    q = np.zeros(len(feeder.pv_units))
    for k, pv in enumerate(feeder.pv_units):
        demand = op.load.get((pv.node, pv.phase), 0j).imag
        q[k] = min(max(demand, 0.0), op.q_max[k])
    return q
