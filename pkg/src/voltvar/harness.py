"""Quasi-static time-series simulation of the two-level control scheme.

Every profile step (5 minutes by default) the harness applies the scaled
loads and PV output, solves, and runs the fast Var loop: a voltage-correction
descent whenever the band is violated, a loss-minimization descent whenever
it is clean. Optimized setpoints always go through the master-slave layer
(group totals re-spread by capability) before being issued. The slow loop
acts on 15-minute boundaries - or immediately when the Var loop cannot
restore the band (escalation) - and moves taps only when the persistence
trigger agrees that inverters alone cannot hold the feeder.

Step tags: "+" Var support fixed a violation, "*" scheduled tap action,
"o" escalated tap action, "" nothing to do.

Modes:
- "coordinated":  the full scheme described above.
- "conventional": local regulator deadband control (setpoint 1 pu, +-2/120 pu
                  band, one mechanical step per 30 s), inverters at unity pf.
- "exhaustive":   like coordinated, but an unconditional full-window tap
                  enumeration at every boundary instead of trigger + pruned
                  search.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import dispatch as dp
from . import powerflow as pf
from . import tapcontrol as tc
from . import varcontrol as vc
from .feeder import Feeder, OperatingPoint, apply_operating_point, load_feeder

HOURS = 24.0


@dataclass
class ScheduleConfig:
    mode: str = "coordinated"
    step_min: float = 5.0
    boundary_min: float = 15.0
    persistence_min: float = 15.0
    similarity_tol: float = 0.5
    max_outer: int = 30
    # optional interior margin for controller targets; the default keeps the
    # full band usable (feeders whose phase spread nearly fills the band
    # pinch when it is shrunk), small values damp limit-edge hunting
    band_margin_pu: float = 0.0
    # loss descent may not press closer than this to a band edge (it may
    # still start there after a voltage fix): a hair of slack keeps re-solve
    # jitter from registering as a limit violation on the edge the descent
    # rides; drift from the next load tick is the fast loop's job
    loss_headroom_pu: float = 1e-6
    # tap selection keeps this much slack inside the band. Regulated buses
    # track their tap ratio and barely answer to Var injection, so parking
    # them flush with a limit turns every drift into an escalation the fast
    # loop cannot absorb; a third of a tap step of slack breaks that cycle
    tap_margin_pu: float = 0.002
    # fleet sensitivity (pu per kvar, best unit) under which a key counts as
    # unsteerable for the loss descent; such keys keep tap_margin_pu of slack
    weak_sens_tol: float = 1e-5
    var_schedule: vc.StepSizeSchedule = field(default_factory=vc.StepSizeSchedule)
    tap_config: tc.TapSearchConfig = field(default_factory=tc.TapSearchConfig)
    exhaustive_radius: int = 2
    exhaustive_budget: int = 1_000_000
    deadband_setpoint: float = 1.0
    deadband_pu: float = 2.0 / 120.0
    deadband_delay_s: float = 30.0


@dataclass
class StepRecord:
    t_minutes: float
    load_scale: float
    pv_scale: float
    loss_kw: float
    v_min: float
    v_max: float
    violations: int
    tag: str
    tap_ops: int
    escalated: bool
    taps: dict[str, list[int]]
    q_total_kvar: float
    q_kvar: list[float]
    wall_s: float


@dataclass
class TimeSeriesReport:
    feeder_name: str
    mode: str
    steps: list[StepRecord] = field(default_factory=list)
    groups: list[list[str]] = field(default_factory=list)
    escalations: int = 0
    infeasible_windows: int = 0      # escalated searches that could not clear the band

    @property
    def energy_loss_kwh(self) -> float:
        return self._energy()

    def _energy(self) -> float:
        if len(self.steps) < 2:
            return 0.0
        dt_h = (self.steps[1].t_minutes - self.steps[0].t_minutes) / 60.0
        return sum(s.loss_kw for s in self.steps) * dt_h

    @property
    def tap_ops_total(self) -> int:
        return sum(s.tap_ops for s in self.steps)

    @property
    def tap_events(self) -> int:
        return sum(1 for s in self.steps if s.tap_ops > 0)

    @property
    def violation_steps(self) -> int:
        return sum(1 for s in self.steps if s.violations > 0)

    @property
    def mean_step_s(self) -> float:
        return float(np.mean([s.wall_s for s in self.steps])) if self.steps else 0.0

    def summary(self) -> dict:
        return {
            "feeder": self.feeder_name,
            "mode": self.mode,
            "steps": len(self.steps),
            "energy_loss_kwh": round(self._energy(), 3),
            "tap_ops_total": self.tap_ops_total,
            "tap_events": self.tap_events,
            "violation_steps": self.violation_steps,
            "escalations": self.escalations,
            "infeasible_windows": self.infeasible_windows,
            "mean_step_s": round(self.mean_step_s, 4),
            "groups": self.groups,
        }

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "load_scale", "pv_scale", "loss_kw", "v_min", "v_max",
                        "violations", "tag", "tap_ops", "escalated", "taps", "q_total_kvar"])
            for s in self.steps:
                hhmm = f"{int(s.t_minutes) // 60:02d}:{int(s.t_minutes) % 60:02d}"
                taps = "|".join(f"{rid}:{','.join(map(str, t))}" for rid, t in sorted(s.taps.items()))
                w.writerow([hhmm, f"{s.load_scale:.4f}", f"{s.pv_scale:.4f}",
                            f"{s.loss_kw:.4f}", f"{s.v_min:.5f}", f"{s.v_max:.5f}",
                            s.violations, s.tag, s.tap_ops, int(s.escalated), taps,
                            f"{s.q_total_kvar:.2f}"])

    def to_json(self, path) -> None:
        doc = {"summary": self.summary(), "steps": [vars(s) for s in self.steps]}
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, default=lambda o: list(o) if isinstance(o, np.ndarray) else o)


# ---------------------------------------------------------------------------
# Profiles

def make_day_profile(step_min: float = 5.0, cloud: bool = True) -> list[tuple[float, float, float]]:
    """Synthetic clear-sky day with an optional late-morning cloud transient."""
    load_anchor_h = [0, 4, 6, 9, 12, 14, 17, 19, 21, 23, 24]
    load_anchor = [0.38, 0.34, 0.40, 0.52, 0.46, 0.47, 0.55, 0.65, 0.55, 0.42, 0.38]
    pv_anchor_h = [0, 6, 6.5, 8, 10, 11, 12, 13.5, 15, 17, 18.5, 19, 24]
    pv_anchor = [0, 0, 0.05, 0.35, 0.80, 0.95, 1.0, 0.98, 0.80, 0.35, 0.03, 0, 0]
    dip = {605: 0.32, 610: 0.30, 615: 0.55} if cloud else {}
    rows = []
    t = 0.0
    while t < HOURS * 60.0 - 1e-9:
        h = t / 60.0
        ls = float(np.interp(h, load_anchor_h, load_anchor))
        ps = float(np.interp(h, pv_anchor_h, pv_anchor))
        ps *= dip.get(int(round(t)), 1.0)
        rows.append((t, round(ls, 4), round(ps, 4)))
        t += step_min
    return rows


# ---------------------------------------------------------------------------
# Simulation

def _worst(res: pf.PowerFlowResult, feeder: Feeder):
    vm = res.v_mag()
    return float(vm.min()), float(vm.max()), len(res.violations(feeder.limits))


def run(feeder: Feeder, profile, config: ScheduleConfig | None = None,
        progress: bool = False) -> TimeSeriesReport:
    cfg = config or ScheduleConfig()
    if cfg.mode not in ("coordinated", "conventional", "exhaustive"):
        raise ValueError(f"unknown mode {cfg.mode!r}")
    ix = pf.NetworkIndex(feeder)
    report = TimeSeriesReport(feeder_name=feeder.name, mode=cfg.mode)
    cur_taps = {r.id: r.taps.copy() for r in feeder.regulators}
    cur_q = np.zeros(len(feeder.pv_units))
    trigger = tc.TriggerState()
    groups: list[dp.SlaveGroup] | None = None
    prev_v: np.ndarray | None = None

    for t, ls, ps in profile:
        t0 = time.perf_counter()
        if cfg.mode == "conventional":
            rec, cur_taps, prev_v = _conventional_step(
                feeder, ix, cfg, t, ls, ps, cur_taps, prev_v)
        else:
            rec, cur_taps, cur_q, prev_v, groups = _coordinated_step(
                feeder, ix, cfg, t, ls, ps, cur_taps, cur_q, prev_v, trigger,
                groups, report)
        rec.wall_s = time.perf_counter() - t0
        report.steps.append(rec)
        if progress and int(t) % 60 == 0:
            print(f"  {int(t)//60:02d}:{int(t)%60:02d} loss {rec.loss_kw:7.2f} kW "
                  f"v [{rec.v_min:.4f}, {rec.v_max:.4f}] tag {rec.tag or '-'}")
    if groups is not None:
        report.groups = [[feeder.pv_units[i].id for i in g.members] for g in groups]
    return report


def _tap_delta(feeder: Feeder, old: dict, new: dict) -> int:
    moved = 0
    for r in feeder.regulators:
        d = np.abs(np.asarray(new[r.id]) - np.asarray(old[r.id]))
        moved += int(d.max()) if r.kind == "ltc" else int(d.sum())
    return moved


def _coordinated_step(feeder, ix, cfg, t, ls, ps, cur_taps, cur_q, prev_v, trigger,
                      groups, report):
    op = apply_operating_point(feeder, ls, ps, t, taps=cur_taps, q=cur_q)
    res = pf.solve(feeder, op, ix, v0=prev_v)
    tag = ""
    escalated = False
    start_taps = {rid: v.copy() for rid, v in op.taps.items()}
    tap_margin = max(cfg.band_margin_pu, cfg.tap_margin_pu)

    if groups is None:
        grad = pf.reduced_gradient(
            feeder, res, op, pf.loss_state_gradient(feeder, res, op, ix), ix)
        groups = dp.group_inverters(feeder, grad, cfg.similarity_tol)

    def issue(q_target, base_op, base_res, objective_kind):
        """Master-slave re-spread; keep it only if it doesn't hurt."""
        q_grp, _ = dp.dispatch_fleet(feeder, groups, q_target, base_op)
        cand = base_op.with_q(q_grp)
        cres = pf.solve(feeder, cand, ix, v0=base_res.v)
        ok = cres.converged and (cres.in_band(feeder.limits) or not base_res.in_band(feeder.limits))
        if ok and objective_kind == "loss":
            ok = pf.total_loss_kw(feeder, cres, cand, ix) <= \
                pf.total_loss_kw(feeder, base_res, base_op, ix) * 1.02 + 0.05
            if ok:
                # re-spreading must not hand back the headroom or the
                # steerability slack the descent kept
                obj = vc.VarObjective("loss", band_margin=cfg.band_margin_pu,
                                      headroom=cfg.loss_headroom_pu,
                                      weak_tol=cfg.weak_sens_tol,
                                      weak_guard_pu=tap_margin)
                g = vc.steerability_guard(feeder, base_res, base_op, obj, ix,
                                          base_res.v_mag())
                ok = obj.admissible(-1.0, 0.0, cres, feeder, base_res.v_mag(), g)
        if ok:
            return cand, cres
        raw = base_op.with_q(q_target)
        return raw, pf.solve(feeder, raw, ix, v0=base_res.v)

    # fast loop: restore the band. The correction aims a bit inside it
    # (same slack as tap selection) so the cured keys are not parked flush
    # with the limit they just crossed; feasibility is still judged on the
    # true band, so a best-effort fix that lands between the two counts.
    if not res.in_band(feeder.limits):
        rep = vc.optimize(feeder, op, vc.VarObjective("voltage", band_margin=tap_margin),
                          ix, cfg.var_schedule, max_outer=cfg.max_outer)
        if rep.feasible:
            op, res = issue(rep.q_kvar, op, rep.result, "voltage")
            if not res.in_band(feeder.limits):
                op = op.with_q(rep.q_kvar)
                res = rep.result
            tag = "+"
        else:
            op = op.with_q(rep.q_kvar)
            res = rep.result if rep.result is not None else pf.solve(feeder, op, ix, v0=prev_v)
            escalated = True
            report.escalations += 1

    # slow loop
    on_boundary = math.isclose(t % cfg.boundary_min, 0.0, abs_tol=1e-6) or \
        math.isclose(t % cfg.boundary_min, cfg.boundary_min, abs_tol=1e-6)
    # one bare-state probe (Var setpoints zeroed) serves both the trigger
    # and a direction veto: if regulation alone already violates high-side
    # only, raising taps can only be paid for with more absorption - the
    # masked least-loss choice would ratchet upward every window - so
    # raising offsets are dropped (low-side only: lowering ones).
    probe_op = op.with_q(np.zeros_like(op.pv_q))
    probe = pf.solve(feeder, probe_op, ix, v0=res.v)
    vm = probe.v_mag()
    bare_high = bool((vm > feeder.limits.v_max + 1e-12).any())
    bare_low = bool((vm < feeder.limits.v_min - 1e-12).any())
    forbid = None
    if bare_high and not bare_low:
        forbid = "up"
    elif bare_low and not bare_high:
        forbid = "down"
    act = False
    if cfg.mode == "exhaustive":
        act = on_boundary or escalated
        if not escalated:
            trigger.reset()
    else:
        trig = tc.needs_adjustment(feeder, op, trigger, ix, escalated=escalated,
                                   persistence_min=cfg.persistence_min,
                                   probe_result=probe)
        act = (on_boundary and trig) or escalated
    if act:
        veto = None if escalated else forbid     # emergencies keep every direction
        if cfg.mode == "exhaustive":
            decision = tc.exhaustive_search_taps(
                feeder, op, ix, radius=cfg.exhaustive_radius,
                budget=cfg.exhaustive_budget, v0=res.v,
                band_margin=tap_margin, forbid=veto)
        else:
            tap_cfg = replace(cfg.tap_config, band_margin=tap_margin)
            decision = tc.search_taps(feeder, op, ix, tap_cfg, v0=res.v,
                                      forbid=veto)
        # worst_violation is judged against the margin-shrunk band; only a
        # shortfall beyond the margin means the true band itself is out of reach
        if escalated and decision.worst_violation > tap_margin + 1e-12:
            report.infeasible_windows += 1
        improves = decision.worst_violation < decision.stay_worst - 1e-4
        # margins can saturate the improvement signal: a choice that restores
        # the true band still deserves to be applied during an escalation
        true_fixed = decision.worst_violation <= tap_margin + 1e-12
        moved = _tap_delta(feeder, op.taps, decision.taps) \
            if (decision.feasible or (escalated and (improves or true_fixed))) else 0
        if moved:
            op = op.with_taps(decision.taps)
            res = pf.solve(feeder, op, ix, v0=res.v)
            tag = "o" if escalated else "*"
            trigger.reset()
            # taps moved under Var support; retune the fast loop if needed
            if not res.in_band(feeder.limits):
                rep = vc.optimize(feeder, op,
                                  vc.VarObjective("voltage", band_margin=tap_margin),
                                  ix, cfg.var_schedule, max_outer=cfg.max_outer)
                if rep.feasible:
                    op, res = issue(rep.q_kvar, op, rep.result, "voltage")
                else:
                    op = op.with_q(rep.q_kvar)
                    res = rep.result

    # loss loop on a clean feeder. Edge-sliding stays on so the descent can
    # keep working along whichever limit it lands on, but keys the fleet
    # cannot steer (regulated buses track their tap ratio and barely answer
    # to Var injection) must hold tap-margin slack: pressed flush, every
    # drift over the limit becomes an escalation the fast loop cannot absorb.
    if res.in_band(feeder.limits):
        rep = vc.optimize(feeder, op,
                          vc.VarObjective("loss", band_margin=cfg.band_margin_pu,
                                          headroom=cfg.loss_headroom_pu,
                                          weak_tol=cfg.weak_sens_tol,
                                          weak_guard_pu=tap_margin),
                          ix, cfg.var_schedule, max_outer=cfg.max_outer)
        if rep.iterations > 0 and rep.feasible:
            op, res = issue(rep.q_kvar, op, rep.result, "loss")

    vmin, vmax, nviol = _worst(res, feeder)
    rec = StepRecord(
        t_minutes=t, load_scale=ls, pv_scale=ps,
        loss_kw=pf.total_loss_kw(feeder, res, op, ix),
        v_min=vmin, v_max=vmax, violations=nviol, tag=tag,
        tap_ops=_tap_delta(feeder, start_taps, op.taps), escalated=escalated,
        taps={rid: [int(x) for x in v] for rid, v in op.taps.items()},
        q_total_kvar=float(op.pv_q.sum()), q_kvar=[float(x) for x in op.pv_q],
        wall_s=0.0)
    return rec, {rid: np.asarray(v) for rid, v in op.taps.items()}, op.pv_q.copy(), res.v, groups


def _conventional_step(feeder, ix, cfg, t, ls, ps, cur_taps, prev_v):
    op = apply_operating_point(feeder, ls, ps, t, taps=cur_taps)
    res = pf.solve(feeder, op, ix, v0=prev_v)
    budget = {  # mechanical steps available to each regulator this interval
        r.id: int(cfg.step_min * 60.0 / cfg.deadband_delay_s) for r in feeder.regulators}
    regs = sorted(feeder.regulators, key=lambda r: feeder.depth(r.from_node))
    moved_total = 0
    lo = cfg.deadband_setpoint - cfg.deadband_pu / 2.0
    hi = cfg.deadband_setpoint + cfg.deadband_pu / 2.0
    for _ in range(3):                      # settle interactions between devices
        changed = False
        for reg in regs:
            seg = feeder.segment_between(*reg.segment)
            rows = [ix.pos[(seg.to_node, p)] for p in seg.phases]
            while budget[reg.id] > 0:
                vm = np.abs(res.v[rows])
                step = np.where(vm < lo, 1, np.where(vm > hi, -1, 0))
                new = np.clip(op.taps[reg.id] + step, -16, 16)
                step = new - op.taps[reg.id]
                if not np.any(step):
                    break
                op = op.with_taps({reg.id: new})
                res = pf.solve(feeder, op, ix, v0=res.v)
                moved = int(np.abs(step).sum()) if reg.kind != "ltc" else int(np.abs(step).max())
                moved_total += moved
                budget[reg.id] -= 1
                changed = True
        if not changed:
            break

    vmin, vmax, nviol = _worst(res, feeder)
    rec = StepRecord(
        t_minutes=t, load_scale=ls, pv_scale=ps,
        loss_kw=pf.total_loss_kw(feeder, res, op, ix),
        v_min=vmin, v_max=vmax, violations=nviol,
        tag="*" if moved_total else "", tap_ops=moved_total, escalated=False,
        taps={rid: [int(x) for x in v] for rid, v in op.taps.items()},
        q_total_kvar=0.0, q_kvar=[0.0] * len(feeder.pv_units), wall_s=0.0)
    return rec, {rid: np.asarray(v) for rid, v in op.taps.items()}, res.v


# ---------------------------------------------------------------------------
# Canned studies

def run_case1(feeder_path=None, profile=None, out_prefix=None) -> tuple[TimeSeriesReport, dict]:
    """Clear-sky day: loss minimization at work; snapshot at peak PV."""
    feeder = load_feeder(feeder_path or default_feeder_path("mod"))
    rows = profile or make_day_profile(cloud=False)
    report = run(feeder, rows, ScheduleConfig(mode="coordinated"))
    ix = pf.NetworkIndex(feeder)
    peak = max(report.steps, key=lambda s: s.pv_scale)
    op = apply_operating_point(feeder, peak.load_scale, peak.pv_scale, peak.t_minutes,
                               taps={k: np.asarray(v) for k, v in peak.taps.items()})
    bare = pf.solve(feeder, op, ix)
    summary = {
        **report.summary(),
        "snapshot_t": peak.t_minutes,
        "snapshot_loss_no_var_kw": round(pf.total_loss_kw(feeder, bare, op, ix), 3),
        "snapshot_loss_kw": round(peak.loss_kw, 3),
    }
    _maybe_write(report, summary, out_prefix)
    return report, summary


def run_case2(feeder_path=None, profile=None, out_prefix=None) -> tuple[TimeSeriesReport, dict]:
    """Cloud-transient day: voltage correction and escalation behavior."""
    feeder = load_feeder(feeder_path or default_feeder_path("mod"))
    rows = profile or make_day_profile(cloud=True)
    report = run(feeder, rows, ScheduleConfig(mode="coordinated"))
    event = [s for s in report.steps if 590 <= s.t_minutes <= 650]
    summary = {
        **report.summary(),
        "var_support_steps": sum(1 for s in report.steps if s.tag == "+"),
        "extra_tap_steps": sum(1 for s in report.steps if s.tag == "o"),
        "event_window": [
            {"t": s.t_minutes, "pv": s.pv_scale, "v_min": s.v_min, "v_max": s.v_max,
             "tag": s.tag} for s in event],
    }
    _maybe_write(report, summary, out_prefix)
    return report, summary


def compare(mod_path=None, twovr_path=None, profile=None, out_prefix=None) -> dict:
    """Coordinated vs conventional vs exhaustive on the same day."""
    rows = profile or make_day_profile(cloud=True)
    out = {}
    for mode, path in (("coordinated", mod_path or default_feeder_path("mod")),
                       ("conventional", twovr_path or default_feeder_path("twovr")),
                       ("exhaustive", mod_path or default_feeder_path("mod"))):
        feeder = load_feeder(path)
        rep = run(feeder, rows, ScheduleConfig(mode=mode))
        out[mode] = rep.summary()
        if out_prefix:
            rep.to_csv(f"{out_prefix}_{mode}.csv")
    if out_prefix:
        with open(f"{out_prefix}_compare.json", "w") as fh:
            json.dump(out, fh, indent=1)
    return out


def default_feeder_path(variant: str) -> str:
    import importlib.resources

    return str(importlib.resources.files("voltvar").joinpath(f"data/ieee34_{variant}.json"))


def default_profile_path() -> str:
    import importlib.resources

    return str(importlib.resources.files("voltvar").joinpath("data/profile_day.csv"))


def _maybe_write(report: TimeSeriesReport, summary: dict, out_prefix) -> None:
    if out_prefix:
        report.to_csv(f"{out_prefix}.csv")
        with open(f"{out_prefix}_summary.json", "w") as fh:
            json.dump(summary, fh, indent=1)
