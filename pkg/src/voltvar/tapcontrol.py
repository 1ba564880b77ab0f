"""Slow voltage loop: tap-change trigger and tap-position search.

The trigger fires only when the feeder cannot be held inside the voltage
band by inverters alone: a probe solve with all Var setpoints zeroed must
show violations persistently (15 minutes by default) before taps move, and
an escalation from the fast loop fires immediately.

The search enumerates tap offsets {0, +1, -1, +2, -2} per mechanism around
the present positions - one ganged offset for an LTC, one per phase for a
line regulator - and picks the least-loss combination that keeps every key
inside the band (ties: least total movement, then the earliest in the
enumeration order). Devices are ordered source to end. A pruned variant
first scans each mechanism alone and keeps only offsets that look feasible
and loss-competitive within configurable margins, then evaluates the cross
product of survivors; if the pruned pool contains no feasible combination
the search falls back to the full enumeration and, failing that too,
returns the combination with the smallest worst violation and an infeasible
flag.

Loss favors high voltage on constant-power load, so an unguarded least-loss
pick boosts until the upper limit binds; with inverters absorbing vars the
limit never appears to bind and the positions ratchet upward every window.
Callers can therefore hand the search a second, bare operating point (Var
setpoints zeroed): candidates that worsen that unsupported state's worst
violation are excluded from the feasible pool no matter how cheap they look
under compensation.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import powerflow as pf
from .feeder import TAP_MAX, TAP_MIN, Feeder, OperatingPoint


@dataclass
class TapSearchConfig:
    offsets: tuple[int, ...] = (0, 1, -1, 2, -2)
    prune: bool = True
    voltage_margin: float = 0.015      # pu slack when judging 1-D feasibility
    loss_margin_kw: float = 5.0        # keep 1-D offsets within this of the best
    band_margin: float = 0.0           # feasibility band shrunk inward (pu)


@dataclass
class TapDecision:
    taps: dict[str, np.ndarray]
    feasible: bool
    loss_kw: float
    worst_violation: float
    moved: int                         # total mechanism steps away from start
    evaluations: int
    fallback: bool = False             # pruned pool was empty or infeasible
    stay_worst: float = float("inf")   # worst violation when not moving at all


class TapSearchBudget(Exception):
    """Enumeration would exceed the allowed number of power-flow solves."""


def _mechanisms(feeder: Feeder) -> list[tuple[str, int | None]]:
    """(regulator id, phase position or None for ganged), source to end."""
    regs = sorted(feeder.regulators, key=lambda r: feeder.depth(r.from_node))
    out = []
    for r in regs:
        if r.kind == "ltc":
            out.append((r.id, None))
        else:
            seg = feeder.segment_between(*r.segment)
            out.extend((r.id, k) for k in range(len(seg.phases)))
    return out


def _apply(op: OperatingPoint, mechs, base: dict[str, np.ndarray], deltas) -> dict[str, np.ndarray]:
    taps = {rid: t.copy() for rid, t in base.items()}
    for (rid, ph), d in zip(mechs, deltas):
        if ph is None:
            taps[rid] = np.clip(taps[rid] + d, TAP_MIN, TAP_MAX)
        else:
            taps[rid][ph] = int(np.clip(taps[rid][ph] + d, TAP_MIN, TAP_MAX))
    return taps


def _canon(d: int) -> int:
    # enumeration preference: 0, +1, -1, +2, -2, ...
    return 0 if d == 0 else (2 * d - 1 if d > 0 else -2 * d)


@dataclass
class _Eval:
    deltas: tuple[int, ...]
    taps: dict[str, np.ndarray]
    loss_kw: float
    worst: float
    moved: int
    rank: tuple[int, ...]
    bare_worst: float = 0.0


class _Enumerator:
    def __init__(self, feeder, op, index, v0=None, margin: float = 0.0,
                 bare_op: OperatingPoint | None = None):
        self.feeder = feeder
        self.op = op
        self.ix = index
        self.v0 = v0
        self.mechs = _mechanisms(feeder)
        self.base = {rid: np.asarray(t, dtype=int).copy() for rid, t in op.taps.items()}
        self.cache: dict[tuple[int, ...], _Eval] = {}
        self.lim = feeder.limits
        self.margin = margin
        self.bare_op = bare_op

    def _worst(self, res: pf.PowerFlowResult) -> float:
        vm = res.v_mag()
        worst = float(max(np.maximum(self.lim.v_min + self.margin - vm, 0.0).max(),
                          np.maximum(vm - (self.lim.v_max - self.margin), 0.0).max()))
        return worst if res.converged else float("inf")

    def eval(self, deltas: tuple[int, ...]) -> _Eval:
        hit = self.cache.get(deltas)
        if hit is not None:
            return hit
        taps = _apply(self.op, self.mechs, self.base, deltas)
        trial = self.op.with_taps(taps)
        res = pf.solve(self.feeder, trial, self.ix, v0=self.v0)
        worst = self._worst(res)
        loss = pf.total_loss_kw(self.feeder, res, trial, self.ix)
        bare_worst = 0.0
        if self.bare_op is not None:
            bare = pf.solve(self.feeder, self.bare_op.with_taps(taps), self.ix, v0=res.v)
            bare_worst = self._worst(bare)
        moved = sum(int(np.abs(taps[rid] - self.base[rid]).max()) if ph is None
                    else int(abs(taps[rid][ph] - self.base[rid][ph]))
                    for rid, ph in self.mechs)
        ev = _Eval(deltas, taps, loss, worst, moved, tuple(_canon(d) for d in deltas),
                   bare_worst)
        self.cache[deltas] = ev
        return ev

    def select(self) -> TapDecision:
        stay = self.eval((0,) * len(self.mechs))
        pool = list(self.cache.values())
        feas = [e for e in pool if e.worst <= 0.0
                and e.bare_worst <= stay.bare_worst + 1e-4]
        if feas:
            best = min(feas, key=lambda e: (e.loss_kw, e.moved, e.rank))
            return TapDecision(best.taps, True, best.loss_kw, 0.0, best.moved,
                               len(pool), stay_worst=stay.worst)
        best = min(pool, key=lambda e: (e.worst, e.loss_kw, e.moved, e.rank))
        return TapDecision(best.taps, False, best.loss_kw, best.worst, best.moved,
                           len(pool), stay_worst=stay.worst)


def _allowed_offsets(offsets, forbid: str | None) -> list[int]:
    if forbid == "up":
        return [d for d in offsets if d <= 0]
    if forbid == "down":
        return [d for d in offsets if d >= 0]
    return list(offsets)


def search_taps(feeder: Feeder, op: OperatingPoint, index: pf.NetworkIndex | None = None,
                config: TapSearchConfig | None = None,
                v0: np.ndarray | None = None,
                bare_op: OperatingPoint | None = None,
                forbid: str | None = None) -> TapDecision:
    """Pick the next tap positions within one control action of the present ones.

    When bare_op is given (same taps, different injections - typically the
    operating point with all Var setpoints zeroed), a candidate only counts
    as feasible if it also does not worsen the bare state's worst violation:
    Var absorption must not mask the voltage cap from the tap optimizer.

    forbid="up" drops every raising offset from the enumeration (and "down"
    the lowering ones) - used when the unsupported feeder already violates
    on that side, so boosting can only be paid for with more compensation.
    """
    cfg = config or TapSearchConfig()
    ix = index if index is not None else pf.NetworkIndex(feeder)
    en = _Enumerator(feeder, op, ix, v0, margin=cfg.band_margin, bare_op=bare_op)
    nm = len(en.mechs)
    offsets = _allowed_offsets(cfg.offsets, forbid)
    if nm == 0:
        res = pf.solve(feeder, op, ix, v0=v0)
        vm = res.v_mag()
        worst = float(max(np.maximum(feeder.limits.v_min + cfg.band_margin - vm, 0.0).max(),
                          np.maximum(vm - (feeder.limits.v_max - cfg.band_margin), 0.0).max()))
        return TapDecision(dict(op.taps), worst <= 0.0,
                           pf.total_loss_kw(feeder, res, op, ix), worst, 0, 1,
                           stay_worst=worst)

    if not cfg.prune:
        for deltas in itertools.product(offsets, repeat=nm):
            en.eval(deltas)
        return en.select()

    # one-mechanism scans; survivors feed the cross product
    zero = (0,) * nm
    en.eval(zero)
    keep: list[list[int]] = []
    for mi in range(nm):
        scans = []
        for d in offsets:
            deltas = list(zero)
            deltas[mi] = d
            scans.append((d, en.eval(tuple(deltas))))
        near = [s for s in scans if s[1].worst <= cfg.voltage_margin]
        if near:
            floor = min(e.loss_kw for _, e in near)
            kept = [d for d, e in near if e.loss_kw <= floor + cfg.loss_margin_kw]
        else:
            kept = [d for d, _ in scans]                 # no pruning on a hopeless mechanism
        least = min(scans, key=lambda s: (s[1].worst, s[1].loss_kw))[0]
        if least not in kept:
            kept.append(least)
        keep.append(sorted(kept, key=offsets.index))

    for deltas in itertools.product(*keep):
        en.eval(deltas)
    decision = en.select()
    if not decision.feasible:
        # pruning may have hidden the only feasible pocket; pay for certainty
        for deltas in itertools.product(offsets, repeat=nm):
            en.eval(deltas)
        decision = en.select()
        decision.fallback = True
    return decision


def exhaustive_search_taps(feeder: Feeder, op: OperatingPoint,
                           index: pf.NetworkIndex | None = None, radius: int = 2,
                           budget: int = 1_000_000, force: bool = False,
                           v0: np.ndarray | None = None,
                           band_margin: float = 0.0,
                           bare_op: OperatingPoint | None = None,
                           forbid: str | None = None) -> TapDecision:
    """Plain full enumeration of all offsets in [-radius, radius].

    Refuses (TapSearchBudget) when the window implies more than `budget`
    solves unless force=True; the cost is (2 radius + 1) ** mechanisms
    (fewer when forbid drops one direction).
    """
    ix = index if index is not None else pf.NetworkIndex(feeder)
    en = _Enumerator(feeder, op, ix, v0, margin=band_margin, bare_op=bare_op)
    nm = len(en.mechs)
    offsets = _allowed_offsets(
        [0] + [s * d for d in range(1, radius + 1) for s in (1, -1)], forbid)
    count = len(offsets) ** nm
    if count > budget and not force:
        raise TapSearchBudget(f"{count} evaluations exceed budget {budget}")
    for deltas in itertools.product(offsets, repeat=nm):
        en.eval(deltas)
    return en.select()


# ---------------------------------------------------------------------------
# Trigger

@dataclass
class TriggerState:
    """Persistence bookkeeping between steps; one instance per simulation."""
    pending_since: float | None = None

    def reset(self) -> None:
        self.pending_since = None


def needs_adjustment(feeder: Feeder, op: OperatingPoint, state: TriggerState,
                     index: pf.NetworkIndex | None = None, escalated: bool = False,
                     persistence_min: float = 15.0,
                     v0: np.ndarray | None = None,
                     probe_result: pf.PowerFlowResult | None = None) -> bool:
    """Decide whether the slow loop should move taps now.

    Probes the operating point with every inverter setpoint zeroed (pass
    probe_result to reuse such a solve): if that bare state sits inside the
    band the feeder does not objectively need a tap change (the fast loop
    can do the rest for free) and any pending request is dropped. A
    bare-state violation must persist for persistence_min before the
    trigger fires. An escalation bypasses both.
    """
    if escalated:
        state.reset()
        return True
    res = probe_result
    if res is None:
        ix = index if index is not None else pf.NetworkIndex(feeder)
        probe = op.with_q(np.zeros_like(op.pv_q))
        res = pf.solve(feeder, probe, ix, v0=v0)
    if res.converged and res.in_band(feeder.limits):
        state.reset()
        return False
    if state.pending_since is None:
        state.pending_since = op.t_minutes
    return op.t_minutes - state.pending_since >= persistence_min - 1e-9
