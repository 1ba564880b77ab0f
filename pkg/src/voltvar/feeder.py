"""Three-phase radial feeder model: domain types, file ingestion, operating points.

A feeder is described by a single JSON document (see README for the schema):
nodes with per-phase spot loads, line segments with 3x3 R+jX matrices in
ohm/mile (or an in-line transformer given by nameplate kVA and percent
impedance), regulators attached to segments, PV inverter units, voltage
limits, and the source. Distributed loads attached to a segment are split
half at each end node during loading.

All electrical quantities are converted to per-unit at load time on the
feeder's three-phase kVA base; per-phase powers use base/3 and line-to-neutral
voltage bases, so a transformer is just a series impedance once each node
carries its own kV base.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

log = logging.getLogger(__name__)

PHASES = "abc"

TAP_MIN = -16
TAP_MAX = 16


class FeederError(Exception):
    """Malformed or inconsistent feeder description."""


class ValidationError(FeederError):
    """Structurally parseable feeder that violates a model invariant."""


def _phase_indices(phases: str) -> list[int]:
    return [PHASES.index(p) for p in phases]


@dataclass
class Node:
    id: str
    phases: str                      # subset of "abc", in order
    kv_base_ll: float                # line-to-line kV base at this node
    load: dict[str, complex] = field(default_factory=dict)  # phase -> kW + j*kvar

    @property
    def v_base_ln_kv(self) -> float:
        return self.kv_base_ll / math.sqrt(3.0)


@dataclass
class LineSegment:
    from_node: str
    to_node: str
    length_miles: float = 0.0
    z_per_mile: np.ndarray | None = None   # 3x3 complex ohm/mile, absent phases zero
    transformer: dict | None = None        # {"kva", "r_percent", "x_percent"}
    distributed_load: dict[str, complex] = field(default_factory=dict)
    phases: str = ""                       # filled during validation

    @property
    def key(self) -> tuple[str, str]:
        return (self.from_node, self.to_node)

    def z_ohm(self) -> np.ndarray:
        if self.transformer is not None:
            raise FeederError(f"segment {self.from_node}-{self.to_node} is a transformer; no ohmic matrix")
        return self.z_per_mile * self.length_miles

    def z_pu(self, s_base_kva: float, kv_base_ll: float) -> np.ndarray:
        """Series impedance in per-unit on the from-side voltage base, phases of this segment."""
        idx = _phase_indices(self.phases)
        if self.transformer is not None:
            t = self.transformer
            z = complex(t["r_percent"], t["x_percent"]) / 100.0 * (s_base_kva / t["kva"])
            return np.eye(len(idx), dtype=complex) * z
        z_base = (kv_base_ll / math.sqrt(3.0)) ** 2 * 1000.0 / (s_base_kva / 3.0)
        return self.z_ohm()[np.ix_(idx, idx)] / z_base

    def series_conductance(self, s_base_kva: float, kv_base_ll: float) -> np.ndarray:
        """Per-unit conductance between the segment's phase pairs, real(inv(Z))."""
        return np.real(np.linalg.inv(self.z_pu(s_base_kva, kv_base_ll)))


@dataclass
class RegulatorBank:
    id: str
    from_node: str
    to_node: str
    kind: str                        # "ltc" (ganged) or "vr" (per-phase)
    taps: np.ndarray                 # int per segment phase
    step_ratio: float = 0.00625

    @property
    def segment(self) -> tuple[str, str]:
        return (self.from_node, self.to_node)

    def ratios(self, taps: np.ndarray | None = None) -> np.ndarray:
        t = self.taps if taps is None else np.asarray(taps)
        return 1.0 + self.step_ratio * t


@dataclass
class PvUnit:
    id: str
    node: str
    phase: str
    p_max: float                     # kW at peak generation
    s_rating: float = 0.0            # kVA; defaults to 1.25 * p_max
    p_now: float = 0.0
    q_now: float = 0.0

    def __post_init__(self):
        if self.s_rating == 0.0:
            self.s_rating = 1.25 * self.p_max


@dataclass
class VoltageLimits:
    v_min: float = 0.95
    v_max: float = 1.05


@dataclass
class Feeder:
    """Immutable network description; share freely across concurrent solves."""

    name: str
    s_base_kva: float
    source_node: str
    source_v_pu: float
    nodes: list[Node]
    segments: list[LineSegment]
    regulators: list[RegulatorBank]
    pv_units: list[PvUnit]
    limits: VoltageLimits
    source_angle_deg: float = 0.0
    # derived during validation
    node_by_id: dict[str, Node] = field(default_factory=dict, repr=False)
    parent: dict[str, tuple[str, LineSegment]] = field(default_factory=dict, repr=False)
    children: dict[str, list[str]] = field(default_factory=dict, repr=False)
    bfs_order: list[str] = field(default_factory=list, repr=False)
    regulator_by_segment: dict[tuple[str, str], RegulatorBank] = field(default_factory=dict, repr=False)

    @property
    def s_base_1ph_kva(self) -> float:
        return self.s_base_kva / 3.0

    def segment_between(self, a: str, b: str) -> LineSegment:
        for seg in self.segments:
            if seg.key == (a, b):
                return seg
        raise KeyError(f"no segment {a}-{b}")

    def pv_index(self) -> dict[str, int]:
        return {pv.id: k for k, pv in enumerate(self.pv_units)}

    def subtree_nodes(self, root: str) -> list[str]:
        out, stack = [], [root]
        while stack:
            n = stack.pop()
            out.append(n)
            stack.extend(self.children[n])
        return out

    def depth(self, node: str) -> int:
        d, n = 0, node
        while n != self.source_node:
            n = self.parent[n][0]
            d += 1
        return d


# ---------------------------------------------------------------------------
# Validation

def _validate(f: Feeder) -> Feeder:
    f.node_by_id = {}
    for n in f.nodes:
        if n.id in f.node_by_id:
            raise ValidationError(f"duplicate node id {n.id!r}")
        if not n.phases or any(p not in PHASES for p in n.phases):
            raise ValidationError(f"node {n.id!r}: bad phase set {n.phases!r}")
        for p, s in n.load.items():
            if p not in n.phases:
                raise ValidationError(f"node {n.id!r}: load on absent phase {p!r}")
            if not (math.isfinite(s.real) and math.isfinite(s.imag)):
                raise ValidationError(f"node {n.id!r}: non-finite load on phase {p!r}")
        f.node_by_id[n.id] = n

    if f.source_node not in f.node_by_id:
        raise ValidationError(f"source node {f.source_node!r} not defined")

    # radial tree: union-find over segments, then orient from the source
    comp = {n.id: n.id for n in f.nodes}

    def find(x):
        while comp[x] != x:
            comp[x] = comp[comp[x]]
            x = comp[x]
        return x

    adjacency: dict[str, list[tuple[str, LineSegment]]] = {n.id: [] for n in f.nodes}
    for seg in f.segments:
        for end in seg.key:
            if end not in f.node_by_id:
                raise ValidationError(f"segment {seg.from_node}-{seg.to_node}: unknown node {end!r}")
        a, b = find(seg.from_node), find(seg.to_node)
        if a == b:
            raise ValidationError(
                f"segment {seg.from_node}-{seg.to_node} closes a cycle through node {seg.from_node!r}; feeder must be radial")
        comp[a] = b
        # segment phases: endpoints must share them, impedance diag must cover them
        pa = set(f.node_by_id[seg.from_node].phases)
        pb = set(f.node_by_id[seg.to_node].phases)
        common = "".join(p for p in PHASES if p in pa and p in pb)
        if seg.transformer is None:
            if seg.length_miles <= 0:
                raise ValidationError(f"segment {seg.from_node}-{seg.to_node}: length must be > 0")
            z = seg.z_per_mile
            if z is None or z.shape != (3, 3):
                raise ValidationError(f"segment {seg.from_node}-{seg.to_node}: needs a 3x3 impedance matrix")
            present = "".join(p for i, p in enumerate(PHASES) if z[i, i] != 0)
            for i, p in enumerate(PHASES):
                if p not in present and (np.any(z[i, :] != 0) or np.any(z[:, i] != 0)):
                    raise ValidationError(
                        f"segment {seg.from_node}-{seg.to_node}: impedance entries on absent phase {p!r}")
            if any(p not in common for p in present):
                raise ValidationError(
                    f"segment {seg.from_node}-{seg.to_node}: phases {present!r} not present at both ends")
            seg.phases = present
        else:
            seg.phases = common
        for p in seg.distributed_load:
            if p not in seg.phases:
                raise ValidationError(
                    f"segment {seg.from_node}-{seg.to_node}: distributed load on absent phase {p!r}")

    if len(f.segments) != len(f.nodes) - 1:
        raise ValidationError(
            f"not radial: {len(f.nodes)} nodes need {len(f.nodes) - 1} segments, got {len(f.segments)}")

    for seg in f.segments:
        adjacency[seg.from_node].append((seg.to_node, seg))
        adjacency[seg.to_node].append((seg.from_node, seg))

    f.parent, f.children, f.bfs_order = {}, {n.id: [] for n in f.nodes}, []
    frontier = [f.source_node]
    seen = {f.source_node}
    while frontier:
        nxt = []
        for u in frontier:
            f.bfs_order.append(u)
            for v, seg in adjacency[u]:
                if v in seen:
                    continue
                seen.add(v)
                f.parent[v] = (u, seg)
                f.children[u].append(v)
                nxt.append(v)
        frontier = nxt
    if len(seen) != len(f.nodes):
        missing = sorted(set(f.node_by_id) - seen)
        raise ValidationError(f"nodes unreachable from source: {missing}")

    # orient every segment parent -> child
    for v, (u, seg) in f.parent.items():
        if seg.key == (v, u):
            seg.from_node, seg.to_node = u, v
    # every phase a node declares must be fed through its parent segment
    for v, (u, seg) in f.parent.items():
        missing = [p for p in f.node_by_id[v].phases if p not in seg.phases]
        if missing:
            raise ValidationError(
                f"node {v!r}: phases {''.join(missing)!r} not fed by segment {u}-{v}")

    f.regulator_by_segment = {}
    seen_reg = set()
    for reg in f.regulators:
        if reg.id in seen_reg:
            raise ValidationError(f"duplicate regulator id {reg.id!r}")
        seen_reg.add(reg.id)
        try:
            seg = f.segment_between(*reg.segment)
        except KeyError:
            try:
                seg = f.segment_between(reg.to_node, reg.from_node)
                reg.from_node, reg.to_node = seg.from_node, seg.to_node
            except KeyError:
                raise ValidationError(f"regulator {reg.id!r}: no segment {reg.from_node}-{reg.to_node}") from None
        if seg.key in f.regulator_by_segment:
            raise ValidationError(f"two regulators on segment {seg.from_node}-{seg.to_node}")
        reg.taps = np.atleast_1d(np.asarray(reg.taps, dtype=int))
        if reg.taps.size == 1:
            reg.taps = np.full(len(seg.phases), int(reg.taps[0]))
        if reg.taps.size != len(seg.phases):
            raise ValidationError(f"regulator {reg.id!r}: {reg.taps.size} taps for phases {seg.phases!r}")
        if np.any(reg.taps < TAP_MIN) or np.any(reg.taps > TAP_MAX):
            raise ValidationError(f"regulator {reg.id!r}: tap outside [{TAP_MIN}, {TAP_MAX}]")
        if reg.kind == "ltc" and len(set(reg.taps.tolist())) > 1:
            raise ValidationError(f"regulator {reg.id!r}: LTC taps must be equal across phases")
        if reg.kind not in ("ltc", "vr"):
            raise ValidationError(f"regulator {reg.id!r}: unknown kind {reg.kind!r}")
        f.regulator_by_segment[seg.key] = reg

    seen_pv = set()
    for pv in f.pv_units:
        if pv.id in seen_pv:
            raise ValidationError(f"duplicate pv id {pv.id!r}")
        seen_pv.add(pv.id)
        if pv.node not in f.node_by_id:
            raise ValidationError(f"pv {pv.id!r}: unknown node {pv.node!r}")
        if pv.phase not in f.node_by_id[pv.node].phases:
            raise ValidationError(f"pv {pv.id!r}: phase {pv.phase!r} not present at node {pv.node!r}")
        if abs(pv.s_rating - 1.25 * pv.p_max) > 1e-9 * max(1.0, pv.s_rating):
            raise ValidationError(f"pv {pv.id!r}: s_rating must be 1.25 x p_max")

    if not (0 < f.limits.v_min < f.limits.v_max):
        raise ValidationError(f"voltage limits must satisfy 0 < v_min < v_max, got {f.limits}")
    return f


# ---------------------------------------------------------------------------
# JSON serialization

def _phase_map_to_complex(kw: dict | None, kvar: dict | None) -> dict[str, complex]:
    out: dict[str, complex] = {}
    for p in set(kw or {}) | set(kvar or {}):
        out[p] = complex((kw or {}).get(p, 0.0), (kvar or {}).get(p, 0.0))
    return out


def _complex_to_phase_maps(load: dict[str, complex]) -> tuple[dict, dict]:
    kw = {p: s.real for p, s in load.items() if s.real != 0.0 or s.imag == 0.0}
    kvar = {p: s.imag for p, s in load.items() if s.imag != 0.0}
    return kw, kvar


def feeder_from_dict(doc: dict) -> Feeder:
    try:
        nodes = [
            Node(id=str(n["id"]), phases=n["phases"], kv_base_ll=float(n["kv_base_ll"]),
                 load=_phase_map_to_complex(n.get("load_kw"), n.get("load_kvar")))
            for n in doc["nodes"]
        ]
        segments = []
        for s in doc["segments"]:
            z = None
            if "r_ohm_per_mile" in s:
                z = np.asarray(s["r_ohm_per_mile"], dtype=float) + 1j * np.asarray(s["x_ohm_per_mile"], dtype=float)
            segments.append(LineSegment(
                from_node=str(s["from"]), to_node=str(s["to"]),
                length_miles=float(s.get("length_miles", 0.0)),
                z_per_mile=z, transformer=s.get("transformer"),
                distributed_load=_phase_map_to_complex(
                    s.get("distributed_load_kw"), s.get("distributed_load_kvar"))))
        regulators = [
            RegulatorBank(id=str(r["id"]), from_node=str(r["from"]), to_node=str(r["to"]),
                          kind=r["kind"],
                          taps=np.asarray([r["taps"][p] for p in sorted(r["taps"])], dtype=int)
                          if isinstance(r["taps"], dict) else np.asarray(r["taps"], dtype=int),
                          step_ratio=float(r.get("step_ratio", 0.00625)))
            for r in doc.get("regulators", [])
        ]
        pv_units = [
            PvUnit(id=str(p["id"]), node=str(p["node"]), phase=p["phase"],
                   p_max=float(p["p_max_kw"]), s_rating=float(p.get("s_rating_kva", 0.0)))
            for p in doc.get("pv_units", [])
        ]
        lim = doc.get("voltage_limits", {})
        feeder = Feeder(
            name=doc.get("name", "feeder"),
            s_base_kva=float(doc["s_base_kva"]),
            source_node=str(doc["source"]["node"]),
            source_v_pu=float(doc["source"].get("v_pu", 1.0)),
            source_angle_deg=float(doc["source"].get("angle_deg", 0.0)),
            nodes=nodes, segments=segments, regulators=regulators, pv_units=pv_units,
            limits=VoltageLimits(float(lim.get("v_min", 0.95)), float(lim.get("v_max", 1.05))))
    except (KeyError, TypeError, ValueError) as exc:
        raise FeederError(f"malformed feeder document: {exc}") from exc

    feeder = _validate(feeder)
    _split_distributed_loads(feeder)
    return feeder


def _split_distributed_loads(f: Feeder) -> None:
    # half of each segment's distributed load lumps onto each end node
    for seg in f.segments:
        if not seg.distributed_load:
            continue
        for end in seg.key:
            node = f.node_by_id[end]
            for p, s in seg.distributed_load.items():
                node.load[p] = node.load.get(p, 0j) + 0.5 * s


def load_feeder(path) -> Feeder:
    """Read, validate and return a feeder from its JSON description."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FeederError(f"{path}: not valid JSON ({exc})") from exc
    return feeder_from_dict(doc)


def feeder_to_dict(f: Feeder) -> dict:
    """Inverse of feeder_from_dict; loads stay as lumped (post-split) values."""
    doc = {
        "name": f.name,
        "s_base_kva": f.s_base_kva,
        "source": {"node": f.source_node, "v_pu": f.source_v_pu, "angle_deg": f.source_angle_deg},
        "voltage_limits": {"v_min": f.limits.v_min, "v_max": f.limits.v_max},
        "nodes": [],
        "segments": [],
        "regulators": [],
        "pv_units": [],
    }
    for n in f.nodes:
        kw, kvar = _complex_to_phase_maps(n.load)
        entry = {"id": n.id, "phases": n.phases, "kv_base_ll": n.kv_base_ll}
        if kw:
            entry["load_kw"] = kw
        if kvar:
            entry["load_kvar"] = kvar
        doc["nodes"].append(entry)
    for s in f.segments:
        entry = {"from": s.from_node, "to": s.to_node}
        if s.transformer is not None:
            entry["transformer"] = s.transformer
        else:
            entry["length_miles"] = s.length_miles
            entry["r_ohm_per_mile"] = np.real(s.z_per_mile).tolist()
            entry["x_ohm_per_mile"] = np.imag(s.z_per_mile).tolist()
        doc["segments"].append(entry)
    for r in f.regulators:
        seg = f.segment_between(*r.segment)
        doc["regulators"].append({
            "id": r.id, "from": r.from_node, "to": r.to_node, "kind": r.kind,
            "taps": {p: int(t) for p, t in zip(seg.phases, r.taps)},
            "step_ratio": r.step_ratio})
    for p in f.pv_units:
        doc["pv_units"].append({
            "id": p.id, "node": p.node, "phase": p.phase,
            "p_max_kw": p.p_max, "s_rating_kva": p.s_rating})
    return doc


def save_feeder(f: Feeder, path) -> None:
    with open(path, "w") as fh:
        json.dump(feeder_to_dict(f), fh, indent=1)


# ---------------------------------------------------------------------------
# Operating points

def pv_q_limit(s_rating: float, p_now: float) -> float:
    """Reactive capacity left at active output p_now: sqrt(s^2 - p^2)."""
    if p_now > s_rating + 1e-9:
        raise ValueError(f"active output {p_now} exceeds rating {s_rating}")
    return math.sqrt(max(s_rating ** 2 - p_now ** 2, 0.0))


@dataclass
class OperatingPoint:
    """Time-stamped injections plus the control settings in force.

    A value object: controllers work on copies via with_q / with_taps, the
    feeder itself is never mutated.
    """

    t_minutes: float
    load_scale: float
    pv_scale: float
    load: dict[tuple[str, str], complex]     # (node, phase) -> scaled kW + j*kvar
    pv_p: np.ndarray                         # kW per pv unit, feeder order
    pv_q: np.ndarray                         # kvar per pv unit
    q_max: np.ndarray                        # kvar capacity per pv unit
    taps: dict[str, np.ndarray]              # regulator id -> tap vector

    def copy(self) -> "OperatingPoint":
        return OperatingPoint(
            self.t_minutes, self.load_scale, self.pv_scale, dict(self.load),
            self.pv_p.copy(), self.pv_q.copy(), self.q_max.copy(),
            {k: v.copy() for k, v in self.taps.items()})

    def with_q(self, q: np.ndarray) -> "OperatingPoint":
        op = self.copy()
        op.pv_q = np.clip(np.asarray(q, dtype=float), -self.q_max, self.q_max)
        return op

    def with_taps(self, taps: dict[str, np.ndarray]) -> "OperatingPoint":
        op = self.copy()
        for rid, t in taps.items():
            op.taps[rid] = np.clip(np.asarray(t, dtype=int), TAP_MIN, TAP_MAX)
        return op

    def net_injection_kva(self, feeder: Feeder) -> dict[tuple[str, str], complex]:
        """Generation minus load per (node, phase), in kW + j*kvar."""
        inj = {key: -s for key, s in self.load.items()}
        for k, pv in enumerate(feeder.pv_units):
            key = (pv.node, pv.phase)
            inj[key] = inj.get(key, 0j) + complex(self.pv_p[k], self.pv_q[k])
        return inj


def apply_operating_point(feeder: Feeder, load_scale: float, pv_scale: float,
                          t_minutes: float = 0.0,
                          taps: dict[str, np.ndarray] | None = None,
                          q: np.ndarray | None = None) -> OperatingPoint:
    """Scale the feeder's nominal loads and PV output into an operating point.

    Negative scales are clamped to zero with a warning. Inverter reactive
    capacity is recomputed from the apparent rating at the new active output;
    carried-over setpoints are clipped into the new bounds.
    """
    if load_scale < 0 or pv_scale < 0:
        log.warning("negative scale clamped: load=%.4f pv=%.4f", load_scale, pv_scale)
        load_scale = max(load_scale, 0.0)
        pv_scale = max(pv_scale, 0.0)
    load = {}
    for n in feeder.nodes:
        for p, s in n.load.items():
            if s != 0:
                load[(n.id, p)] = s * load_scale
    pv_p = np.array([min(pv.p_max * pv_scale, pv.p_max) for pv in feeder.pv_units], dtype=float)
    q_max = np.array([pv_q_limit(pv.s_rating, p) for pv, p in zip(feeder.pv_units, pv_p)], dtype=float)
    if q is None:
        pv_q = np.zeros(len(feeder.pv_units))
    else:
        pv_q = np.clip(np.asarray(q, dtype=float), -q_max, q_max)
    if taps is None:
        taps = {r.id: r.taps.copy() for r in feeder.regulators}
    else:
        taps = {k: np.asarray(v, dtype=int).copy() for k, v in taps.items()}
    return OperatingPoint(t_minutes, load_scale, pv_scale, load, pv_p, pv_q, q_max, taps)


# ---------------------------------------------------------------------------
# Load/PV profiles

def load_profile(path) -> list[tuple[float, float, float]]:
    """Read a `time, load_scale, pv_scale` CSV; time is HH:MM or minutes."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"time", "load_scale", "pv_scale"}
        if reader.fieldnames is None or not need.issubset(reader.fieldnames):
            raise FeederError(f"{path}: profile needs columns {sorted(need)}")
        for rec in reader:
            t = rec["time"].strip()
            if ":" in t:
                hh, mm = t.split(":")
                minutes = 60.0 * int(hh) + int(mm)
            else:
                minutes = float(t)
            rows.append((minutes, float(rec["load_scale"]), float(rec["pv_scale"])))
    if not rows:
        raise FeederError(f"{path}: empty profile")
    return rows


def save_profile(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "load_scale", "pv_scale"])
        for t, ls, ps in rows:
            w.writerow([f"{int(t) // 60:02d}:{int(t) % 60:02d}", f"{ls:.4f}", f"{ps:.4f}"])
