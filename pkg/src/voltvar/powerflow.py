"""Unbalanced power flow and sensitivities in the phase frame.

Every (node, phase) pair is one electrical key. The solver is a
backward/forward ladder sweep over the radial tree; regulators are ideal
per-phase ratios in series with their host segment, so a regulated segment
transforms voltage and current as V_to = A V_from - Z I and I_from = A I.

On top of the solved state the module provides the bus admittance matrix,
series losses (both as sum over phase-pair conductance terms and as a
drop-times-current cross-check), the polar power-mismatch Jacobian, and
reduced gradients of scalar objectives with respect to inverter kvar
injections via one adjoint solve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .feeder import Feeder, OperatingPoint, VoltageLimits

PHASE_ANGLE = {"a": 0.0, "b": -120.0, "c": 120.0}


class PowerFlowError(Exception):
    pass


@dataclass
class _Seg:
    from_rows: np.ndarray
    to_rows: np.ndarray
    z: np.ndarray                 # per-unit series impedance
    y: np.ndarray                 # inv(z)
    reg_id: str | None
    phases: str


class NetworkIndex:
    """Flattened key numbering and cached per-unit segment data for a feeder.

    Build once per feeder and pass to every solve/gradient call; everything
    here is invariant under operating-point changes (taps enter later).
    """

    def __init__(self, feeder: Feeder):
        self.feeder = feeder
        self.keys: list[tuple[str, str]] = []
        for nid in feeder.bfs_order:
            for p in feeder.node_by_id[nid].phases:
                self.keys.append((nid, p))
        self.pos = {k: i for i, k in enumerate(self.keys)}
        self.n = len(self.keys)
        self.s1 = feeder.s_base_1ph_kva

        src = feeder.source_node
        self.slack_rows = np.array([self.pos[(src, p)] for p in feeder.node_by_id[src].phases])
        slack = set(self.slack_rows.tolist())
        self.free_rows = np.array([i for i in range(self.n) if i not in slack])
        self.free_pos = {row: k for k, row in enumerate(self.free_rows)}

        # segments in parent-before-child order, as oriented by the feeder
        self.segs: list[_Seg] = []
        seg_of_node: dict[str, int] = {}
        for nid in feeder.bfs_order:
            if nid == src:
                continue
            parent, seg = feeder.parent[nid]
            kv = feeder.node_by_id[parent].kv_base_ll
            z = seg.z_pu(feeder.s_base_kva, kv)
            reg = feeder.regulator_by_segment.get(seg.key)
            self.segs.append(_Seg(
                from_rows=np.array([self.pos[(parent, p)] for p in seg.phases]),
                to_rows=np.array([self.pos[(nid, p)] for p in seg.phases]),
                z=z, y=np.linalg.inv(z),
                reg_id=reg.id if reg else None, phases=seg.phases))
            seg_of_node[nid] = len(self.segs) - 1
        # child segment ids hanging off each segment's to-node, with the
        # positions of the child's phases inside this segment's phase list
        self.child_segs: list[list[tuple[int, np.ndarray]]] = [[] for _ in self.segs]
        for nid, si in seg_of_node.items():
            for c in feeder.children[nid]:
                ci = seg_of_node[c]
                up = np.array([self.segs[si].phases.index(p) for p in self.segs[ci].phases])
                self.child_segs[si].append((ci, up))
        self.seg_of_node = seg_of_node

        ang = math.radians(feeder.source_angle_deg)
        self.unit = np.array([np.exp(1j * (math.radians(PHASE_ANGLE[p]) + ang))
                              for _, p in self.keys])

    # -- operating-point-dependent pieces ------------------------------

    def injection_pu(self, op: OperatingPoint) -> np.ndarray:
        s = np.zeros(self.n, dtype=complex)
        for key, kva in op.net_injection_kva(self.feeder).items():
            s[self.pos[key]] = kva / self.s1
        return s

    def ratios(self, op: OperatingPoint) -> list[np.ndarray | None]:
        out = []
        for seg in self.segs:
            if seg.reg_id is None:
                out.append(None)
            else:
                reg = next(r for r in self.feeder.regulators if r.id == seg.reg_id)
                out.append(reg.ratios(op.taps[seg.reg_id]))
        return out

    def start_voltage(self, op: OperatingPoint) -> np.ndarray:
        """No-load profile: source magnitude stepped by regulator ratios."""
        v = self.feeder.source_v_pu * self.unit.copy()
        ratios = self.ratios(op)
        for seg, a in zip(self.segs, ratios):
            scale = v[seg.from_rows] / (self.feeder.source_v_pu * self.unit[seg.from_rows])
            if a is not None:
                scale = scale * a
            v[seg.to_rows] = self.feeder.source_v_pu * self.unit[seg.to_rows] * np.real(scale)
        return v

    def q_row(self, pv_idx: int) -> int:
        pv = self.feeder.pv_units[pv_idx]
        row = self.pos[(pv.node, pv.phase)]
        if row not in self.free_pos:
            raise PowerFlowError(f"pv {pv.id} sits on the slack node")
        return len(self.free_rows) + self.free_pos[row]


@dataclass
class PowerFlowResult:
    index: NetworkIndex = field(repr=False)
    v: np.ndarray = field(repr=False)          # complex, per key
    converged: bool = False
    iterations: int = 0
    max_mismatch_pu: float = float("nan")

    def v_mag(self) -> np.ndarray:
        return np.abs(self.v)

    def angles(self) -> np.ndarray:
        return np.angle(self.v)

    def voltage(self, node: str, phase: str) -> complex:
        return self.v[self.index.pos[(node, phase)]]

    def violations(self, limits: VoltageLimits | None = None,
                   margin: float = 0.0) -> list[tuple[str, str, float]]:
        """Keys outside the band, optionally shrunk inward by `margin` pu."""
        lim = limits or self.index.feeder.limits
        out = []
        for key, m in zip(self.index.keys, np.abs(self.v)):
            if m < lim.v_min + margin - 1e-12 or m > lim.v_max - margin + 1e-12:
                out.append((key[0], key[1], float(m)))
        return out

    def in_band(self, limits: VoltageLimits | None = None, margin: float = 0.0) -> bool:
        return not self.violations(limits, margin)

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node", "phase", "v_pu", "angle_deg"])
            for (node, p), val in zip(self.index.keys, self.v):
                w.writerow([node, p, f"{abs(val):.8f}", f"{math.degrees(np.angle(val)):.6f}"])


def solve(feeder: Feeder, op: OperatingPoint, index: NetworkIndex | None = None,
          v0: np.ndarray | None = None, tol: float = 1e-6, max_iter: int = 100) -> PowerFlowResult:
    """Ladder sweep to a fixed point; converges on max |dV| <= tol (pu).

    v0 warm-starts from a previous solution; otherwise the no-load profile
    (with the operating point's tap ratios) seeds the iteration.
    """
    ix = index if index is not None else NetworkIndex(feeder)
    s_inj = ix.injection_pu(op)
    ratios = ix.ratios(op)
    v = v0.copy() if v0 is not None else ix.start_voltage(op)
    v[ix.slack_rows] = feeder.source_v_pu * ix.unit[ix.slack_rows]

    i_seg: list[np.ndarray | None] = [None] * len(ix.segs)
    it = 0
    delta = math.inf
    for it in range(1, max_iter + 1):
        v_prev = v.copy()
        for si in range(len(ix.segs) - 1, -1, -1):
            seg = ix.segs[si]
            cur = -np.conj(s_inj[seg.to_rows] / v[seg.to_rows])
            for ci, up in ix.child_segs[si]:
                a = ratios[ci]
                cur[up] += a * i_seg[ci] if a is not None else i_seg[ci]
            i_seg[si] = cur
        for si, seg in enumerate(ix.segs):
            a = ratios[si]
            vf = a * v[seg.from_rows] if a is not None else v[seg.from_rows]
            v[seg.to_rows] = vf - seg.z @ i_seg[si]
        delta = float(np.max(np.abs(v - v_prev)))
        if delta <= tol:
            break
    res = PowerFlowResult(index=ix, v=v, converged=delta <= tol, iterations=it)
    res.max_mismatch_pu = _mismatch_pu(ix, v, s_inj, ratios)
    if not np.all(np.isfinite(v)):
        res.converged = False
    return res


def _mismatch_pu(ix: NetworkIndex, v: np.ndarray, s_inj: np.ndarray, ratios) -> float:
    """Max |S_spec - S_calc| on non-slack keys, from per-segment Ohm currents."""
    i_into = np.zeros(ix.n, dtype=complex)
    for seg, a in zip(ix.segs, ratios):
        wf = a * v[seg.from_rows] if a is not None else v[seg.from_rows]
        im = seg.y @ (wf - v[seg.to_rows])
        i_into[seg.from_rows] -= a * im if a is not None else im
        i_into[seg.to_rows] += im
    resid = s_inj + v * np.conj(i_into)
    return float(np.max(np.abs(resid[ix.free_rows])))


# ---------------------------------------------------------------------------
# Losses

def _segment_w(ix: NetworkIndex, v: np.ndarray, si: int, ratios) -> tuple[np.ndarray, np.ndarray]:
    """Post-ratio sending and receiving voltages of segment si, stacked."""
    seg = ix.segs[si]
    a = ratios[si]
    wf = a * v[seg.from_rows] if a is not None else v[seg.from_rows]
    return np.concatenate([wf, v[seg.to_rows]]), np.concatenate([seg.from_rows, seg.to_rows])


def total_loss_kw(feeder: Feeder, result: PowerFlowResult, op: OperatingPoint,
                  index: NetworkIndex | None = None, method: str = "pairs") -> float:
    """Series loss in kW.

    method "pairs" sums conductance terms g_ij (w_i^2 + w_j^2
    - 2 w_i w_j cos t_ij) over the phase pairs of every segment two-port;
    "current" recomputes it as voltage drop times conjugate current. Both are
    exact and must agree; keeping them separate makes each a check on the
    other.
    """
    ix = index if index is not None else result.index
    ratios = ix.ratios(op)
    total = 0.0
    for si, seg in enumerate(ix.segs):
        w, _ = _segment_w(ix, result.v, si, ratios)
        m = len(seg.phases)
        if method == "current":
            d = w[:m] - w[m:]
            total += float(np.real(np.sum(d * np.conj(seg.y @ d))))
            continue
        block = np.block([[seg.y, -seg.y], [-seg.y, seg.y]])
        g = -np.real(block)
        wm = np.abs(w)
        th = np.angle(w)
        for i in range(2 * m):
            for j in range(i + 1, 2 * m):
                total += g[i, j] * (wm[i] ** 2 + wm[j] ** 2
                                    - 2.0 * wm[i] * wm[j] * math.cos(th[i] - th[j]))
    return total * ix.s1


def loss_state_gradient(feeder: Feeder, result: PowerFlowResult, op: OperatingPoint,
                        index: NetworkIndex | None = None) -> np.ndarray:
    """d(loss kW)/dx with x = [angles, magnitudes] on non-slack keys."""
    ix = index if index is not None else result.index
    ratios = ix.ratios(op)
    dv = np.zeros(ix.n)
    dth = np.zeros(ix.n)
    for si, seg in enumerate(ix.segs):
        w, rows = _segment_w(ix, result.v, si, ratios)
        m = len(seg.phases)
        block = np.block([[seg.y, -seg.y], [-seg.y, seg.y]])
        g = -np.real(block)
        wm = np.abs(w)
        th = np.angle(w)
        a = ratios[si]
        chain = np.concatenate([a if a is not None else np.ones(m), np.ones(m)])
        for i in range(2 * m):
            for j in range(i + 1, 2 * m):
                c = math.cos(th[i] - th[j])
                s = math.sin(th[i] - th[j])
                dv[rows[i]] += chain[i] * g[i, j] * (2.0 * wm[i] - 2.0 * wm[j] * c)
                dv[rows[j]] += chain[j] * g[i, j] * (2.0 * wm[j] - 2.0 * wm[i] * c)
                dth[rows[i]] += g[i, j] * 2.0 * wm[i] * wm[j] * s
                dth[rows[j]] -= g[i, j] * 2.0 * wm[i] * wm[j] * s
    fr = ix.free_rows
    return np.concatenate([dth[fr], dv[fr]]) * ix.s1


# ---------------------------------------------------------------------------
# Voltage-deviation objective pieces

def limit_violation_weights(result: PowerFlowResult, limits: VoltageLimits | None = None,
                            margin: float = 0.0) -> np.ndarray:
    """Indicator weights: 1 on keys outside the band, 0 inside.

    A positive `margin` shrinks the band so the correction lands strictly
    interior, leaving headroom against the next load tick.
    """
    lim = limits or result.index.feeder.limits
    vm = result.v_mag()
    lo = lim.v_min + margin
    hi = lim.v_max - margin
    return ((vm < lo - 1e-12) | (vm > hi + 1e-12)).astype(float)


def voltage_deviation(result: PowerFlowResult, weights: np.ndarray) -> float:
    vm = result.v_mag()
    return float(np.sum(weights * (vm - 1.0) ** 2))


def voltage_state_gradient(result: PowerFlowResult, weights: np.ndarray) -> np.ndarray:
    ix = result.index
    vm = result.v_mag()
    dv = 2.0 * weights * (vm - 1.0)
    fr = ix.free_rows
    return np.concatenate([np.zeros(fr.size), dv[fr]])


# ---------------------------------------------------------------------------
# Admittance matrix, Jacobian, reduced gradient

def ybus(feeder: Feeder, op: OperatingPoint, index: NetworkIndex | None = None) -> np.ndarray:
    """Dense phase-frame admittance matrix at the operating point's taps."""
    ix = index if index is not None else NetworkIndex(feeder)
    ratios = ix.ratios(op)
    Y = np.zeros((ix.n, ix.n), dtype=complex)
    for seg, a in zip(ix.segs, ratios):
        y = seg.y
        A = np.diag(a) if a is not None else None
        ff = A @ y @ A if A is not None else y
        ft = A @ y if A is not None else y
        Y[np.ix_(seg.from_rows, seg.from_rows)] += ff
        Y[np.ix_(seg.from_rows, seg.to_rows)] -= ft
        Y[np.ix_(seg.to_rows, seg.from_rows)] -= ft.T
        Y[np.ix_(seg.to_rows, seg.to_rows)] += y
    return Y


@dataclass
class JacobianInfo:
    J: np.ndarray                      # d(power mismatch)/d(state), free keys
    free_rows: np.ndarray
    n_free: int
    condition: float | None = None


def assemble_jacobian(feeder: Feeder, result: PowerFlowResult, op: OperatingPoint,
                      index: NetworkIndex | None = None,
                      with_condition: bool = False) -> JacobianInfo:
    """Polar mismatch Jacobian [[dDP/dth, dDP/dv], [dDQ/dth, dDQ/dv]].

    Rows and columns run over non-slack keys; mismatch is spec minus
    calculated, hence the overall minus sign against the textbook power
    derivatives.
    """
    ix = index if index is not None else result.index
    Y = ybus(feeder, op, ix)
    v = np.abs(result.v)
    th = np.angle(result.v)
    G, B = Y.real, Y.imag
    dth = th[:, None] - th[None, :]
    ct, st = np.cos(dth), np.sin(dth)
    vv = v[:, None] * v[None, :]
    M1 = vv * (G * ct + B * st)
    M2 = vv * (G * st - B * ct)
    P = M1.sum(axis=1)
    Q = M2.sum(axis=1)

    dPdt = M2.copy()
    np.fill_diagonal(dPdt, -Q - B.diagonal() * v ** 2)
    dPdv = M1 / v[None, :]
    np.fill_diagonal(dPdv, P / v + G.diagonal() * v)
    dQdt = -M1
    np.fill_diagonal(dQdt, P - G.diagonal() * v ** 2)
    dQdv = M2 / v[None, :]
    np.fill_diagonal(dQdv, Q / v - B.diagonal() * v)

    fr = ix.free_rows
    Jc = np.block([[dPdt[np.ix_(fr, fr)], dPdv[np.ix_(fr, fr)]],
                   [dQdt[np.ix_(fr, fr)], dQdv[np.ix_(fr, fr)]]])
    J = -Jc
    cond = float(np.linalg.cond(J)) if with_condition else None
    return JacobianInfo(J=J, free_rows=fr, n_free=fr.size, condition=cond)


def reduced_gradient(feeder: Feeder, result: PowerFlowResult, op: OperatingPoint,
                     dfdx: np.ndarray, index: NetworkIndex | None = None) -> np.ndarray:
    """df/du in (f-units per kvar) for every inverter, via one adjoint solve.

    dfdx is the explicit objective gradient over the state [angles,
    magnitudes] on non-slack keys. The network constraint g(x, u) = 0 is the
    power mismatch; u enters only the reactive row of its own key, so the
    whole fleet's gradient falls out of a single transposed solve. A 2-D
    dfdx (one objective per row) is solved against the same factorization
    and returns one gradient per row.
    """
    ix = index if index is not None else result.index
    info = assemble_jacobian(feeder, result, op, ix)
    # g = spec - calc, dg/du = +e_q / s1; dx/du = -J^-1 dg/du; J = -Jcalc
    lu = scipy.linalg.lu_factor(-info.J.T)
    lam = scipy.linalg.lu_solve(lu, np.asarray(dfdx).T)
    q_rows = np.array([ix.q_row(k) for k in range(len(feeder.pv_units))])
    grad = lam[q_rows] / ix.s1
    return grad.T if grad.ndim == 2 else grad
