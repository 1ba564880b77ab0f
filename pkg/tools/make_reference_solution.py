"""Freeze an independent power-flow solution for the bundled IEEE-34 base feeder.

Deliberately shares no code with the voltvar package: it re-parses the feeder
JSON on its own, assembles a full phase-frame bus admittance matrix, and runs
a Newton-Raphson iteration in rectangular voltage coordinates with an analytic
Jacobian. The sweep solver in the package is validated against the CSV this
script writes (tests/data/ieee34_base_solution.csv).

Modeling conventions match the package by construction of the shared data
file: constant-PQ loads, distributed segment loads split half onto each end
node, regulators as ideal per-phase ratios (1 + 0.00625*tap) in series with
their host segment's impedance, per-node voltage bases so the in-line
transformer is a plain series impedance in per-unit.

Run:  python3 tools/make_reference_solution.py [feeder.json [out.csv]]
"""

import csv
import json
import math
import pathlib
import sys

import numpy as np

PH = "abc"


def build_ybus(doc):
    """Return (index map {(node,phase)->row}, Y, slack keys, S_spec in pu, v_base map)."""
    s1 = doc["s_base_kva"] / 3.0
    nodes = {n["id"]: n for n in doc["nodes"]}
    keys = []
    for n in doc["nodes"]:
        for p in n["phases"]:
            keys.append((n["id"], p))
    idx = {k: i for i, k in enumerate(keys)}
    nk = len(keys)
    Y = np.zeros((nk, nk), dtype=complex)

    regs = {}
    for r in doc.get("regulators", []):
        ratio = {p: 1.0 + r.get("step_ratio", 0.00625) * t for p, t in r["taps"].items()}
        regs[(r["from"], r["to"])] = ratio

    sload = {k: 0j for k in keys}
    for n in doc["nodes"]:
        for p, kw in n.get("load_kw", {}).items():
            sload[(n["id"], p)] += kw
        for p, kv in n.get("load_kvar", {}).items():
            sload[(n["id"], p)] += 1j * kv

    for seg in doc["segments"]:
        a, b = seg["from"], seg["to"]
        pa, pb = nodes[a]["phases"], nodes[b]["phases"]
        if "transformer" in seg:
            t = seg["transformer"]
            phases = [p for p in PH if p in pa and p in pb]
            z = np.eye(len(phases), dtype=complex) * (
                complex(t["r_percent"], t["x_percent"]) / 100.0 * doc["s_base_kva"] / t["kva"])
        else:
            r = np.asarray(seg["r_ohm_per_mile"], float)
            x = np.asarray(seg["x_ohm_per_mile"], float)
            zfull = (r + 1j * x) * seg["length_miles"]
            phases = [p for i, p in enumerate(PH) if zfull[i, i] != 0]
            sel = [PH.index(p) for p in phases]
            kvll = nodes[a]["kv_base_ll"]
            zbase = (kvll / math.sqrt(3.0)) ** 2 * 1000.0 / s1
            z = zfull[np.ix_(sel, sel)] / zbase
        yz = np.linalg.inv(z)
        ratio = regs.get((a, b))
        A = np.diag([ratio[p] for p in phases]) if ratio else np.eye(len(phases))
        rows_f = [idx[(a, p)] for p in phases]
        rows_t = [idx[(b, p)] for p in phases]
        Y[np.ix_(rows_f, rows_f)] += A @ yz @ A
        Y[np.ix_(rows_f, rows_t)] -= A @ yz
        Y[np.ix_(rows_t, rows_f)] -= yz @ A
        Y[np.ix_(rows_t, rows_t)] += yz

        for p, kw in seg.get("distributed_load_kw", {}).items():
            sload[(a, p)] += kw / 2.0
            sload[(b, p)] += kw / 2.0
        for p, kv in seg.get("distributed_load_kvar", {}).items():
            sload[(a, p)] += 1j * kv / 2.0
            sload[(b, p)] += 1j * kv / 2.0

    s_spec = np.array([-sload[k] / s1 for k in keys])   # net injection, pu
    slack = [idx[(doc["source"]["node"], p)] for p in nodes[doc["source"]["node"]]["phases"]]
    return keys, idx, Y, slack, s_spec


ANG = {"a": 0.0, "b": -120.0, "c": 120.0}


def _newton(Y, V, free, s_spec, tol, it_max):
    """Damped Newton in rectangular coordinates; V updated in place."""
    def mismatch(v):
        return s_spec[free] - (v * np.conj(Y @ v))[free]

    for it in range(it_max):
        I = Y @ V
        mis = s_spec[free] - (V * np.conj(I))[free]
        err = np.max(np.abs(mis)) if free.size else 0.0
        if err < tol:
            return it
        Vf = V[free]
        If = I[free]
        Yff = Y[np.ix_(free, free)]
        # dS_i/de_k = delta_ik conj(I_i) + V_i conj(Y_ik); dS_i/df_k = j*delta_ik conj(I_i) - j V_i conj(Y_ik)
        A = np.diag(np.conj(If)) + Vf[:, None] * np.conj(Yff)
        B = 1j * np.diag(np.conj(If)) - 1j * (Vf[:, None] * np.conj(Yff))
        J = np.block([[A.real, B.real], [A.imag, B.imag]])
        rhs = np.concatenate([mis.real, mis.imag])
        step = np.linalg.solve(J, rhs)
        dv = step[: free.size] + 1j * step[free.size:]
        alpha = 1.0
        for _ in range(8):
            trial = V.copy()
            trial[free] += alpha * dv
            if np.max(np.abs(mismatch(trial))) < err:
                V[:] = trial
                break
            alpha /= 2.0
        else:
            return -1
    return -1


def _tree_start(doc, keys, idx, src_v, src_ang):
    """No-load voltage profile: walk the tree applying regulator ratios."""
    V = np.array([src_v * np.exp(1j * math.radians(ANG[p] + src_ang)) for _, p in keys])
    regs = {}
    for r in doc.get("regulators", []):
        regs[(r["from"], r["to"])] = {p: 1.0 + r.get("step_ratio", 0.00625) * t
                                      for p, t in r["taps"].items()}
    adj = {}
    for seg in doc["segments"]:
        adj.setdefault(seg["from"], []).append((seg["to"], (seg["from"], seg["to"])))
        adj.setdefault(seg["to"], []).append((seg["from"], (seg["from"], seg["to"])))
    scale = {doc["source"]["node"]: {p: 1.0 for p in PH}}
    stack = [doc["source"]["node"]]
    while stack:
        u = stack.pop()
        for v, fwd in adj.get(u, []):
            if v in scale:
                continue
            ratio = regs.get(fwd, {}) if fwd[0] == u else {}
            scale[v] = {p: scale[u][p] * ratio.get(p, 1.0) for p in PH}
            stack.append(v)
    for k, (node, p) in enumerate(keys):
        V[k] *= scale[node][p]
    return V


def newton_solve(doc, tol=1e-10, it_max=80):
    keys, idx, Y, slack, s_spec = build_ybus(doc)
    nk = len(keys)
    src_v = doc["source"].get("v_pu", 1.0)
    src_ang = doc["source"].get("angle_deg", 0.0)
    V = _tree_start(doc, keys, idx, src_v, src_ang)
    free = np.array([i for i in range(nk) if i not in set(slack)])

    # continuation on load level: warm-start each stage from the previous one
    total = 0
    for frac in (0.25, 0.5, 0.75, 1.0):
        it = _newton(Y, V, free, s_spec * frac, tol, it_max)
        if it < 0:
            raise RuntimeError(f"newton stalled at load fraction {frac}")
        total += it
    return keys, V, Y, total


def main():
    root = pathlib.Path(__file__).resolve().parents[1]
    feeder = pathlib.Path(sys.argv[1]) if len(sys.argv) > 1 else root / "src/voltvar/data/ieee34_base.json"
    out = pathlib.Path(sys.argv[2]) if len(sys.argv) > 2 else root / "tests/data/ieee34_base_solution.csv"
    with open(feeder) as fh:
        doc = json.load(fh)
    keys, V, Y, iters = newton_solve(doc)
    loss_pu = float(np.sum((V * np.conj(Y @ V)).real))
    loss_kw = loss_pu * doc["s_base_kva"] / 3.0
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "phase", "v_pu", "angle_deg"])
        for (node, ph), v in zip(keys, V):
            w.writerow([node, ph, f"{abs(v):.8f}", f"{math.degrees(np.angle(v)):.6f}"])
    with open(out.with_suffix(".json"), "w") as fh:
        json.dump({"loss_kw": round(loss_kw, 6), "newton_iterations": iters}, fh, indent=1)
    print(f"converged in {iters} iterations, loss {loss_kw:.3f} kW -> {out}")
    vm = np.abs(V)
    lo = min(zip(vm, keys))
    hi = max(zip(vm, keys))
    print(f"min |V| {lo[0]:.4f} at {lo[1]}, max |V| {hi[0]:.4f} at {hi[1]}")


if __name__ == "__main__":
    main()
