"""Small feeders with known answers, used across the test modules."""

import math

import numpy as np

from voltvar.feeder import feeder_from_dict

S_BASE = 2500.0
KV = 12.47


def z_base_ohm(kv_ll: float = KV, s_base: float = S_BASE) -> float:
    return (kv_ll / math.sqrt(3.0)) ** 2 * 1000.0 / (s_base / 3.0)


def two_bus(r_pu: float = 0.03, x_pu: float = 0.06, p_kw: float = 300.0,
            q_kvar: float = 150.0, v_src: float = 1.0, pv: bool = False,
            pv_p_max: float = 100.0):
    """Single-phase two-node feeder; exact solution via the quadratic below."""
    zb = z_base_ohm()
    doc = {
        "name": "two-bus",
        "s_base_kva": S_BASE,
        "source": {"node": "s", "v_pu": v_src},
        "nodes": [
            {"id": "s", "phases": "a", "kv_base_ll": KV},
            {"id": "l", "phases": "a", "kv_base_ll": KV,
             "load_kw": {"a": p_kw}, "load_kvar": {"a": q_kvar}},
        ],
        "segments": [
            {"from": "s", "to": "l", "length_miles": 1.0,
             "r_ohm_per_mile": [[r_pu * zb, 0, 0], [0, 0, 0], [0, 0, 0]],
             "x_ohm_per_mile": [[x_pu * zb, 0, 0], [0, 0, 0], [0, 0, 0]]},
        ],
    }
    if pv:
        doc["pv_units"] = [{"id": "pv_l", "node": "l", "phase": "a",
                            "p_max_kw": pv_p_max}]
    return feeder_from_dict(doc)


def two_bus_exact(r_pu, x_pu, p_kw, q_kvar, v_src=1.0, s1=S_BASE / 3.0):
    """Receiving-end voltage, angle and loss of the two-bus case, closed form.

    With S drawn at the receiving end, V1 conj(V2) = |V2|^2 + Z conj(S) gives
    y^2 + y (2(rp + xq) - |V1|^2) + (r^2 + x^2)(p^2 + q^2) = 0,  y = |V2|^2.
    """
    p, q = p_kw / s1, q_kvar / s1
    alpha = r_pu * p + x_pu * q
    beta = x_pu * p - r_pu * q
    b = 2.0 * alpha - v_src ** 2
    disc = b * b - 4.0 * (r_pu ** 2 + x_pu ** 2) * (p ** 2 + q ** 2)
    if disc < 0:
        raise ValueError("no power-flow solution for these parameters")
    y = (-b + math.sqrt(disc)) / 2.0
    v2 = math.sqrt(y)
    angle = -math.atan2(beta, y + alpha)
    loss_kw = (p ** 2 + q ** 2) / y * r_pu * s1
    return v2, angle, loss_kw


# base 3x3 ohm/mile matrices to scale when generating random networks
_Z3 = (np.array([[1.3368, 0.2101, 0.2130],
                 [0.2101, 1.3238, 0.2066],
                 [0.2130, 0.2066, 1.3294]])
       + 1j * np.array([[1.3343, 0.5779, 0.5015],
                        [0.5779, 1.3569, 0.4591],
                        [0.5015, 0.4591, 1.3471]]))


def random_feeder(rng: np.random.Generator, n_nodes: int = 8, regulators: int = 1,
                  pv_count: int = 3, v_src: float = 1.02):
    """Random radial three-phase feeder with optional regulators and PV.

    Loads and impedances are drawn so that the sweep stays well-conditioned;
    nothing here is tuned to any particular answer.
    """
    names = [f"n{k}" for k in range(n_nodes)]
    doc = {
        "name": "random",
        "s_base_kva": S_BASE,
        "source": {"node": "n0", "v_pu": v_src},
        "nodes": [{"id": nm, "phases": "abc", "kv_base_ll": KV} for nm in names],
        "segments": [],
        "regulators": [],
        "pv_units": [],
    }
    for k in range(1, n_nodes):
        parent = names[rng.integers(0, k)]
        scale = rng.uniform(0.5, 1.5)
        z = _Z3 * scale
        doc["segments"].append({
            "from": parent, "to": names[k],
            "length_miles": float(rng.uniform(0.3, 2.0)),
            "r_ohm_per_mile": np.real(z).tolist(),
            "x_ohm_per_mile": np.imag(z).tolist(),
        })
        if rng.random() < 0.8:
            kw = rng.uniform(5.0, 120.0, size=3)
            doc["nodes"][k]["load_kw"] = {p: float(v) for p, v in zip("abc", kw)}
            doc["nodes"][k]["load_kvar"] = {p: float(v * rng.uniform(0.3, 0.6))
                                            for p, v in zip("abc", kw)}
    seg_ids = rng.choice(len(doc["segments"]), size=min(regulators, len(doc["segments"])),
                         replace=False)
    for j, si in enumerate(sorted(seg_ids.tolist())):
        seg = doc["segments"][si]
        kind = "ltc" if j == 0 and rng.random() < 0.5 else "vr"
        taps = int(rng.integers(-4, 5)) if kind == "ltc" else rng.integers(-4, 5, size=3)
        doc["regulators"].append({
            "id": f"reg{j}", "from": seg["from"], "to": seg["to"], "kind": kind,
            "taps": {p: int(t) for p, t in zip("abc", np.broadcast_to(taps, 3))}})
    loaded = [n["id"] for n in doc["nodes"] if "load_kw" in n]
    rng.shuffle(loaded)
    for j, nm in enumerate(loaded[:pv_count]):
        doc["pv_units"].append({
            "id": f"pv{j}", "node": nm, "phase": "abc"[rng.integers(0, 3)],
            "p_max_kw": float(rng.uniform(20.0, 150.0))})
    return feeder_from_dict(doc)
