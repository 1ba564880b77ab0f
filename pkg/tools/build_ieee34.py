"""Generate the bundled IEEE 34-node feeder files from the published data.

Writes three variants into src/voltvar/data/:

- ieee34_base.json   the standard feeder (two line regulators at their
                     published tap positions, shunt capacitors folded into
                     the node loads as negative kvar); used to cross-check
                     the power-flow solver against an independent solution.
- ieee34_mod.json    study variant: substation LTC plus one line regulator,
                     capacitors removed, a 20-unit PV fleet sized from the
                     local load, and the remote 4.16 kV spot load halved so
                     the feeder stays regulable without the second regulator.
- ieee34_twovr.json  same network and PV fleet as the study variant but with
                     the two original line regulators instead of the LTC;
                     basis for the conventional local-control baseline.

All loads are modeled constant-PQ at nominal; distributed segment loads are
carried in the file and split 50/50 onto the end nodes at load time. Line
shunt capacitance is neglected throughout.

Run:  python tools/build_ieee34.py [outdir]
"""

import json
import pathlib
import sys

# --- overhead line configurations, ohm/mile, upper triangle (abc) ----------

CONFIGS = {
    "300": {
        "aa": (1.3368, 1.3343), "ab": (0.2101, 0.5779), "ac": (0.2130, 0.5015),
        "bb": (1.3238, 1.3569), "bc": (0.2066, 0.4591), "cc": (1.3294, 1.3471),
    },
    "301": {
        "aa": (1.9300, 1.4115), "ab": (0.2327, 0.6442), "ac": (0.2359, 0.5579),
        "bb": (1.9157, 1.4281), "bc": (0.2288, 0.5238), "cc": (1.9219, 1.4209),
    },
    "302": {"aa": (2.7995, 1.4855)},
    "303": {"bb": (2.7995, 1.4855)},
    "304": {"bb": (1.9217, 1.4212)},
}

# from, to, length_ft, config ("xfm" = in-line transformer)
SEGMENTS = [
    ("800", "802", 2580, "300"), ("802", "806", 1730, "300"),
    ("806", "808", 32230, "300"), ("808", "810", 5804, "303"),
    ("808", "812", 37500, "300"), ("812", "814", 29730, "300"),
    ("814", "850", 10, "301"), ("816", "818", 1710, "302"),
    ("816", "824", 10210, "301"), ("818", "820", 48150, "302"),
    ("820", "822", 13740, "302"), ("824", "826", 3030, "303"),
    ("824", "828", 840, "301"), ("828", "830", 20440, "301"),
    ("830", "854", 520, "301"), ("832", "858", 4900, "301"),
    ("832", "888", 0, "xfm"), ("834", "842", 280, "301"),
    ("834", "860", 2020, "301"), ("836", "840", 860, "301"),
    ("836", "862", 280, "301"), ("842", "844", 1350, "301"),
    ("844", "846", 3640, "301"), ("846", "848", 530, "301"),
    ("850", "816", 310, "301"), ("852", "832", 10, "301"),
    ("854", "852", 36830, "301"), ("854", "856", 23330, "303"),
    ("858", "834", 5830, "301"), ("858", "864", 1620, "302"),
    ("860", "836", 2680, "301"), ("862", "838", 4860, "304"),
    ("888", "890", 10560, "300"),
]

XFM = {"kva": 500.0, "r_percent": 1.9, "x_percent": 4.08}

PHASE_A_ONLY = {"818", "820", "822", "864"}
PHASE_B_ONLY = {"810", "826", "838", "856"}
LOW_KV = {"888", "890"}          # below the in-line transformer

# node -> phase -> (kW, kvar); connection/model collapsed to constant PQ
SPOT_LOADS = {
    "830": {"a": (10, 5), "b": (10, 5), "c": (25, 10)},
    "840": {"a": (9, 7), "b": (9, 7), "c": (9, 7)},
    "844": {"a": (135, 105), "b": (135, 105), "c": (135, 105)},
    "848": {"a": (20, 16), "b": (20, 16), "c": (20, 16)},
    "860": {"a": (20, 16), "b": (20, 16), "c": (20, 16)},
    "890": {"a": (150, 75), "b": (150, 75), "c": (150, 75)},
}

# (from, to) -> phase -> (kW, kvar), carried on the segment
DISTRIBUTED_LOADS = {
    ("802", "806"): {"b": (30, 15), "c": (25, 14)},
    ("808", "810"): {"b": (16, 8)},
    ("818", "820"): {"a": (34, 17)},
    ("820", "822"): {"a": (135, 70)},
    ("816", "824"): {"b": (5, 2)},
    ("824", "826"): {"b": (40, 20)},
    ("824", "828"): {"c": (4, 2)},
    ("828", "830"): {"a": (7, 3)},
    ("854", "856"): {"b": (4, 2)},
    ("832", "858"): {"a": (7, 3), "b": (2, 1), "c": (6, 3)},
    ("858", "864"): {"a": (2, 1)},
    ("858", "834"): {"a": (4, 2), "b": (15, 8), "c": (13, 7)},
    ("834", "860"): {"a": (16, 8), "b": (20, 10), "c": (110, 55)},
    ("860", "836"): {"a": (30, 15), "b": (10, 6), "c": (42, 22)},
    ("836", "840"): {"a": (18, 9), "b": (22, 11)},
    ("862", "838"): {"b": (28, 14)},
    ("842", "844"): {"a": (9, 5)},
    ("844", "846"): {"b": (25, 12), "c": (20, 11)},
    ("846", "848"): {"b": (23, 11)},
}

# shunt capacitor banks, kvar per phase (base variant only)
CAPACITORS = {"844": 100.0, "848": 150.0}

# 20 inverter-coupled PV units: node, phase, peak kW. One per loaded node,
# on its most loaded phase, sized to that phase's nominal demand.
PV_FLEET = [
    ("806", "b", 30), ("810", "b", 16), ("820", "a", 34), ("822", "a", 135),
    ("824", "b", 5), ("826", "b", 40), ("828", "c", 4), ("830", "c", 25),
    ("834", "b", 15), ("836", "c", 42), ("838", "b", 28), ("840", "b", 31),
    ("844", "a", 144), ("846", "b", 25), ("848", "b", 43), ("856", "b", 4),
    ("858", "a", 7), ("860", "c", 130), ("864", "a", 2), ("890", "a", 150),
]

S_BASE_KVA = 2500.0
KV_PRIMARY = 24.9
KV_SECONDARY = 4.16


def node_phases(node: str) -> str:
    if node in PHASE_A_ONLY:
        return "a"
    if node in PHASE_B_ONLY:
        return "b"
    return "abc"


def config_matrices(cfg: str):
    r = [[0.0] * 3 for _ in range(3)]
    x = [[0.0] * 3 for _ in range(3)]
    idx = {"a": 0, "b": 1, "c": 2}
    for pair, (rr, xx) in CONFIGS[cfg].items():
        i, j = idx[pair[0]], idx[pair[1]]
        r[i][j] = r[j][i] = rr
        x[i][j] = x[j][i] = xx
    return r, x


def build(variant: str) -> dict:
    nodes = sorted({s[0] for s in SEGMENTS} | {s[1] for s in SEGMENTS})
    doc = {
        "name": f"ieee34-{variant}",
        "s_base_kva": S_BASE_KVA,
        "source": {"node": "800", "v_pu": 1.05, "angle_deg": 0.0},
        "voltage_limits": {"v_min": 0.95, "v_max": 1.05},
        "nodes": [],
        "segments": [],
        "regulators": [],
        "pv_units": [],
    }

    for n in nodes:
        entry = {"id": n, "phases": node_phases(n),
                 "kv_base_ll": KV_SECONDARY if n in LOW_KV else KV_PRIMARY}
        kw, kvar = {}, {}
        for p, (pkw, pkv) in SPOT_LOADS.get(n, {}).items():
            if variant != "base" and n == "890":
                pkw, pkv = pkw / 2.0, pkv / 2.0
            kw[p], kvar[p] = float(pkw), float(pkv)
        if variant == "base" and n in CAPACITORS:
            for p in node_phases(n):
                kvar[p] = kvar.get(p, 0.0) - CAPACITORS[n]
        if kw:
            entry["load_kw"] = kw
        if kvar:
            entry["load_kvar"] = kvar
        doc["nodes"].append(entry)

    for frm, to, feet, cfg in SEGMENTS:
        entry = {"from": frm, "to": to}
        if cfg == "xfm":
            entry["transformer"] = dict(XFM)
        else:
            r, x = config_matrices(cfg)
            entry["length_miles"] = feet / 5280.0
            entry["r_ohm_per_mile"] = r
            entry["x_ohm_per_mile"] = x
        dist = DISTRIBUTED_LOADS.get((frm, to))
        if dist:
            entry["distributed_load_kw"] = {p: float(v[0]) for p, v in dist.items()}
            entry["distributed_load_kvar"] = {p: float(v[1]) for p, v in dist.items()}
        doc["segments"].append(entry)

    if variant == "base":
        doc["regulators"] = [
            {"id": "reg1", "from": "814", "to": "850", "kind": "vr",
             "taps": {"a": 12, "b": 5, "c": 5}},
            {"id": "reg2", "from": "852", "to": "832", "kind": "vr",
             "taps": {"a": 13, "b": 11, "c": 12}},
        ]
    elif variant == "mod":
        # start positions chosen to be feasible at the bundled profile's
        # first step (light load, no sun) so day runs open inside the band
        doc["regulators"] = [
            {"id": "ltc1", "from": "800", "to": "802", "kind": "ltc",
             "taps": {"a": 0, "b": 0, "c": 0}},
            {"id": "vr1", "from": "814", "to": "850", "kind": "vr",
             "taps": {"a": 3, "b": 3, "c": 3}},
        ]
    else:
        doc["regulators"] = [
            {"id": "vr1", "from": "814", "to": "850", "kind": "vr",
             "taps": {"a": 3, "b": 3, "c": 3}},
            {"id": "vr2", "from": "852", "to": "832", "kind": "vr",
             "taps": {"a": 0, "b": 0, "c": 0}},
        ]

    if variant != "base":
        for node, phase, pmax in PV_FLEET:
            doc["pv_units"].append({
                "id": f"pv_{node}", "node": node, "phase": phase,
                "p_max_kw": float(pmax), "s_rating_kva": 1.25 * float(pmax)})
    return doc


def main():
    outdir = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else
                          pathlib.Path(__file__).resolve().parents[1] / "src" / "voltvar" / "data")
    outdir.mkdir(parents=True, exist_ok=True)
    for variant in ("base", "mod", "twovr"):
        path = outdir / f"ieee34_{variant}.json"
        with open(path, "w") as fh:
            json.dump(build(variant), fh, indent=1)
        print("wrote", path)


if __name__ == "__main__":
    main()
