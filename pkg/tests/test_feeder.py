import json
import math

import numpy as np
import pytest

from voltvar import feeder as fd
from voltvar.feeder import (FeederError, ValidationError, apply_operating_point,
                            feeder_from_dict, feeder_to_dict, load_profile,
                            pv_q_limit, save_profile)

from _builders import two_bus


def minimal_doc():
    return {
        "name": "t",
        "s_base_kva": 2500.0,
        "source": {"node": "a", "v_pu": 1.0},
        "nodes": [
            {"id": "a", "phases": "abc", "kv_base_ll": 12.47},
            {"id": "b", "phases": "abc", "kv_base_ll": 12.47,
             "load_kw": {"a": 10.0}, "load_kvar": {"a": 5.0}},
        ],
        "segments": [
            {"from": "a", "to": "b", "length_miles": 1.0,
             "r_ohm_per_mile": np.eye(3).tolist(),
             "x_ohm_per_mile": (2 * np.eye(3)).tolist()},
        ],
    }


def test_minimal_feeder_loads():
    f = feeder_from_dict(minimal_doc())
    assert f.bfs_order == ["a", "b"]
    assert f.node_by_id["b"].load["a"] == 10 + 5j
    assert f.parent["b"][0] == "a"


def test_cycle_detected():
    doc = minimal_doc()
    doc["nodes"].append({"id": "c", "phases": "abc", "kv_base_ll": 12.47})
    seg = dict(doc["segments"][0])
    doc["segments"].append({**seg, "from": "b", "to": "c"})
    doc["segments"].append({**seg, "from": "c", "to": "a"})
    with pytest.raises(ValidationError, match="cycle"):
        feeder_from_dict(doc)


def test_unknown_node_named():
    doc = minimal_doc()
    doc["segments"][0]["to"] = "zz"
    with pytest.raises(ValidationError, match="zz"):
        feeder_from_dict(doc)


def test_load_on_absent_phase_rejected():
    doc = minimal_doc()
    doc["nodes"][1]["phases"] = "a"
    doc["nodes"][1]["load_kw"] = {"b": 5.0}
    with pytest.raises(ValidationError, match="absent phase"):
        feeder_from_dict(doc)


def test_unfed_phase_rejected():
    doc = minimal_doc()
    # segment only carries phase a, but node b declares abc
    doc["segments"][0]["r_ohm_per_mile"] = [[1.0, 0, 0], [0, 0, 0], [0, 0, 0]]
    doc["segments"][0]["x_ohm_per_mile"] = [[2.0, 0, 0], [0, 0, 0], [0, 0, 0]]
    doc["nodes"][1]["load_kw"] = {"a": 10.0}
    doc["nodes"][1]["load_kvar"] = {"a": 5.0}
    with pytest.raises(ValidationError, match="not fed"):
        feeder_from_dict(doc)


def test_duplicate_node_rejected():
    doc = minimal_doc()
    doc["nodes"].append(dict(doc["nodes"][0]))
    with pytest.raises(ValidationError, match="duplicate node"):
        feeder_from_dict(doc)


def test_tap_range_and_ltc_gang_enforced():
    doc = minimal_doc()
    doc["regulators"] = [{"id": "r", "from": "a", "to": "b", "kind": "vr",
                          "taps": {"a": 20, "b": 0, "c": 0}}]
    with pytest.raises(ValidationError, match="tap outside"):
        feeder_from_dict(doc)
    doc["regulators"] = [{"id": "r", "from": "a", "to": "b", "kind": "ltc",
                          "taps": {"a": 1, "b": 2, "c": 1}}]
    with pytest.raises(ValidationError, match="LTC taps"):
        feeder_from_dict(doc)


def test_pv_rating_rule_enforced():
    doc = minimal_doc()
    doc["pv_units"] = [{"id": "p", "node": "b", "phase": "a",
                        "p_max_kw": 100.0, "s_rating_kva": 110.0}]
    with pytest.raises(ValidationError, match="1.25"):
        feeder_from_dict(doc)
    doc["pv_units"][0]["s_rating_kva"] = 125.0
    f = feeder_from_dict(doc)
    assert f.pv_units[0].s_rating == 125.0


def test_distributed_load_split_half_each_end():
    doc = minimal_doc()
    doc["segments"][0]["distributed_load_kw"] = {"b": 40.0}
    doc["segments"][0]["distributed_load_kvar"] = {"b": 20.0}
    f = feeder_from_dict(doc)
    assert f.node_by_id["a"].load["b"] == 20 + 10j
    assert f.node_by_id["b"].load["b"] == 20 + 10j


def test_roundtrip_preserves_model(base_feeder):
    doc = feeder_to_dict(base_feeder)
    again = feeder_from_dict(json.loads(json.dumps(doc)))
    assert [n.id for n in again.nodes] == [n.id for n in base_feeder.nodes]
    for n1, n2 in zip(base_feeder.nodes, again.nodes):
        assert n1.phases == n2.phases
        for p in n1.load:
            # loads were already split once; round trip must not re-split
            assert n2.load[p] == pytest.approx(n1.load[p])
    for s1, s2 in zip(base_feeder.segments, again.segments):
        assert s1.key == s2.key
        if s1.transformer is None:
            assert np.allclose(s1.z_per_mile, s2.z_per_mile)
    assert [(r.id, r.taps.tolist()) for r in again.regulators] == \
        [(r.id, r.taps.tolist()) for r in base_feeder.regulators]


def test_committee_totals(base_feeder, mod_feeder):
    tot = sum(s for n in base_feeder.nodes for s in n.load.values())
    assert tot.real == pytest.approx(1769.0)
    assert tot.imag == pytest.approx(1044.0 - 750.0)     # capacitors fold in
    tot = sum(s for n in mod_feeder.nodes for s in n.load.values())
    assert tot.real == pytest.approx(1769.0 - 225.0)     # remote spot load halved
    assert tot.imag == pytest.approx(1044.0 - 112.5)
    assert len(mod_feeder.pv_units) == 20
    assert sum(pv.p_max for pv in mod_feeder.pv_units) == pytest.approx(910.0)


def test_operating_point_scaling_and_capacity(mod_feeder):
    op = apply_operating_point(mod_feeder, 0.5, 0.6)
    some = next(iter(op.load))
    assert op.load[some] == pytest.approx(mod_feeder.node_by_id[some[0]].load[some[1]] * 0.5)
    for pv, p, qm in zip(mod_feeder.pv_units, op.pv_p, op.q_max):
        assert p == pytest.approx(0.6 * pv.p_max)
        assert p * p + qm * qm == pytest.approx(pv.s_rating ** 2)


def test_negative_scale_clamped_with_warning(mod_feeder, caplog):
    import logging

    with caplog.at_level(logging.WARNING, logger="voltvar.feeder"):
        op = apply_operating_point(mod_feeder, -0.2, -1.0)
    assert op.load_scale == 0.0 and op.pv_scale == 0.0
    assert any("clamped" in r.message for r in caplog.records)


def test_with_q_and_with_taps_clip(mod_feeder):
    op = apply_operating_point(mod_feeder, 0.5, 1.0)
    q = np.full(len(mod_feeder.pv_units), 1e6)
    op2 = op.with_q(q)
    assert np.all(op2.pv_q == op.q_max)
    op3 = op.with_taps({"vr1": np.array([99, -99, 0])})
    assert op3.taps["vr1"].tolist() == [16, -16, 0]
    # the original is untouched
    assert op.taps["vr1"].tolist() == [3, 3, 3]


def test_pv_q_limit_quadrature():
    assert pv_q_limit(125.0, 100.0) == pytest.approx(75.0)
    assert pv_q_limit(125.0, 0.0) == pytest.approx(125.0)
    with pytest.raises(ValueError):
        pv_q_limit(100.0, 101.0)


def test_profile_roundtrip(tmp_path):
    rows = [(0.0, 0.4, 0.0), (65.0, 0.5, 0.1)]
    path = tmp_path / "p.csv"
    save_profile(rows, path)
    again = load_profile(path)
    assert again == [(0.0, 0.4, 0.0), (65.0, 0.5, 0.1)]
    bad = tmp_path / "bad.csv"
    bad.write_text("time,load_scale\n00:00,1.0\n")
    with pytest.raises(FeederError, match="pv_scale"):
        load_profile(bad)


def test_two_bus_builder_structure():
    f = two_bus()
    assert [n.id for n in f.nodes] == ["s", "l"]
    assert f.segments[0].phases == "a"
