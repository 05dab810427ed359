import json

import numpy as np
import pytest

from asalvc.cases import make_synthetic_feeder, random_case
from asalvc.network import (
    CaseError,
    build_topology,
    case_from_dict,
    case_to_dict,
    incidence,
    load_case,
    save_case,
    simple_case,
)


def _doc(lines, buses=None, **kw):
    ids = sorted({ln["to"] for ln in lines})
    buses = buses or [{"id": i, "p_load_kw": 0.0, "q_load_kvar": 0.0} for i in ids]
    return {"base_kv": 4.16, "base_kva": 100.0, "slack_voltage": 1.0, "buses": buses, "lines": lines, **kw}


def test_load_single_line(tmp_path):
    p = tmp_path / "one.json"
    p.write_text(json.dumps(_doc([{"from": "0", "to": "1", "r_pu": 0.01, "x_pu": 0.02}])))
    case = load_case(p)
    assert case.n_bus == 1
    assert case.lines == [(0, 1, 0.01, 0.02)]
    assert case.slack_voltage == 1.0


def test_two_lines_into_bus_not_radial():
    lines = [{"from": "0", "to": "1", "r_pu": 0.01, "x_pu": 0.02},
             {"from": "2", "to": "1", "r_pu": 0.01, "x_pu": 0.02}]
    buses = [{"id": "1"}, {"id": "2"}]
    with pytest.raises(CaseError, match="not radial"):
        case_from_dict(_doc(lines, buses))


def test_zero_reactance_rejected():
    with pytest.raises(CaseError, match="nonpositive reactance"):
        case_from_dict(_doc([{"from": "0", "to": "1", "r_pu": 0.01, "x_pu": 0.0}]))


def test_mixed_units_rejected():
    lines = [{"from": "0", "to": "1", "r_ohm": 1.0, "x_ohm": 2.0},
             {"from": "1", "to": "2", "r_pu": 0.01, "x_pu": 0.02}]
    with pytest.raises(CaseError, match="mixed"):
        case_from_dict(_doc(lines))


def test_cycle_is_rejected():
    lines = [{"from": "2", "to": "1", "r_pu": 0.01, "x_pu": 0.02},
             {"from": "1", "to": "2", "r_pu": 0.01, "x_pu": 0.02}]
    with pytest.raises(CaseError, match="cycle|unreachable"):
        case_from_dict(_doc(lines))


def test_parse_failure(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(CaseError, match="parse"):
        load_case(p)


def test_ohm_conversion_and_loads():
    doc = _doc([{"from": "0", "to": "7", "r_ohm": 1.7306, "x_ohm": 3.4611}],
               buses=[{"id": "7", "p_load_kw": 1.0, "q_load_kvar": 0.5,
                       "der": {"capacity_kva": 50.0}}])
    case = case_from_dict(doc)
    z = 4.16**2 * 1000 / 100
    assert case.r[0] == pytest.approx(1.7306 / z)
    assert case.labels == ("0", "7")
    np.testing.assert_allclose([case.p_load[0], case.q_load[0]], [-0.01, -0.005])
    lo, hi = case.var_limits(p_der=[0.3])
    np.testing.assert_allclose([lo[0], hi[0]], [-0.4, 0.4])


def test_topology_chain():
    case = simple_case([0, 1], [0.01] * 2, [0.01] * 2)
    topo = build_topology(case)
    assert topo.parent[1:] == (0, 1)
    assert topo.descendants[1] == {2}
    assert topo.descendants[2] == frozenset()


def test_topology_star():
    topo = build_topology(simple_case([0, 0], [0.01] * 2, [0.01] * 2))
    assert topo.descendants[1] == frozenset() and topo.descendants[2] == frozenset()


def test_topological_order_chain():
    topo = build_topology(simple_case([0, 1, 2], [0.01] * 3, [0.01] * 3))
    assert topo.order == (1, 2, 3)


def test_incidence_single_line():
    case = simple_case([0], [0.01], [0.02])
    inc = incidence(case, build_topology(case))
    np.testing.assert_array_equal(inc.m0, [1.0])
    np.testing.assert_array_equal(inc.M, [[-1.0]])


def test_incidence_chain():
    case = simple_case([0, 1], [0.01] * 2, [0.01] * 2)
    inc = incidence(case, build_topology(case))
    # line l1 = (0,1), line l2 = (1,2): +1 at sender, -1 at receiver
    np.testing.assert_array_equal(inc.M, [[-1.0, 1.0], [0.0, -1.0]])


def test_incidence_star():
    case = simple_case([0, 0], [0.01] * 2, [0.01] * 2)
    inc = incidence(case, build_topology(case))
    np.testing.assert_array_equal(inc.M, -np.eye(2))


def test_incidence_invariants_random(rng):
    for _ in range(20):
        case = random_case(rng)
        topo = build_topology(case)
        inc = incidence(case, topo)
        assert np.all(inc.full.sum(axis=0) == 0)
        pos = {j: i for i, j in enumerate(topo.order)}
        assert all(pos[topo.parent[j]] < pos[j] for j in topo.order if topo.parent[j] != 0)
        b = rng.standard_normal(case.n_bus)
        np.testing.assert_allclose(inc.M @ inc.solve(b), b, atol=1e-12)
        np.testing.assert_allclose(inc.M.T @ inc.solve_t(b), b, atol=1e-12)


def test_round_trip(tmp_path):
    case = make_synthetic_feeder(n_bus=30, seed=3, der_capacity_kva=50.0)
    path = tmp_path / "c.json"
    save_case(case, path)
    back = load_case(path)
    for attr in ("r", "x", "p_load", "q_load", "der_capacity", "q_min", "q_max"):
        np.testing.assert_array_equal(getattr(back, attr), getattr(case, attr))
    assert back.parent == case.parent and back.labels == case.labels
    assert back.fixed_limits == case.fixed_limits
    assert case_to_dict(back) == {**case_to_dict(case), "name": back.name}


def test_synthetic_static_loads():
    case = make_synthetic_feeder()
    assert case.n_bus == 123
    np.testing.assert_allclose(case.p_load, -0.01)
    np.testing.assert_allclose(case.q_load, -0.005)
    lo, hi = case.var_limits()
    np.testing.assert_allclose(hi, 0.1)
    np.testing.assert_allclose(lo, -0.1)
