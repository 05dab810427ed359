import csv

import numpy as np
import pytest

from asalvc.cases import random_case
from asalvc.controllers import (
    AsalvcBusState,
    ControllerBank,
    ControllerConfig,
    DroopState,
    Kind,
    VarLimits,
    asalvc_equivalence_trace,
    asalvc_offline_step,
    asalvc_online_step,
    cdc_step,
    ddc_step,
    default_config,
    gpdc_step,
    sgpdc_step,
    write_state_csv,
)
from asalvc.synthesis import PhiModel

BOX = VarLimits(-0.1, 0.1)


def test_cdc_desk():
    assert cdc_step(DroopState(), 0.991, ControllerConfig(Kind.CDC, a=1.0), BOX) == pytest.approx(0.009)


def test_cdc_dead_band():
    cfg = ControllerConfig(Kind.CDC, a=1.0, dead_band=0.01)
    assert cdc_step(DroopState(), 0.991, cfg, BOX) == 0.0


def test_ddc_desk():
    assert ddc_step(DroopState(0.0), 0.991, ControllerConfig(Kind.DDC, a=1.0, alpha=0.1), BOX) == pytest.approx(0.0009)


def test_ddc_respects_shrinking_limits():
    q = ddc_step(DroopState(0.1), 0.9, ControllerConfig(Kind.DDC, a=1.0, alpha=0.1), VarLimits(-0.05, 0.05))
    assert q == 0.05


def test_gpdc_desk():
    assert gpdc_step(DroopState(0.0), 0.991, ControllerConfig(Kind.GPDC, a=1.0), BOX) == pytest.approx(0.009)


def test_sgpdc_equals_asalvc_without_momentum(rng):
    L = rng.uniform(0.01, 0.1, 5)
    V = rng.uniform(0.97, 1.03, 5)
    q_prev = rng.uniform(-0.05, 0.05, 5)
    lim = VarLimits(-0.1 * np.ones(5), 0.1 * np.ones(5))
    sg = sgpdc_step(DroopState(q_prev.copy()), V, ControllerConfig(Kind.SGPDC, a=1.0, d=1.0 / L), lim)
    st = AsalvcBusState(q_prev=q_prev.copy(), q_prev2=np.zeros(5), v_prev2=np.ones(5))
    # step 0 forces gamma = 1, mu = 0
    asl = asalvc_offline_step(st, V, ControllerConfig(Kind.ASALVC, L=L), lim)
    np.testing.assert_allclose(sg, asl, rtol=0, atol=1e-15)


def test_asalvc_desk_sequence():
    cfg = ControllerConfig(Kind.ASALVC, L=0.02)
    lim = VarLimits(-1.0, 1.0)
    st = AsalvcBusState.initial()
    q1 = asalvc_offline_step(st, 0.991, cfg, lim)
    assert st.a == pytest.approx(50.0) and st.b == 0.0 and q1 == pytest.approx(0.45)
    q2 = asalvc_offline_step(st, 1.0, cfg, lim)
    assert st.mu == 0.0 and st.b == pytest.approx(0.45) and q2 == pytest.approx(0.45)
    asalvc_offline_step(st, 1.0, cfg, lim)
    assert st.mu == pytest.approx(0.28175, abs=1e-5)
    assert st.a == pytest.approx(64.0875, abs=1e-3)


def test_online_reset_period():
    cfg = ControllerConfig(Kind.ASALVC, L=0.02, T_gamma=3)
    st = AsalvcBusState.initial()
    mus = []
    for _ in range(7):
        asalvc_online_step(st, 1.0, 0.0, cfg, capacity=1.0)
        mus.append(st.mu)
    # restarts on updates 3 and 6
    assert mus[2] == 0.0 and mus[5] == 0.0
    assert mus[3] == 0.0 and mus[4] > 0.0 and mus[6] == 0.0
    assert mus[1] == 0.0


def test_online_capacity_limit():
    cfg = ControllerConfig(Kind.ASALVC, L=0.001)
    st = AsalvcBusState.initial()
    q = asalvc_online_step(st, 0.9, 0.3, cfg, capacity=0.5)
    assert q == pytest.approx(0.4)
    lim = VarLimits.from_capacity(0.5, 0.3)
    assert lim.q_max == pytest.approx(0.4) and lim.q_min == pytest.approx(-0.4)
    assert VarLimits.from_capacity(0.5, 0.5).q_max == 0.0
    with pytest.raises(ValueError):
        asalvc_online_step(st, 0.9, 0.3, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        ControllerConfig(Kind.CDC, a=-1.0)
    with pytest.raises(ValueError):
        ControllerConfig(Kind.DDC, alpha=1.0)
    with pytest.raises(ValueError):
        ControllerConfig(Kind.SGPDC)
    with pytest.raises(ValueError):
        ControllerConfig(Kind.ASALVC)
    with pytest.raises(ValueError):
        ControllerConfig(Kind.ASALVC, L=1.0, T_gamma=0)
    with pytest.raises(ValueError):
        ControllerConfig.from_dict({"kind": "cdc", "slope": 1})
    with pytest.raises(ValueError):
        VarLimits(1.0, 0.0)


def test_config_round_trip():
    cfg = ControllerConfig(Kind.ASALVC, L=[0.1, 0.2], T_gamma=4)
    back = ControllerConfig.from_dict(cfg.to_dict())
    assert back.kind is Kind.ASALVC and back.T_gamma == 4
    np.testing.assert_array_equal(back.L, [0.1, 0.2])
    assert cfg.bus(1).L == 0.2


def test_bank_is_local(rng):
    # output at bus i must not change when other buses' measurements change
    n = 6
    for kind in Kind:
        cfg = default_config(kind, A=np.eye(n) * 0.02, L=np.full(n, 0.05))
        lim = VarLimits(-0.1 * np.ones(n), 0.1 * np.ones(n))
        V1 = rng.uniform(0.95, 1.05, (3, n))
        V2 = V1.copy()
        V2[:, 1:] = rng.uniform(0.95, 1.05, (3, n - 1))
        b1, b2 = ControllerBank(cfg, n), ControllerBank(cfg, n)
        for t in range(3):
            assert b1.step(V1[t], lim)[0] == b2.step(V2[t], lim)[0]


def test_bank_matches_scalar_agents(rng):
    n = 4
    L = rng.uniform(0.01, 0.05, n)
    cfg = ControllerConfig(Kind.ASALVC, L=L)
    lim = VarLimits(-0.1 * np.ones(n), 0.1 * np.ones(n))
    bank = ControllerBank(cfg, n)
    agents = [AsalvcBusState.initial() for _ in range(n)]
    for _ in range(5):
        V = rng.uniform(0.97, 1.03, n)
        qb = bank.step(V, lim)
        qs = [asalvc_offline_step(agents[i], V[i], cfg.bus(i), lim.bus(i)) for i in range(n)]
        np.testing.assert_array_equal(qb, qs)


def test_equivalence_20_bus(rng):
    case = random_case(rng, n_bus=20)
    central, local = asalvc_equivalence_trace(case, steps=50)
    assert np.max(np.abs(central - local)) <= 1e-12


def test_equivalence_breaks_with_wrong_weight(rng):
    case = random_case(rng, n_bus=20)
    central, local = asalvc_equivalence_trace(case, steps=50, phi=PhiModel.from_matrix(np.eye(20)))
    assert np.max(np.abs(central - local)) > 1e-6


def test_default_config_sgpdc():
    A = np.array([[0.01, 0.01], [0.01, 0.02]])
    cfg = default_config("sgpdc", A=A)
    np.testing.assert_allclose(cfg.d, [100.0, 50.0])
    assert cfg.a == 0.01
    with pytest.raises(ValueError):
        default_config("sgpdc")
    with pytest.raises(ValueError):
        default_config("asalvc")


def test_state_csv(tmp_path):
    st = AsalvcBusState.initial(1.0, 2)
    asalvc_offline_step(st, np.array([0.99, 1.01]), ControllerConfig(Kind.ASALVC, L=[0.02, 0.03]),
                        VarLimits(-np.ones(2), np.ones(2)))
    write_state_csv(tmp_path / "s.csv", st, ["1", "2"])
    rows = list(csv.reader((tmp_path / "s.csv").open()))
    assert rows[0] == ["bus", "q_prev", "q_prev2", "v_prev2", "a", "b", "gamma", "mu", "step"]
    assert float(rows[1][1]) == pytest.approx(0.5)
