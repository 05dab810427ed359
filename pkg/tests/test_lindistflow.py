import numpy as np
import pytest

from asalvc.cases import random_case
from asalvc.lindistflow import (
    ExogenousState,
    grad_f,
    objective_f,
    path_overlap_matrix,
    v_linear,
    v_par,
)
from asalvc.network import simple_case
from asalvc.synthesis import PhiModel, phi_from_A

from conftest import prepared


def test_single_line_model(single_line):
    _, _, m = prepared(single_line)
    np.testing.assert_allclose(m.A, [[0.02]])
    np.testing.assert_allclose(m.R_s, [[0.01]])
    np.testing.assert_allclose(m.base_term, [1.0])


def test_chain_A(chain):
    _, _, m = prepared(chain)
    np.testing.assert_allclose(m.A, [[0.01, 0.01], [0.01, 0.02]], atol=1e-15)


def test_A_matches_path_overlap(rng):
    for _ in range(20):
        case = random_case(rng)
        topo, _, m = prepared(case)
        np.testing.assert_allclose(m.A, path_overlap_matrix(case, topo), atol=1e-10, rtol=0)
        assert np.max(np.abs(m.A - m.A.T)) <= 1e-12 * np.abs(m.A).max()
        assert np.linalg.eigvalsh(m.A)[0] > 0


def test_v_par_single_line(single_line):
    _, _, m = prepared(single_line)
    d = ExogenousState(p=[-0.5], q_c=[0.2])
    np.testing.assert_allclose(v_par(m, d), [0.991])


def test_v_par_zero_and_flat(chain):
    _, _, m = prepared(chain)
    d = ExogenousState(np.zeros(2), np.zeros(2))
    np.testing.assert_allclose(v_par(m, d), m.base_term)
    np.testing.assert_allclose(v_par(m, d), [1.0, 1.0])


def test_sign_convention_single_line():
    # V1 = V0 + r p1 + x q1 in the linearized model
    case = simple_case([0], [0.03], [0.05])
    _, _, m = prepared(case)
    p1, q1 = -0.2, 0.1
    V = v_linear(m, [q1], ExogenousState([p1], [0.0]))
    assert V[0] == pytest.approx(1.0 + 0.03 * p1 + 0.05 * q1)


def test_v_linear_desk(single_line):
    _, _, m = prepared(single_line)
    d = ExogenousState.from_case(single_line)
    np.testing.assert_allclose(v_linear(m, [0.45], d), [1.0], atol=1e-15)
    np.testing.assert_allclose(v_linear(m, [0.0], d), v_par(m, d))


def test_superposition(rng):
    case = random_case(rng, n_bus=15)
    _, _, m = prepared(case)
    d = ExogenousState.from_case(case)
    q1, q2 = rng.standard_normal((2, 15)) * 0.01
    np.testing.assert_allclose(v_linear(m, q1 + q2, d) - v_linear(m, q1, d), m.A @ q2, atol=1e-15)


def test_dimension_mismatch(single_line):
    _, _, m = prepared(single_line)
    with pytest.raises(ValueError, match="dimension"):
        v_linear(m, [0.1, 0.2], ExogenousState.from_case(single_line))


def test_objective_desk(single_line):
    _, inc, m = prepared(single_line)
    phi = phi_from_A(single_line, inc)
    d = ExogenousState.from_case(single_line)
    assert objective_f(m, phi, [0.0], d) == pytest.approx(0.5 * 50 * 0.009**2, rel=1e-12)
    assert objective_f(m, phi, [0.45], d) == pytest.approx(0.0, abs=1e-25)


def test_grad_is_voltage_error_when_phi_inverse(rng):
    case = random_case(rng, n_bus=12)
    _, inc, m = prepared(case)
    phi = phi_from_A(case, inc)
    d = ExogenousState.from_case(case)
    q = rng.standard_normal(12) * 0.01
    np.testing.assert_array_equal(grad_f(m, phi, q, d), v_linear(m, q, d) - 1.0)


def test_grad_finite_difference(rng):
    case = random_case(rng, n_bus=10)
    _, inc, m = prepared(case)
    d = ExogenousState.from_case(case)
    B = rng.standard_normal((10, 10))
    for phi in (phi_from_A(case, inc), PhiModel.from_matrix(B @ B.T + 10 * np.eye(10))):
        q = rng.standard_normal(10) * 0.01
        g = grad_f(m, phi, q, d)
        h = 1e-6
        fd = np.array([(objective_f(m, phi, q + h * e, d) - objective_f(m, phi, q - h * e, d)) / (2 * h)
                       for e in np.eye(10)])
        assert np.max(np.abs(g - fd)) <= 1e-6


def test_grad_zero_at_reachable_target(single_line):
    _, inc, m = prepared(single_line)
    phi = phi_from_A(single_line, inc)
    np.testing.assert_allclose(grad_f(m, phi, [0.45], ExogenousState.from_case(single_line)), [0.0], atol=1e-15)


def test_gradient_monotonicity_identity(rng):
    case = random_case(rng, n_bus=20)
    _, _, m = prepared(case)
    d = ExogenousState.from_case(case)
    B = rng.standard_normal((20, 20))
    phi = PhiModel.from_matrix(B @ B.T + 20 * np.eye(20))
    H = m.A @ phi.matrix @ m.A
    x, y = rng.standard_normal((2, 20)) * 0.01
    lhs = (grad_f(m, phi, x, d) - grad_f(m, phi, y, d)) @ (x - y)
    rhs = (x - y) @ H @ (x - y)
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_exogenous_validation():
    with pytest.raises(ValueError):
        ExogenousState([1.0, np.nan], [0.0, 0.0])
    with pytest.raises(ValueError):
        ExogenousState([1.0], [0.0, 0.0])
