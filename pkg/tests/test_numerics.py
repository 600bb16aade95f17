"""Hand-checked values for the linear algebra helpers."""

import numpy as np
import pytest

from taurnn.numerics import (
    PowerIterationError,
    axpy,
    hadamard,
    inf_norm,
    matvec,
    operator_norm,
    sigmoid_vec,
    tanh_vec,
)
from taurnn.rng import SplitMix64


def test_matvec_hand_value():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matvec(m, np.array([1.0, 1.0])), [3.0, 7.0])


def test_matvec_shape_errors_name_the_shapes():
    with pytest.raises(ValueError, match=r"\(2, 2\).*\(3,\)"):
        matvec(np.eye(2), np.zeros(3))
    with pytest.raises(ValueError):
        matvec(np.zeros(3), np.zeros(3))


def test_tanh_matches_numpy():
    v = np.linspace(-5, 5, 11)
    assert np.array_equal(tanh_vec(v), np.tanh(v))


def test_sigmoid_values_and_overflow_safety():
    assert sigmoid_vec(np.array([0.0]))[0] == 0.5
    # logistic(ln 3) = 3/4 exactly in exact arithmetic
    assert sigmoid_vec(np.array([np.log(3.0)]))[0] == pytest.approx(0.75, abs=1e-15)
    big = sigmoid_vec(np.array([750.0, -750.0]))
    assert np.all(np.isfinite(big))
    assert big[0] == 1.0
    assert big[1] == 0.0
    # symmetry: sigmoid(-x) = 1 - sigmoid(x)
    x = np.linspace(-30, 30, 61)
    assert np.allclose(sigmoid_vec(-x), 1.0 - sigmoid_vec(x), atol=1e-15)


def test_sigmoid_accepts_batched_input():
    x = np.array([[0.0, 1.0], [-1.0, 2.0]])
    out = sigmoid_vec(x)
    assert out.shape == (2, 2)
    assert out[0, 0] == 0.5


def test_hadamard_and_axpy_hand_values():
    assert np.array_equal(hadamard(np.array([1.0, 2.0]), np.array([3.0, 4.0])),
                          [3.0, 8.0])
    assert np.array_equal(axpy(2.0, np.array([1.0, 2.0]), np.array([3.0, 4.0])),
                          [5.0, 8.0])
    with pytest.raises(ValueError):
        hadamard(np.zeros(2), np.zeros(3))
    with pytest.raises(ValueError):
        axpy(1.0, np.zeros(2), np.zeros((2, 1)))


def test_inf_norm_is_max_abs_row_sum():
    assert inf_norm(np.array([[1.0, -2.0], [3.0, 4.0]])) == 7.0
    assert inf_norm(np.zeros((3, 3))) == 0.0
    assert inf_norm(np.array([[-5.0]])) == 5.0


def test_operator_norm_diagonal():
    assert operator_norm(np.diag([3.0, -5.0])) == pytest.approx(5.0, rel=1e-9)


def test_operator_norm_zero_and_rank_one():
    assert operator_norm(np.zeros((4, 2))) == 0.0
    u = np.array([1.0, 2.0, 2.0])       # |u| = 3
    v = np.array([3.0, 4.0])            # |v| = 5
    assert operator_norm(np.outer(u, v)) == pytest.approx(15.0, rel=1e-10)


def test_operator_norm_against_svd_oracle():
    rng = SplitMix64(314159)
    for case in range(100):
        rows = 1 + rng.next_below(16)
        cols = 1 + rng.next_below(16)
        m = np.empty((rows, cols))
        rng.fill(m, -2.0, 2.0)
        want = float(np.linalg.norm(m, 2))
        got = operator_norm(m)
        assert got == pytest.approx(want, rel=1e-8, abs=1e-12), f"case {case}"


def test_operator_norm_rectangular_orientation():
    m = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    assert operator_norm(m) == pytest.approx(2.0, rel=1e-9)
    assert operator_norm(m.T) == pytest.approx(2.0, rel=1e-9)


def test_operator_norm_extreme_scale():
    m = 1e200 * np.array([[1.0, 2.0], [3.0, 4.0]])
    want = 1e200 * float(np.linalg.norm(m / 1e200, 2))
    assert operator_norm(m) == pytest.approx(want, rel=1e-10)


def test_power_iteration_cap_raises_with_estimate():
    m = np.array([[2.0, 1.0], [1.0, 3.0]])
    with pytest.raises(PowerIterationError) as exc:
        operator_norm(m, max_iters=1)
    assert exc.value.estimate > 0.0


def test_operator_norm_deterministic():
    m = np.array([[0.3, -1.2, 0.7], [2.0, 0.1, -0.4]])
    assert operator_norm(m) == operator_norm(m.copy())
