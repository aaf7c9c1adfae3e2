import numpy as np
import pytest

from pcmesh import tensor as T
from pcmesh.gradcheck import OP_NAMES, RTOL, _line_derivative, check_function, numeric_grad, rel_err, run_op_checks, run_pipeline_check


def test_rel_err_floor():
    assert rel_err(1.0, 1.0) == 0.0
    assert rel_err(2.0, 1.0) == pytest.approx(0.5)
    # tiny derivatives compare against the absolute floor instead of themselves
    assert rel_err(1e-12, -1e-12) < RTOL


def test_numeric_grad_restores_input():
    x = np.array([1.0, -2.0, 0.5])
    g = numeric_grad(lambda: float(np.sum(x**3)), x)
    np.testing.assert_allclose(g, 3 * x**2, rtol=1e-6)
    np.testing.assert_array_equal(x, [1.0, -2.0, 0.5])


def test_every_op_passes():
    results = run_op_checks(trials=5, seed=3)
    assert [r.name for r in results] == list(OP_NAMES)
    bad = [r.line() for r in results if not r.passed]
    assert not bad, bad


def test_a_wrong_gradient_is_caught():
    def wrong_square(x):
        return T._make(x.data**2, (x,), lambda g: (3 * x.data * g,), "square")  # should be 2x

    err, _ = check_function(wrong_square, [np.array([0.5, 1.5])], np.random.default_rng(0))
    assert err > RTOL


def test_line_derivative_steps_past_a_nearby_kink():
    # a ReLU kink 0.5 steps from the evaluation point: the plain central
    # difference reads 0.75, the retried one the true slope 1
    f = lambda t: max(t + 5e-7, 0.0)
    assert _line_derivative(f, 1e-6, retries=0) == pytest.approx(0.75)
    assert _line_derivative(f, 1e-6) == pytest.approx(1.0)
    assert _line_derivative(np.sin, 1e-6) == pytest.approx(1.0)


def test_pipeline_check_small_body():
    results = run_pipeline_check(seed=1, num_joints=6, num_vertices=120, points=128, coordinates=16)
    for r in results:
        assert r.passed, r.line()
