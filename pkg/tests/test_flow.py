import numpy as np
import pytest

from gsde.coeff_expr import CoefficientSet
from gsde.errors import FlowError, ValidationError
from gsde.flow import FlowField, flow_terms, phi, phi_dt, phi_dv, phi_inverse, set_threads


def _ff(sigma, x_step=1e-3):
    return FlowField(CoefficientSet.from_strings(sigma=sigma), x_step)


def test_constant_sigma_is_linear():
    ff = _ff("0.7")
    for t, x, v in [(0.0, 1.3, -0.4), (0.5, -2.0, 1.0), (1.0, 0.25, 3.0)]:
        assert abs(phi(ff, t, x, v) - (v + 0.7 * x)) < 1e-12
        assert phi_dv(ff, t, x, v) == 1.0
        assert phi_dt(ff, t, x, v) == 0.0
        assert abs(phi_inverse(ff, t, x, v) - (v - 0.7 * x)) < 1e-12


def test_zero_x_is_identity():
    ff = _ff("tanh(y) + t*y")
    for v in (-1.0, 0.0, 2.5):
        assert phi(ff, 0.3, 0.0, v) == v
        assert phi_dv(ff, 0.3, 0.0, v) == 1.0
        assert phi_dt(ff, 0.3, 0.0, v) == 0.0
        assert phi_inverse(ff, 0.3, 0.0, v) == v


def test_tanh_closed_form():
    # separation of variables: sinh(phi) = e^x sinh(v)
    ff = _ff("tanh(y)")
    x, v = np.meshgrid(np.linspace(-2, 2, 21), np.linspace(-2, 2, 21))
    err = np.abs(np.sinh(phi(ff, 0.0, x, v)) - np.exp(x) * np.sinh(v))
    assert err.max() < 1e-8


def test_rk4_order_on_tanh():
    x, v = np.meshgrid(np.linspace(-2, 2, 9), np.linspace(-2, 2, 9))
    exact = np.arcsinh(np.exp(x) * np.sinh(v))
    errs = [np.abs(phi(_ff("tanh(y)", h), 0.0, x, v) - exact).max() for h in (0.2, 0.1)]
    assert 8 <= errs[0] / errs[1] <= 32


def test_phi_dv_matches_finite_differences(rng):
    ff = _ff("tanh(y) + 0.3*sin(x*y) + 0.2*cos(t)")
    t, x, v = rng.uniform(0, 1, 100), rng.uniform(-2, 2, 100), rng.uniform(-2, 2, 100)
    h = 1e-6
    fd = (phi(ff, t, x, v + h) - phi(ff, t, x, v - h)) / (2 * h)
    assert np.all(phi_dv(ff, t, x, v) > 0)
    np.testing.assert_allclose(phi_dv(ff, t, x, v), fd, rtol=1e-5)


def test_tanh_phi_dv_at_one():
    ff = _ff("tanh(y)")
    h = 1e-6
    fd = (phi(ff, 0.0, 1.0, h) - phi(ff, 0.0, 1.0, -h)) / (2 * h)
    assert phi_dv(ff, 0.0, 1.0, 0.0) == pytest.approx(fd, rel=1e-5)
    assert phi_dv(ff, 0.0, 1.0, 0.0) == pytest.approx(np.e, rel=1e-8)


def test_phi_dt_linear_time_case():
    ff = _ff("(1 + t)*0.5")
    for t, x, v in [(0.0, 1.0, 0.0), (0.7, -1.5, 2.0), (2.0, 0.3, -1.0)]:
        assert phi(ff, t, x, v) == pytest.approx(v + 0.5 * (1 + t) * x, abs=1e-12)
        assert phi_dt(ff, t, x, v) == pytest.approx(0.5 * x, abs=1e-8)


def test_phi_dt_matches_finite_differences(rng):
    ff = _ff("tanh(y)*(1 + 0.5*sin(2*t)) + 0.2*x")
    t, x, v = rng.uniform(0, 1, 50), rng.uniform(-1.5, 1.5, 50), rng.uniform(-1, 1, 50)
    h = 1e-5
    fd = (phi(ff, t + h, x, v) - phi(ff, t - h, x, v)) / (2 * h)
    np.testing.assert_allclose(phi_dt(ff, t, x, v), fd, rtol=1e-5, atol=1e-7)


def test_time_independent_sigma_has_zero_dt(rng):
    ff = _ff("sin(y) + 2")
    assert np.all(phi_dt(ff, rng.uniform(0, 1, 20), rng.uniform(-2, 2, 20), 0.3) == 0.0)


def test_slope_in_x_is_sigma(rng):
    cs = CoefficientSet.from_strings(sigma="tanh(y) + 0.3*cos(x + t)")
    ff = FlowField(cs)
    t, x, v = rng.uniform(0, 1, 50), rng.uniform(-2, 2, 50), rng.uniform(-2, 2, 50)
    h = 1e-5
    slope = (phi(ff, t, x + h, v) - phi(ff, t, x - h, v)) / (2 * h)
    sig = cs.sigma_field.vec(t, x, phi(ff, t, x, v))
    np.testing.assert_allclose(slope, sig, rtol=1e-5)


def test_inverse_round_trip(rng):
    ff = _ff("tanh(y) + 0.3*sin(x*y) + 0.2*cos(t)")
    t, x, v = rng.uniform(0, 1, 100), rng.uniform(-2, 2, 100), rng.uniform(-2, 2, 100)
    np.testing.assert_allclose(phi_inverse(ff, t, x, phi(ff, t, x, v)), v, atol=1e-8)
    w = rng.uniform(-2, 2, 100)
    np.testing.assert_allclose(phi(ff, t, x, phi_inverse(ff, t, x, w)), w, atol=1e-8)


def test_group_law_and_reflection_for_x_independent_sigma(rng):
    ff = _ff("tanh(y) + 0.5*cos(t*y)")
    t = rng.uniform(0, 1, 50)
    x1, x2, v = rng.uniform(-1, 1, (3, 50))
    np.testing.assert_allclose(phi(ff, t, x1 + x2, v), phi(ff, t, x2, phi(ff, t, x1, v)), atol=1e-8)
    w = rng.uniform(-2, 2, 50)
    np.testing.assert_allclose(phi_inverse(ff, t, x1, w), phi(ff, t, -x1, w), atol=1e-8)


def test_reflection_identity_fails_for_x_dependent_sigma():
    # v = phi(t, -x, phi(t, x, v)) is a flow reversal only when sigma ignores x
    ff = _ff("1 + 0.5*sin(x)*y")
    x, v = 1.5, 0.7
    w = phi(ff, 0.0, x, v)
    assert abs(phi_inverse(ff, 0.0, x, w) - v) < 1e-10
    assert abs(phi(ff, 0.0, -x, w) - v) > 1e-3


def test_batch_independence():
    ff = _ff("tanh(y) + 0.1*x")
    x = np.linspace(-2, 2, 301)
    full = phi(ff, 0.2, x, 0.5)
    one = np.array([phi(ff, 0.2, xi, 0.5) for xi in x])
    np.testing.assert_array_equal(full, one)


def test_threads_do_not_change_results(rng):
    ff = _ff("tanh(y) + 0.2*sin(t)")
    t, x, v = rng.uniform(0, 1, 1000), rng.uniform(-2, 2, 1000), rng.uniform(-2, 2, 1000)
    a = flow_terms(ff, t, x, v)
    set_threads(4)
    try:
        b = flow_terms(ff, t, x, v)
    finally:
        set_threads(1)
    for u, w in zip(a, b):
        np.testing.assert_array_equal(u, w)


def test_flow_error_carries_location():
    ff = _ff("y*y")
    with pytest.raises(FlowError) as info:
        phi(ff, 0.0, 2.0, 1.0)  # blows up at x = 1
    assert 0.9 < info.value.x_pos <= 2.0
    assert info.value.t == 0.0


def test_invalid_flow_field():
    with pytest.raises(ValidationError):
        _ff("y", x_step=0.0)
    with pytest.raises(ValidationError):
        FlowField(CoefficientSet.from_strings(sigma="y"), method="euler")
