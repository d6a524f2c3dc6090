import io

import numpy as np
import pytest
from scipy.integrate import quad

from gsde.coeff_expr import CoefficientSet
from gsde.errors import ValidationError
from gsde.flow import FlowField, phi
from gsde.g_driver import VolatilityBand
from gsde.mollify import (
    Mollifier,
    bump,
    bump_derivative,
    convergence_study,
    fitted_exponent,
    smooth_sigma,
    write_study_csv,
)


@pytest.mark.parametrize("n", [1, 10, 40])
def test_kernel_normalisation(n):
    m = Mollifier(n)
    assert abs(m.weights.sum() - 1.0) < 1e-10
    assert np.all(m.weights >= 0)
    assert np.all(np.abs(m.shifts) <= 1.0 / n)
    assert abs(quad(m.density, -1.0 / n, 1.0 / n, epsabs=1e-13)[0] - 1.0) < 1e-10


def test_bump_derivative_matches_finite_differences():
    u = np.linspace(-0.95, 0.95, 39)
    h = 1e-6
    np.testing.assert_allclose(bump_derivative(u), (bump(u + h) - bump(u - h)) / (2 * h), rtol=1e-6, atol=1e-12)
    assert np.all(bump(np.array([-1.0, 1.0, 2.0])) == 0.0)


def test_linear_sigma_unchanged():
    s = smooth_sigma("2 + 0.5*y", Mollifier(10))
    y = np.linspace(-3, 3, 31)
    np.testing.assert_allclose(s(y), 2 + 0.5 * y, atol=1e-10)
    np.testing.assert_allclose(s.prime(y), 0.5, atol=1e-8)


@pytest.mark.parametrize("n", [10, 20, 40])
def test_abs_bound(n):
    s = smooth_sigma("abs(y)", Mollifier(n))
    y = np.linspace(-1, 1, 4001)
    err = np.abs(s(y) - np.abs(y))
    assert err.max() <= 1.0 / n
    # the error is concentrated at the kink and of order 1/n there
    assert err[2000] > 0.1 / n


def test_value_at_kink():
    val = float(smooth_sigma("abs(y)", Mollifier(10))(0.0))
    assert 0 < val <= 0.1


@pytest.mark.parametrize("x", [0.0, 0.03, -0.07, 0.5])
def test_against_adaptive_quadrature(x):
    # independent oracle: adaptive integration of sigma against the kernel density
    n = 10
    m = Mollifier(n)
    s = smooth_sigma("abs(y) + sin(y)", m)
    ref = quad(lambda z: (abs(x + z) + np.sin(x + z)) * m.density(z), -1 / n, 1 / n,
               points=[-x] if abs(x) < 1 / n else None, epsabs=1e-14)[0]
    dref = quad(lambda z: (np.sign(x + z) + np.cos(x + z)) * m.density(z), -1 / n, 1 / n,
                points=[-x] if abs(x) < 1 / n else None, epsabs=1e-14)[0]
    assert float(s(x)) == pytest.approx(ref, abs=5e-5)
    assert float(s.prime(x)) == pytest.approx(dref, abs=5e-4)


def test_derivative_matches_finite_differences_of_value():
    s = smooth_sigma("sin(3*y) + tanh(y)", Mollifier(10))
    y = np.linspace(-2, 2, 41)
    h = 1e-5
    fd = (s(y + h) - s(y - h)) / (2 * h)
    np.testing.assert_allclose(s.prime(y), fd, rtol=1e-6, atol=1e-9)


def test_derivative_of_abs_away_from_kink():
    s = smooth_sigma("abs(y) + 1", Mollifier(20))
    y = np.concatenate([np.linspace(-2, -0.06, 20), np.linspace(0.06, 2, 20)])
    np.testing.assert_allclose(s.prime(y), np.sign(y), rtol=1e-6)


def test_lipschitz_constant_preserved():
    s = smooth_sigma("abs(y) + 1", Mollifier(40))
    y = np.linspace(-0.2, 0.2, 2001)
    assert np.abs(s.prime(y)).max() <= 1.0 + 1e-9
    assert np.abs(np.diff(s(y)) / np.diff(y)).max() <= 1.0 + 1e-9


def test_time_dependent_sigma_is_mollified_in_y_only():
    s = smooth_sigma("abs(y)*(1 + t)", Mollifier(10))
    np.testing.assert_allclose(s.diffusion.dt.vec(0.0, 0.0, 2.0), 2.0, rtol=1e-12)
    assert s.diffusion.dx.is_zero


def test_flow_stability_bound():
    # |phi_n(x, v1) - phi(x, v2)| <= C(|v1 - v2| + |x|/n) e^{C|x|}, brute-force C fitted at n = 10
    raw = FlowField(CoefficientSet.from_strings(sigma="abs(y)"), 1e-3)
    x, v1, v2 = np.meshgrid(np.linspace(-1, 1, 9), np.linspace(-0.5, 0.5, 7), np.linspace(-0.5, 0.5, 7))
    x, v1, v2 = x.ravel(), v1.ravel(), v2.ravel()
    ref = phi(raw, 0.0, x, v2)

    def ratio(n):
        sm = smooth_sigma("abs(y)", Mollifier(n))
        lhs = np.abs(phi(FlowField(sm.diffusion, 1e-3), 0.0, x, v1) - ref)
        scale = (np.abs(v1 - v2) + np.abs(x) / n) * np.exp(np.abs(x))
        keep = scale > 0
        return (lhs[keep] / scale[keep]).max()

    C = ratio(10)
    assert np.isfinite(C) and C <= 2.0
    for n in (20, 40):
        assert ratio(n) <= C * 1.01


def test_fitted_exponent():
    assert fitted_exponent([10, 20, 40], [1.0, 0.25, 0.0625]) == pytest.approx(2.0)
    assert np.isnan(fitted_exponent([10], [1.0]))


def test_smooth_sigma_gives_flat_study():
    cs = CoefficientSet.from_strings(b="0", h="0", sigma="1 + 0.5*tanh(y)")
    rep = convergence_study(cs, VolatilityBand(0.5, 1.0), [10, 20, 40], 40, 3, grid_n=128, ref_factor=8)
    errs = rep.errors()
    assert abs(rep.rows[0].fitted_exponent) < 0.3
    assert errs.max() / errs.min() < 1.5


def test_study_rejects_unsorted_n():
    cs = CoefficientSet.from_strings(sigma="abs(y) + 1")
    with pytest.raises(ValidationError):
        convergence_study(cs, VolatilityBand(0.5, 1.0), [20, 10], 4, 0)


@pytest.fixture(scope="module")
def abs_study():
    cs = CoefficientSet.from_strings(b="0", h="0", sigma="abs(y) + 1", lipschitz_K=1.0, bound_M=10.0)
    return convergence_study(cs, VolatilityBand(0.5, 1.0), [10, 20, 40], 200, 2026, grid_n=2048)


def test_first_doubling_ratio(abs_study):
    errs = abs_study.errors()
    assert errs[0] / errs[1] >= 1.5


def test_study_csv(abs_study):
    buf = io.StringIO()
    write_study_csv(abs_study, buf, "config_hash=q seed=2026")
    lines = buf.getvalue().splitlines()
    assert lines[1] == "n,mean_sq_sup_err,max_sup_err,fitted_exponent"
    assert [int(r.split(",")[0]) for r in lines[2:]] == [10, 20, 40]
