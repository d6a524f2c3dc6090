"""Mollification of a Lipschitz-only diffusion coefficient in the state variable.

``sigma_n(y) = int sigma(y + z) rho_n(z) dz`` with the C-infinity bump
``rho(u) ~ exp(-1/(1-u^2))`` scaled to ``[-1/n, 1/n]``, evaluated by fixed
Gauss-Legendre quadrature on the kernel support.  The derivative uses the
analytic kernel derivative, ``sigma_n'(y) = -int sigma(y + z) rho_n'(z) dz``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property

import numba
import numpy as np

from .coeff_expr import (
    ZERO,
    CoefficientSet,
    Diffusion,
    Field,
    differentiate,
    format_expr,
    free_vars,
    parse,
)
from .doss import solve_doss
from .errors import GSDEError, ValidationError
from .euler import solve_euler
from .flow import FlowField
from .g_driver import (
    CONTROL_KINDS,
    VolatilityBand,
    concat_paths,
    derive_seed,
    make_control,
    path_seeds,
    refine_driver,
    simulate_driver,
    uniform_grid,
)


def bump(u):
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    inside = np.abs(u) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - u[inside] ** 2))
    return out


def bump_derivative(u):
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    inside = np.abs(u) < 1.0
    ui = u[inside]
    out[inside] = np.exp(-1.0 / (1.0 - ui**2)) * (-2.0 * ui / (1.0 - ui**2) ** 2)
    return out


@dataclass(frozen=True)
class Mollifier:
    """Bump kernel of bandwidth ``1/n`` discretised with ``quad_nodes`` Gauss-Legendre points."""

    n: int
    quad_nodes: int = 64

    def __post_init__(self):
        if self.n < 1 or self.quad_nodes < 2:
            raise ValidationError("Mollifier needs n >= 1 and quad_nodes >= 2")

    @cached_property
    def _rule(self):
        u, w = np.polynomial.legendre.leggauss(self.quad_nodes)
        rho = bump(u)
        z = float(np.sum(w * rho))
        weights = w * rho / z
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-10:
            raise GSDEError("mollifier quadrature normalisation failed")
        dweights = -self.n * w * bump_derivative(u) / z
        return u / self.n, weights, dweights

    @property
    def shifts(self):
        """Quadrature offsets ``z_i`` in ``[-1/n, 1/n]``."""
        return self._rule[0]

    @property
    def weights(self):
        """Normalised kernel weights (nonnegative, summing to 1)."""
        return self._rule[1]

    @property
    def derivative_weights(self):
        return self._rule[2]

    def density(self, z):
        """``rho_n(z)``, normalised so the quadrature integrates it to 1."""
        u, w = np.polynomial.legendre.leggauss(self.quad_nodes)
        zq = float(np.sum(w * bump(u)))
        return self.n * bump(self.n * np.asarray(z, dtype=float)) / zq


def _smoothed_jit(raw, shifts, weights):
    shifts = np.ascontiguousarray(shifts)
    weights = np.ascontiguousarray(weights)

    @numba.njit(nogil=True, error_model="numpy")
    def smoothed(t, x, y):
        acc = 0.0
        for i in range(shifts.size):
            acc += weights[i] * raw(t, x, y + shifts[i])
        return acc

    return smoothed


class SmoothedField:
    """``y -> sum_i w_i F(t, x, y + z_i)``: a quadrature convolution of a field in ``y``."""

    is_zero = False

    def __init__(self, raw: Field, shifts, weights, label=""):
        self.raw = raw
        self.shifts = np.asarray(shifts, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        self.label = label

    def __repr__(self):
        return f"SmoothedField({self.label!r})"

    def vec(self, t, x, y):
        t, x, y = np.broadcast_arrays(
            np.asarray(t, dtype=float), np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        )
        vals = self.raw.vec(t[..., None], x[..., None], y[..., None] + self.shifts)
        return vals @ self.weights

    __call__ = vec

    @cached_property
    def jit(self):
        return _smoothed_jit(self.raw.jit, self.shifts, self.weights)


def _as_sigma_expr(sigma):
    if isinstance(sigma, CoefficientSet):
        return sigma.sigma
    if isinstance(sigma, Field):
        return sigma.expr
    if isinstance(sigma, str):
        return parse(sigma)
    return sigma


@dataclass(frozen=True)
class SmoothedSigma:
    """Mollified diffusion ``sigma_n`` with its ``y``-derivative (and ``t``/``x`` parts
    when the raw coefficient depends on them smoothly)."""

    sigma: object
    mollifier: Mollifier
    value: SmoothedField
    derivative: SmoothedField
    diffusion: Diffusion = field(repr=False)

    def __call__(self, y, t=0.0, x=0.0):
        return self.value.vec(t, x, y)

    def prime(self, y, t=0.0, x=0.0):
        return self.derivative.vec(t, x, y)


def smooth_sigma(sigma, m: Mollifier) -> SmoothedSigma:
    """Mollify ``sigma`` (expression, source string, Field or CoefficientSet) in ``y``."""
    expr = _as_sigma_expr(sigma)
    raw = Field(expr)
    label = f"mollified[{m.n}]({format_expr(expr)})"
    value = SmoothedField(raw, m.shifts, m.weights, label)
    deriv = SmoothedField(raw, m.shifts, m.derivative_weights, label + "'")
    extra = {}
    for var in ("t", "x"):
        if var in free_vars(expr):
            extra[var] = SmoothedField(Field(differentiate(expr, var)), m.shifts, m.weights,
                                       f"{label}_{var}")
        else:
            extra[var] = Field(ZERO)
    diffusion = Diffusion(value=value, dt=extra["t"], dx=extra["x"], dy=deriv, label=label)
    return SmoothedSigma(expr, m, value, deriv, diffusion)


@dataclass(frozen=True)
class StudyRow:
    n: int
    mean_sq_sup_err: float
    max_sup_err: float
    fitted_exponent: float


@dataclass(frozen=True)
class StudyReport:
    rows: list
    grid_n: int
    ref_factor: int
    paths: int

    def errors(self):
        return np.array([r.mean_sq_sup_err for r in self.rows])


def fitted_exponent(ns, errs):
    """Negated least-squares slope of ``log err`` against ``log n`` (nan if undefined)."""
    ns = np.asarray(ns, dtype=float)
    errs = np.asarray(errs, dtype=float)
    if ns.size < 2 or np.any(errs <= 0):
        return float("nan")
    slope = np.polyfit(np.log(ns), np.log(errs), 1)[0]
    return float(-slope)


def study_drivers(band, T, grid_n, paths, seed, kinds=CONTROL_KINDS):
    """``paths`` drivers spread over the control kinds (earlier kinds take any remainder)."""
    grid = uniform_grid(T, grid_n)
    kinds = list(kinds)
    counts = [paths // len(kinds) + (i < paths % len(kinds)) for i in range(len(kinds))]
    out = []
    for kind, count in zip(kinds, counts):
        if count == 0:
            continue
        control = make_control(kind, band, grid, seed=derive_seed(seed, 1))
        out.extend(simulate_driver(control, s) for s in path_seeds(seed, control.control_id, count))
    return concat_paths(out)


def convergence_study(
    cs: CoefficientSet,
    band: VolatilityBand,
    n_list,
    paths: int,
    seed: int,
    *,
    T: float = 1.0,
    grid_n: int = 256,
    x0: float = 0.0,
    ref_factor: int = 16,
    quad_nodes: int = 32,
    x_step: float = 1e-2,
    kinds=CONTROL_KINDS,
) -> StudyReport:
    """Compare mollified-sigma sample solutions with a raw-sigma Euler reference.

    The reference runs on the Brownian-bridge refinement (``ref_factor``) of the
    same drivers and is read off at the coarse nodes.
    """
    n_list = [int(n) for n in n_list]
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValidationError("n_list must be increasing")
    drivers = study_drivers(band, T, grid_n, paths, seed, kinds)
    ref = solve_euler(cs, refine_driver(drivers, ref_factor), x0).x_vals[:, ::ref_factor]
    mean_sq, max_sup = [], []
    for n in n_list:
        sm = smooth_sigma(cs.sigma, Mollifier(n, quad_nodes))
        sol = solve_doss(cs, FlowField(sm.diffusion, x_step), drivers, x0)
        sup = np.abs(sol.x_vals - ref).max(axis=1)
        mean_sq.append(float(np.mean(sup**2)))
        max_sup.append(float(sup.max()))
    expo = fitted_exponent(n_list, mean_sq)
    rows = [StudyRow(n, m, s, expo) for n, m, s in zip(n_list, mean_sq, max_sup)]
    return StudyReport(rows, grid_n, ref_factor, drivers.n_paths)


def write_study_csv(report: StudyReport, out, header_comment: str | None = None):
    if header_comment:
        out.write(f"# {header_comment}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["n", "mean_sq_sup_err", "max_sup_err", "fitted_exponent"])
    for r in report.rows:
        w.writerow([r.n, repr(r.mean_sq_sup_err), repr(r.max_sup_err), repr(r.fitted_exponent)])
