"""Numerical certification and pathwise verification of comparison results.

Hypotheses are checked on finite grids only; a "certified" flag means the
inequality held at every sampled point of the declared box and nothing more.
Continuity in the expression language (all primitives are continuous) stands
in for measurability-type side conditions that cannot be checked by machine.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .coeff_expr import CoefficientSet, Field, free_vars, parse
from .doss import drift_terms, solve_doss
from .errors import ValidationError
from .euler import solve_euler
from .flow import FlowField, phi
from .g_driver import (
    VolatilityBand,
    as_batch,
    concat_paths,
    g_function,
    make_control,
    path_seeds,
    simulate_driver,
    uniform_grid,
)

CONDITION_SLACK = 1e-12


# ------------------------------------------------------------ ODE lemma

@dataclass(frozen=True)
class OdeComparison:
    hypothesis_holds: bool
    conclusion_holds: bool | None
    x: np.ndarray
    x_tilde: np.ndarray
    worst_hypothesis: float
    worst_location: tuple | None
    max_excess: float
    tol: float


def _rk4_scalar_ode(f, grid, x0):
    out = np.empty(grid.size)
    out[0] = x = float(x0)
    for k in range(grid.size - 1):
        t, h = grid[k], grid[k + 1] - grid[k]
        k1 = f(t, x)
        k2 = f(t + 0.5 * h, x + 0.5 * h * k1)
        k3 = f(t + 0.5 * h, x + 0.5 * h * k2)
        k4 = f(t + h, x + h * k3)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k + 1] = x
    return out


def check_ode_comparison(f: Callable, f_tilde: Callable, x0: float, x0_tilde: float, grid,
                         x_samples: int = 101, x_range=None) -> OdeComparison:
    """Scalar ODE comparison ``x' = f(t, x)`` versus ``x~' = f~(t, x~)``.

    Both are integrated with RK4 on ``grid``.  The hypothesis
    ``(t - t0) f <= (t - t0) f~`` is sampled on ``grid`` times ``x_samples``
    state values in ``x_range`` (default: the hull of both trajectories); only if it holds is
    ``x <= x~ + tol`` asserted, with ``tol = 1e-9 + 10 h^4``.
    """
    if x0 > x0_tilde:
        raise ValidationError("check_ode_comparison needs x0 <= x0_tilde")
    grid = np.asarray(grid, dtype=float)
    t0 = grid[0]
    x = _rk4_scalar_ode(f, grid, x0)
    xt = _rk4_scalar_ode(f_tilde, grid, x0_tilde)
    if x_range is None:
        # a first crossing can only happen at a state both solutions visit
        x_range = (min(x.min(), xt.min()), max(x.max(), xt.max()))
    T, Xs = np.meshgrid(grid, np.linspace(x_range[0], x_range[1], x_samples), indexing="ij")
    with np.errstate(all="ignore"):
        gap = (T - t0) * (np.broadcast_to(f(T, Xs), T.shape) - np.broadcast_to(f_tilde(T, Xs), T.shape))
    k = int(np.argmax(gap))
    worst = float(gap.reshape(-1)[k])
    step = float(np.max(np.diff(grid)))
    tol = 1e-9 + 10.0 * step**4
    excess = float(np.max(x - xt))
    if worst > CONDITION_SLACK:
        loc = (float(T.reshape(-1)[k]), float(Xs.reshape(-1)[k]))
        return OdeComparison(False, None, x, xt, worst, loc, excess, tol)
    return OdeComparison(True, bool(excess <= tol), x, xt, worst, None, excess, tol)


# ------------------------------------------------------- specifications

@dataclass(frozen=True)
class BoundSystem:
    """Explicit comparison functions ``sigma~(t,x,y)``, ``g~(t,x,v)``, ``f~(t,x,v)``."""

    sigma: object
    g: object
    f: object

    @classmethod
    def from_strings(cls, sigma, g, f):
        return cls(parse(sigma), parse(g), parse(f))

    @property
    def fields(self):
        return Field(self.sigma), Field(self.g), Field(self.f)


@dataclass(frozen=True)
class ComparisonSpec:
    left: CoefficientSet
    x0_left: float
    right: object  # CoefficientSet or BoundSystem
    x0_right: float
    band: VolatilityBand
    box: tuple = (1.0, 3.0, 3.0)  # (T, x_bar, v_bar): [0,T] x [-x_bar,x_bar] x [-v_bar,v_bar]
    grid_density: int = 11
    x_step: float = 1e-2

    def flow(self, side):
        cs = self.left if side == "left" else self.right
        if isinstance(cs, BoundSystem):
            return FlowField(CoefficientSet(cs.sigma, cs.sigma, cs.sigma), self.x_step)
        return FlowField(cs, self.x_step)

    def box_points(self):
        T, xb, vb = self.box
        d = self.grid_density
        t, x, v = np.meshgrid(np.linspace(0.0, T, d), np.linspace(-xb, xb, d),
                              np.linspace(-vb, vb, d), indexing="ij")
        return t.reshape(-1), x.reshape(-1), v.reshape(-1)


@dataclass(frozen=True)
class Certification:
    certified: bool
    worst: float
    at: tuple
    sigma_ok: bool
    sigma_worst: float
    sigma_at: tuple
    box: tuple
    density: int


def _right_drifts(spec: ComparisonSpec, t, x, v):
    if isinstance(spec.right, BoundSystem):
        _, g, f = spec.right.fields
        return g.vec(t, x, v), f.vec(t, x, v)
    g, f, _ = drift_terms(spec.right, spec.flow("right"), t, x, v)
    return g, f


def certify_g_condition(spec: ComparisonSpec) -> Certification:
    """Max over the box grid of ``2G(f - f~) + (g - g~)`` and of ``x sigma - x sigma~``.

    Certified iff both maxima are ``<= 1e-12``.  Ties resolve to the first grid
    index, so the reported location is deterministic.
    """
    t, x, v = spec.box_points()
    g, f, _ = drift_terms(spec.left, spec.flow("left"), t, x, v)
    gt, ft = _right_drifts(spec, t, x, v)
    cond = 2.0 * g_function(f - ft, spec.band) + (g - gt)
    k = int(np.argmax(cond))
    sl = spec.left.sigma_field.vec(t, x, v)
    if isinstance(spec.right, BoundSystem):
        sr = spec.right.fields[0].vec(t, x, v)
    else:
        sr = spec.right.sigma_field.vec(t, x, v)
    sgap = x * sl - x * sr
    j = int(np.argmax(sgap))
    worst, sworst = float(cond[k]), float(sgap[j])
    sigma_ok = sworst <= CONDITION_SLACK
    return Certification(
        certified=bool(worst <= CONDITION_SLACK and sigma_ok),
        worst=worst,
        at=(float(t[k]), float(x[k]), float(v[k])),
        sigma_ok=bool(sigma_ok),
        sigma_worst=sworst,
        sigma_at=(float(t[j]), float(x[j]), float(v[j])),
        box=spec.box,
        density=spec.grid_density,
    )


# ------------------------------------------------------ pathwise checks

@dataclass(frozen=True)
class Violation:
    control_id: str
    seed: int
    time_index: int
    t: float
    x_left: float
    x_right: float
    count: int  # violating nodes on this path


@dataclass(frozen=True)
class ComparisonReport:
    condition_certified_on_grid: bool
    certification: Certification | None
    violations: list
    verdict: str  # consistent | violated | hypotheses-fail
    tol: float
    paths: int
    method: str
    notes: list = field(default_factory=list)

    def __post_init__(self):
        if not self.violations and self.verdict == "violated":
            raise ValueError("verdict 'violated' requires at least one violation")


def family_drivers(band, T, grid_n, kinds, paths_per_control, seed, control_seed=0):
    grid = uniform_grid(T, grid_n)
    out = []
    for kind in kinds:
        control = make_control(kind, band, grid, seed=control_seed)
        out.extend(simulate_driver(control, s)
                   for s in path_seeds(seed, control.control_id, paths_per_control))
    return concat_paths(out)


def _solve_side(spec, side, drivers, method):
    cs = spec.left if side == "left" else spec.right
    x0 = spec.x0_left if side == "left" else spec.x0_right
    if isinstance(cs, BoundSystem):
        return _solve_bound(spec, cs, drivers, x0)
    if method == "euler":
        return solve_euler(cs, drivers, x0).x_vals
    return solve_doss(cs, spec.flow(side), drivers, x0).x_vals


def _solve_bound(spec, bs: BoundSystem, drivers, x0):
    # Heun on V~ with g~, f~ (left-frozen driver), then X~ = phi~(t, B, V~)
    batch = as_batch(drivers)
    _, gf, ff = bs.fields
    P, n1 = batch.b.shape
    V = np.empty((P, n1))
    V[:, 0] = x0
    for k in range(n1 - 1):
        t0, t1 = batch.grid[k], batch.grid[k + 1]
        dq = batch.qv[:, k + 1] - batch.qv[:, k]
        bk = batch.b[:, k]
        k1 = gf.vec(t0, bk, V[:, k]) * (t1 - t0) + ff.vec(t0, bk, V[:, k]) * dq
        pred = V[:, k] + k1
        k2 = gf.vec(t1, bk, pred) * (t1 - t0) + ff.vec(t1, bk, pred) * dq
        V[:, k + 1] = V[:, k] + 0.5 * (k1 + k2)
    t = np.broadcast_to(batch.grid, V.shape)
    return phi(spec.flow("right"), t, batch.b, V)


def verify_pathwise(spec: ComparisonSpec, kinds: Sequence[str], paths_per_control: int, seed: int,
                    *, grid_n: int = 1024, method: str = "doss", tol: float | None = None,
                    tol_c: float | None = None, probe: bool = True) -> ComparisonReport:
    """Solve both systems on identical drivers and flag nodes with ``X_left > X_right + tol``.

    Default tolerance: ``1e-9`` for the sample-solution method on both sides,
    ``c sqrt(dt)`` for Euler with ``c = 3 K sigma_hi`` unless ``tol_c`` is given.
    When the hypotheses are not certified the verdict is ``hypotheses-fail``;
    the Monte Carlo run still happens if ``probe`` is set.
    """
    if method not in ("doss", "euler"):
        raise ValidationError(f"unknown method {method!r}")
    cert = certify_g_condition(spec)
    T = spec.box[0]
    dt = T / grid_n
    if tol is None:
        if method == "doss":
            tol = 1e-9
        else:
            ks = [spec.left.lipschitz_K]
            if isinstance(spec.right, CoefficientSet):
                ks.append(spec.right.lipschitz_K)
            c = tol_c if tol_c is not None else 3.0 * max(ks) * spec.band.sigma_hi
            tol = c * math.sqrt(dt)
    notes = [f"hypotheses checked on box {spec.box} at density {spec.grid_density} only"]
    violations = []
    n_paths = 0
    if cert.certified or probe:
        drivers = family_drivers(spec.band, T, grid_n, kinds, paths_per_control, seed)
        n_paths = drivers.n_paths
        xl = _solve_side(spec, "left", drivers, method)
        xr = _solve_side(spec, "right", drivers, method)
        bad = xl > xr + tol
        for p in np.flatnonzero(bad.any(axis=1)):
            k = int(np.argmax(bad[p]))
            violations.append(Violation(drivers.control_ids[p], drivers.seeds[p], k,
                                        float(drivers.grid[k]), float(xl[p, k]), float(xr[p, k]),
                                        int(bad[p].sum())))
    if not cert.certified:
        verdict = "hypotheses-fail"
        if not (cert.certified or probe):
            notes.append("Monte Carlo skipped (probe disabled)")
    elif violations:
        verdict = "violated"
    else:
        verdict = "consistent"
    return ComparisonReport(cert.certified, cert, violations, verdict, tol, n_paths, method, notes)


def write_report(report: ComparisonReport, csv_out, summary_out, header_comment: str | None = None):
    """Violations as CSV plus a plain-text summary block."""
    if header_comment:
        csv_out.write(f"# {header_comment}\n")
        summary_out.write(f"# {header_comment}\n")
    w = csv.writer(csv_out, lineterminator="\n")
    w.writerow(["control_id", "seed", "time_index", "t", "X_left", "X_right", "violating_nodes"])
    for v in report.violations:
        w.writerow([v.control_id, v.seed, v.time_index, repr(v.t), repr(v.x_left),
                    repr(v.x_right), v.count])
    c = report.certification
    lines = [
        f"verdict: {report.verdict}",
        f"condition_certified_on_grid: {report.condition_certified_on_grid}",
        f"method: {report.method}",
        f"paths: {report.paths}",
        f"tolerance: {report.tol!r}",
        f"violating_paths: {len(report.violations)}",
    ]
    if c is not None:
        lines += [
            f"drift_condition_worst: {c.worst!r} at (t,x,v)={c.at}",
            f"sigma_condition_worst: {c.sigma_worst!r} at (t,x,y)={c.sigma_at}",
            f"box: {c.box} density: {c.density}",
        ]
    lines += [f"note: {n}" for n in report.notes]
    summary_out.write("\n".join(lines) + "\n")


# --------------------------------------------- autonomous coefficients

@dataclass(frozen=True)
class NecessarySufficient:
    sufficient_holds: bool
    sigma_equal: bool
    drift_condition: bool
    drift_worst: float
    sigma_worst: float


def _autonomous(cs: CoefficientSet):
    if cs.depends_on("t") or cs.depends_on("x"):
        raise ValidationError("necessary_sufficient_check needs coefficients depending on y only")


def necessary_sufficient_check(cs1: CoefficientSet, cs2: CoefficientSet, box, band: VolatilityBand,
                               density: int = 401) -> NecessarySufficient:
    """Grid check of ``sigma1 == sigma2`` (to 1e-10) and ``b1 - b2 + 2G(h1 - h2) <= 0``
    on ``y`` in ``box = (y_lo, y_hi)``."""
    _autonomous(cs1)
    _autonomous(cs2)
    y = np.linspace(box[0], box[1], density)
    z = np.zeros_like(y)
    sgap = np.abs(cs1.sigma_field.vec(z, z, y) - cs2.sigma_field.vec(z, z, y))
    drift = (cs1.b_field.vec(z, z, y) - cs2.b_field.vec(z, z, y)
             + 2.0 * g_function(cs1.h_field.vec(z, z, y) - cs2.h_field.vec(z, z, y), band))
    sigma_equal = bool(np.max(sgap) <= 1e-10)
    drift_ok = bool(np.max(drift) <= 0.0)
    return NecessarySufficient(sigma_equal and drift_ok, sigma_equal, drift_ok,
                               float(np.max(drift)), float(np.max(sgap)))


def adaptive_simpson(f, a, b, tol=1e-10, max_depth=50):
    """Adaptive Simpson quadrature of a scalar function on ``[a, b]`` (signed)."""
    if a == b:
        return 0.0

    def simpson(fa, fm, fb, a, b):
        return (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def rec(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = simpson(fa, flm, fm, a, m)
        right = simpson(fm, frm, fb, m, b)
        if depth <= 0 or abs(left + right - whole) <= 15.0 * tol:
            return left + right + (left + right - whole) / 15.0
        return (rec(a, m, fa, flm, fm, left, tol / 2, depth - 1)
                + rec(m, b, fm, frm, fb, right, tol / 2, depth - 1))

    fa, fb, fm = f(a), f(b), f(0.5 * (a + b))
    return rec(a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, max_depth)


@dataclass(frozen=True)
class PureDiffusionResult:
    condition_holds: bool
    worst_gap: float  # min over grid of int dy/sigma1 - int dy/sigma2
    worst_x: float
    asserted: bool
    paths: int
    violations: list


def _y_field(sigma):
    expr = parse(sigma) if isinstance(sigma, str) else getattr(sigma, "expr", sigma)
    if free_vars(expr) - {"y"}:
        raise ValidationError("pure diffusion coefficients must depend on y only")
    return Field(expr)


def _cumulative_inverse_integral(fn, start, xs, tol):
    # int_start^x dy / sigma(y) at sorted xs, chaining Simpson pieces through start
    pts = np.unique(np.append(xs, start))
    vals = np.zeros(pts.size)
    i0 = int(np.searchsorted(pts, start))
    for i in range(i0 + 1, pts.size):
        vals[i] = vals[i - 1] + adaptive_simpson(fn, pts[i - 1], pts[i], tol)
    for i in range(i0 - 1, -1, -1):
        vals[i] = vals[i + 1] - adaptive_simpson(fn, pts[i], pts[i + 1], tol)
    return np.interp(xs, pts, vals)


def pure_diffusion_compare(sigma1, sigma2, x01: float, x02: float, grid, drivers=None, *,
                           x_step: float = 1e-2, tol: float = 1e-9, quad_tol: float = 1e-10,
                           probe: bool = False) -> PureDiffusionResult:
    """Order of ``dX^i = sigma_i dB + sigma_i sigma_i' d<B>/2`` from the integral criterion.

    Checks ``int_{x01}^x dy/sigma1 >= int_{x02}^x dy/sigma2`` on the ``x`` grid.
    If it holds (or ``probe`` is set) and drivers are given, compares
    ``phi_1(B_t, x01)`` with ``phi_2(B_t, x02)`` at every node.
    """
    s1, s2 = _y_field(sigma1), _y_field(sigma2)
    grid = np.sort(np.asarray(grid, dtype=float))
    lo = min(grid[0], x01, x02)
    hi = max(grid[-1], x01, x02)
    probe_y = np.linspace(lo, hi, 4 * grid.size + 1)
    for name, s in (("sigma1", s1), ("sigma2", s2)):
        vals = s.vec(0.0, 0.0, probe_y)
        if np.any(vals <= 0):
            k = int(np.argmax(vals <= 0))
            raise ValidationError(f"{name} is not positive at y={probe_y[k]!r}")

    def inv(s):
        return lambda y: 1.0 / float(s.vec(0.0, 0.0, y))

    i1 = _cumulative_inverse_integral(inv(s1), x01, grid, quad_tol)
    i2 = _cumulative_inverse_integral(inv(s2), x02, grid, quad_tol)
    gap = i1 - i2
    k = int(np.argmin(gap))
    holds = bool(gap[k] >= -quad_tol)
    violations = []
    n_paths = 0
    asserted = holds and drivers is not None
    if drivers is not None and (holds or probe):
        batch = as_batch(drivers)
        n_paths = batch.n_paths
        t = np.broadcast_to(batch.grid, batch.b.shape)
        ff1 = FlowField(CoefficientSet(s1.expr, s1.expr, s1.expr), x_step)
        ff2 = FlowField(CoefficientSet(s2.expr, s2.expr, s2.expr), x_step)
        x1 = phi(ff1, t, batch.b, np.full(batch.b.shape, float(x01)))
        x2 = phi(ff2, t, batch.b, np.full(batch.b.shape, float(x02)))
        bad = x1 > x2 + tol
        for p in np.flatnonzero(bad.any(axis=1)):
            j = int(np.argmax(bad[p]))
            violations.append(Violation(batch.control_ids[p], batch.seeds[p], j, float(batch.grid[j]),
                                        float(x1[p, j]), float(x2[p, j]), int(bad[p].sum())))
    return PureDiffusionResult(holds, float(gap[k]), float(grid[k]), asserted, n_paths, violations)


# ----------------------------------------------------------- envelopes

def envelope_constant(cs: CoefficientSet, ff: FlowField, band: VolatilityBand, box=(1.0, 3.0, 3.0),
                      density: int = 11, safety: float = 1.1) -> float:
    """A constant ``C`` for the path envelope, from metadata plus a box scan.

    ``C >= max(bound_M, lipschitz_K)`` and ``C >= safety * sup (|g| + sigma_hi^2 |f|) e^{-K|x|}``
    over the box grid, so that ``|sigma| <= C`` and ``|g| + sigma_hi^2 |f| <= C e^{C|x|}``
    wherever the scan is representative.
    """
    T, xb, vb = box
    t, x, v = np.meshgrid(np.linspace(0, T, density), np.linspace(-xb, xb, density),
                          np.linspace(-vb, vb, density), indexing="ij")
    t, x, v = t.reshape(-1), x.reshape(-1), v.reshape(-1)
    g, f, _ = drift_terms(cs, ff, t, x, v)
    K = cs.lipschitz_K
    growth = (np.abs(g) + band.sigma_hi**2 * np.abs(f)) * np.exp(-K * np.abs(x))
    return float(max(cs.bound_M, K, safety * np.max(growth)))


@dataclass(frozen=True)
class EnvelopeViolation:
    control_id: str
    seed: int
    time_index: int
    lower: float
    x: float
    upper: float


def path_envelope(cs: CoefficientSet, C: float, drivers, x0: float, ff: FlowField | None = None,
                  x_vals=None) -> list:
    """Nodes where ``X`` leaves ``X_0 -/+ (C|B_t| + C int_0^t e^{C|B_s|} ds)``.

    ``X`` comes from ``x_vals`` if given, else from the sample-solution method
    with ``ff``.  The time integral uses the trapezoid rule on the driver grid.
    """
    if C <= 0:
        raise ValidationError("envelope constant must be positive")
    batch = as_batch(drivers)
    if x_vals is None:
        if ff is None:
            raise ValidationError("path_envelope needs either x_vals or a FlowField")
        x_vals = solve_doss(cs, ff, batch, x0).x_vals
    xv = np.atleast_2d(x_vals)
    e = np.exp(C * np.abs(batch.b))
    dt = np.diff(batch.grid)
    integ = np.concatenate([np.zeros((e.shape[0], 1)),
                            np.cumsum(0.5 * (e[:, 1:] + e[:, :-1]) * dt, axis=1)], axis=1)
    width = C * np.abs(batch.b) + C * integ
    lower, upper = x0 - width, x0 + width
    bad = (xv < lower) | (xv > upper)
    out = []
    for p, k in zip(*np.nonzero(bad)):
        out.append(EnvelopeViolation(batch.control_ids[p], batch.seeds[p], int(k),
                                     float(lower[p, k]), float(xv[p, k]), float(upper[p, k])))
    return out
