"""Sample-solution (Doss-Sussmann) engine.

The G-SDE ``dX = b dt + h d<B> + sigma dB`` is solved pathwise as
``X_t = phi(t, B_t, V_t)`` where ``V`` solves the random ODE

    dV = g(t, B_t, V) dt + f(t, B_t, V) d<B>_t,   V_0 = X_0,
    g = (b(t, x, phi) - phi_t) / phi_v,
    f = (h(t, x, phi) - (sigma_x + sigma_y sigma)(t, x, phi) / 2) / phi_v.

``V`` is integrated with Heun steps on the driver grid, using the exact
increments ``(dt_k, dqv_k)`` and the driver value frozen at the left node.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .coeff_expr import CoefficientSet
from .errors import NumericalError, ValidationError
from .flow import FlowField, flow_terms, phi_inverse
from .g_driver import DriverBatch, as_batch, validate_grid


@dataclass(frozen=True)
class PathSolution:
    """``V`` and ``X`` on a driver grid.  Arrays are ``(N+1,)`` for a single
    driver and ``(P, N+1)`` for a batch; ``v_vals`` is ``None`` for Euler."""

    grid: np.ndarray
    v_vals: np.ndarray | None
    x_vals: np.ndarray
    method: str
    driver_ref: object
    b_vals: np.ndarray
    qv_vals: np.ndarray


def _wrap(batch: DriverBatch, v, x, method):
    if batch.single:
        return PathSolution(batch.grid, None if v is None else v[0], x[0], method,
                            batch.refs()[0], batch.b[0], batch.qv[0])
    return PathSolution(batch.grid, v, x, method, tuple(batch.refs()), batch.b, batch.qv)


def drift_terms(cs: CoefficientSet, ff: FlowField, t, x, v):
    """Transformed drifts ``(g, f)`` and the flow value ``phi`` at broadcast ``(t, x, v)``."""
    ph, dv, dt = flow_terms(ff, t, x, v)
    t_, x_ = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
    t_ = np.broadcast_to(t_, ph.shape)
    x_ = np.broadcast_to(x_, ph.shape)
    d = ff.sigma
    with np.errstate(all="ignore"):
        b = cs.b_field.vec(t_, x_, ph)
        h = cs.h_field.vec(t_, x_, ph)
        ito = d.dx.vec(t_, x_, ph) + d.dy.vec(t_, x_, ph) * d.value.vec(t_, x_, ph)
        g = (b - dt) / dv
        f = (h - 0.5 * ito) / dv
    return g, f, ph


def transformed_drift_g(cs, ff, t, x, v):
    g = drift_terms(cs, ff, t, x, v)[0]
    return float(g) if g.ndim == 0 else g


def transformed_drift_f(cs, ff, t, x, v):
    f = drift_terms(cs, ff, t, x, v)[1]
    return float(f) if f.ndim == 0 else f


def _heun(cs, ff, batch: DriverBatch, x0):
    validate_grid(batch.grid)
    P, n1 = batch.b.shape
    V = np.empty((P, n1))
    X = np.empty((P, n1))
    V[:, 0] = x0
    grid = batch.grid
    for k in range(n1 - 1):
        dt = grid[k + 1] - grid[k]
        dq = batch.qv[:, k + 1] - batch.qv[:, k]
        bk = batch.b[:, k]
        g1, f1, ph = drift_terms(cs, ff, grid[k], bk, V[:, k])
        X[:, k] = ph
        pred = V[:, k] + g1 * dt + f1 * dq
        g2, f2, _ = drift_terms(cs, ff, grid[k + 1], bk, pred)
        V[:, k + 1] = V[:, k] + 0.5 * ((g1 + g2) * dt + (f1 + f2) * dq)
        bad = ~np.isfinite(V[:, k + 1])
        if bad.any():
            i = int(np.argmax(bad))
            raise NumericalError(f"V became non-finite at step {k + 1} on driver {batch.refs()[i]}")
    _, _, ph = drift_terms(cs, ff, grid[-1], batch.b[:, -1], V[:, -1])
    X[:, -1] = ph
    return V, X


def _initial(x0, batch):
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim and x0.shape != (batch.n_paths,):
        raise ValidationError("x0 must be a scalar or one value per path")
    return x0


def solve_v(cs: CoefficientSet, ff: FlowField, driver, x0):
    """Heun integration of the ``V`` equation; returns ``V`` on the driver grid."""
    batch = as_batch(driver)
    V, _ = _heun(cs, ff, batch, _initial(x0, batch))
    return V[0] if batch.single else V


def solve_doss(cs: CoefficientSet, ff: FlowField, driver, x0) -> PathSolution:
    """``X_k = phi(t_k, B_k, V_k)`` with ``V`` from ``solve_v``."""
    batch = as_batch(driver)
    V, X = _heun(cs, ff, batch, _initial(x0, batch))
    return _wrap(batch, V, X, "doss")


def recover_v(cs: CoefficientSet, ff: FlowField, driver, x_path):
    """``V_k = phi^{-1}(t_k, B_k, X_k)``, i.e. the flow run backward from ``B_k`` to 0."""
    batch = as_batch(driver)
    x_path = np.asarray(x_path, dtype=float)
    xs = x_path[None, :] if batch.single and x_path.ndim == 1 else x_path
    if xs.shape != batch.b.shape:
        raise ValidationError("x_path length does not match the driver")
    t = np.broadcast_to(batch.grid, xs.shape)
    v = phi_inverse(ff, t, batch.b, xs)
    return v[0] if batch.single and x_path.ndim == 1 else v


def total_variation(v_vals, grid=None):
    """Running total variation ``sum |dV|`` with a leading zero (along the last axis)."""
    v = np.asarray(v_vals, dtype=float)
    if grid is not None and np.shape(grid)[-1] != v.shape[-1]:
        raise ValidationError("grid and V lengths differ")
    inc = np.abs(np.diff(v, axis=-1))
    zeros = np.zeros(v.shape[:-1] + (1,))
    return np.concatenate([zeros, np.cumsum(inc, axis=-1)], axis=-1)


def write_solution_csv(sol: PathSolution, out, header_comment: str | None = None):
    """``t,B,QV,V,X,method`` rows, one per node; batched paths are stacked."""
    if header_comment:
        out.write(f"# {header_comment}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["t", "B", "QV", "V", "X", "method"])
    x = np.atleast_2d(sol.x_vals)
    b = np.atleast_2d(sol.b_vals)
    q = np.atleast_2d(sol.qv_vals)
    v = np.full_like(x, np.nan) if sol.v_vals is None else np.atleast_2d(sol.v_vals)
    for p in range(x.shape[0]):
        for k in range(sol.grid.size):
            w.writerow([repr(float(sol.grid[k])), repr(float(b[p, k])), repr(float(q[p, k])),
                        repr(float(v[p, k])), repr(float(x[p, k])), sol.method])
