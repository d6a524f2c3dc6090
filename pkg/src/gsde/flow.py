"""The noise-coordinate flow ``dy/dx = sigma(t, x, y)``, ``y(t, 0) = v``.

``phi(t, x, v)`` is integrated with classical fixed-step RK4 in ``x`` (time
frozen).  The step actually used is ``x / ceil(|x| / x_step)`` so every node
count is a pure function of ``x`` and results do not depend on batching.  The
sensitivities

    d phi / dv = exp(int_0^x sigma_y du)
    d phi / dt = exp(int_0^x sigma_y du) * int_0^x sigma_t exp(-int_0^u sigma_y dz) du

are accumulated with the trapezoid rule on the same RK4 nodes.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

from .coeff_expr import CoefficientSet, Diffusion
from .errors import FlowError, ValidationError

_THREADS = 1


def set_threads(n: int):
    """Number of worker threads used to split flow evaluations (kernels release the GIL)."""
    global _THREADS
    _THREADS = max(1, int(n))


@numba.njit(nogil=True, error_model="numpy")
def _rk4(sig, t, u, y, s):
    k1 = sig(t, u, y)
    k2 = sig(t, u + 0.5 * s, y + 0.5 * s * k1)
    k3 = sig(t, u + 0.5 * s, y + 0.5 * s * k2)
    k4 = sig(t, u + s, y + s * k3)
    return y + s / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@numba.njit(nogil=True, error_model="numpy")
def _integrate(sig, t, a, b, y0, h, out, bad_u, bad_y):
    for i in range(t.size):
        y = y0[i]
        d = b[i] - a[i]
        n = int(math.ceil(abs(d) / h))
        bad_u[i] = np.nan
        if n > 0:
            s = d / n
            for j in range(n):
                y = _rk4(sig, t[i], a[i] + j * s, y, s)
                if not np.isfinite(y):
                    bad_u[i] = a[i] + (j + 1) * s
                    bad_y[i] = y
                    break
        out[i] = y


@numba.njit(nogil=True, error_model="numpy")
def _sweep(sig, sig_dy, sig_dt, use_dt, t, x, v, h, phi, dv, dtphi, bad_u, bad_y):
    for i in range(t.size):
        ti = t[i]
        y = v[i]
        n = int(math.ceil(abs(x[i]) / h))
        bad_u[i] = np.nan
        iy = 0.0
        acc = 0.0
        if n > 0:
            s = x[i] / n
            a_prev = sig_dy(ti, 0.0, y)
            c_prev = sig_dt(ti, 0.0, y) if use_dt else 0.0
            for j in range(n):
                y = _rk4(sig, ti, 0.0 + j * s, y, s)
                un = 0.0 + (j + 1) * s
                a_new = sig_dy(ti, un, y)
                iy += 0.5 * s * (a_prev + a_new)
                a_prev = a_new
                if use_dt:
                    c_new = sig_dt(ti, un, y) * math.exp(-iy)
                    acc += 0.5 * s * (c_prev + c_new)
                    c_prev = c_new
                if not (np.isfinite(y) and np.isfinite(iy) and np.isfinite(acc)):
                    bad_u[i] = un
                    bad_y[i] = y
                    break
        phi[i] = y
        e = math.exp(iy)
        dv[i] = e
        dtphi[i] = e * acc


@dataclass(frozen=True)
class FlowField:
    """Evaluator for ``phi`` and its partials.

    ``sigma`` may be a ``CoefficientSet`` (its diffusion is used) or any
    ``Diffusion``.  Read-only; evaluations are pure.
    """

    sigma: object
    x_step: float = 1e-3
    method: str = "rk4"

    def __post_init__(self):
        if not self.x_step > 0:
            raise ValidationError("x_step must be positive")
        if self.method != "rk4":
            raise ValidationError(f"unsupported flow method {self.method!r}")
        if isinstance(self.sigma, CoefficientSet):
            object.__setattr__(self, "sigma", self.sigma.diffusion)
        if not isinstance(self.sigma, Diffusion):
            raise ValidationError("FlowField.sigma must be a CoefficientSet or Diffusion")

    @property
    def diffusion(self) -> Diffusion:
        return self.sigma


def _prepare(*args):
    scalar = all(np.ndim(a) == 0 for a in args)
    arrs = np.broadcast_arrays(*[np.asarray(a, dtype=float) for a in args])
    shape = arrs[0].shape
    flat = [np.array(a, dtype=float).reshape(-1) for a in arrs]
    return scalar, shape, flat


def _chunks(n):
    k = min(_THREADS, max(1, n // 64))
    edges = np.linspace(0, n, k + 1).astype(int)
    return [slice(edges[i], edges[i + 1]) for i in range(k)]


def _run(kernel, fixed, arrays, outs):
    parts = _chunks(arrays[0].size)
    if len(parts) == 1:
        kernel(*fixed[:-1], *arrays, fixed[-1], *outs)
        return
    with ThreadPoolExecutor(len(parts)) as pool:
        futures = [
            pool.submit(kernel, *fixed[:-1], *[a[p] for a in arrays], fixed[-1], *[o[p] for o in outs])
            for p in parts
        ]
        for f in futures:
            f.result()


def _raise_bad(t, bad_u, bad_y):
    bad = ~np.isnan(bad_u)
    if bad.any():
        i = int(np.argmax(bad))
        raise FlowError(float(t[i]), float(bad_u[i]), float(bad_y[i]))


def _integrate_flow(ff: FlowField, t, a, b, y0):
    n = t.size
    out = np.empty(n)
    bad_u = np.empty(n)
    bad_y = np.empty(n)
    sig = ff.sigma.value.jit
    _run(_integrate, (sig, ff.x_step), [t, a, b, y0], [out, bad_u, bad_y])
    _raise_bad(t, bad_u, bad_y)
    return out


def flow_terms(ff: FlowField, t, x, v):
    """Return ``(phi, d phi/dv, d phi/dt)`` at broadcast ``(t, x, v)``, as arrays."""
    _, shape, (t, x, v) = _prepare(t, x, v)
    n = t.size
    phi_, dv, dt = np.empty(n), np.empty(n), np.empty(n)
    bad_u, bad_y = np.empty(n), np.empty(n)
    d = ff.sigma
    use_dt = not d.dt.is_zero
    _sweep_args = (d.value.jit, d.dy.jit, d.dt.jit, use_dt)
    parts = _chunks(n)
    if len(parts) == 1:
        _sweep(*_sweep_args, t, x, v, ff.x_step, phi_, dv, dt, bad_u, bad_y)
    else:
        with ThreadPoolExecutor(len(parts)) as pool:
            futures = [
                pool.submit(_sweep, *_sweep_args, t[p], x[p], v[p], ff.x_step,
                            phi_[p], dv[p], dt[p], bad_u[p], bad_y[p])
                for p in parts
            ]
            for f in futures:
                f.result()
    _raise_bad(t, bad_u, bad_y)
    return phi_.reshape(shape), dv.reshape(shape), dt.reshape(shape)


def _out(arr, scalar):
    return float(arr.reshape(-1)[0]) if scalar else arr


def phi(ff: FlowField, t, x, v):
    """Flow value ``phi(t, x, v)``; ``phi(t, 0, v) == v`` exactly."""
    scalar, shape, (t, x, v) = _prepare(t, x, v)
    res = _integrate_flow(ff, t, np.zeros_like(x), x, v).reshape(shape)
    return _out(res, scalar)


def phi_dv(ff: FlowField, t, x, v):
    scalar = all(np.ndim(a) == 0 for a in (t, x, v))
    return _out(flow_terms(ff, t, x, v)[1], scalar)


def phi_dt(ff: FlowField, t, x, v):
    scalar = all(np.ndim(a) == 0 for a in (t, x, v))
    return _out(flow_terms(ff, t, x, v)[2], scalar)


def phi_inverse(ff: FlowField, t, x, w):
    """The ``v`` with ``phi(t, x, v) == w``, by integrating the flow backward from ``x`` to 0."""
    scalar, shape, (t, x, w) = _prepare(t, x, w)
    res = _integrate_flow(ff, t, x, np.zeros_like(x), w).reshape(shape)
    return _out(res, scalar)
