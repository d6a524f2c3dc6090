"""G-Brownian driver paths under volatility uncertainty.

A G-Brownian path is realised as ``B_t = int_0^t theta_s dW_s`` for a volatility
control ``theta`` valued in ``[sigma_lo, sigma_hi]``, so that
``d<B>_t = theta_t^2 dt`` lies in ``[sigma_lo^2, sigma_hi^2] dt``.  The sublinear
expectation is estimated as a maximum of Monte Carlo means over a *finite*
control family, which is only a lower bound of the true supremum.
"""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError, ValidationError

CONTROL_KINDS = ("constant_lo", "constant_hi", "piecewise", "bang_bang_random")


@dataclass(frozen=True)
class VolatilityBand:
    sigma_lo: float
    sigma_hi: float

    def __post_init__(self):
        if not (0 < self.sigma_lo <= self.sigma_hi) or not math.isfinite(self.sigma_hi):
            raise ValidationError(
                f"volatility band needs 0 < sigma_lo <= sigma_hi, got ({self.sigma_lo}, {self.sigma_hi})"
            )

    def G(self, a):
        return g_function(a, self)


def g_function(a, band: VolatilityBand):
    """``G(a) = (sigma_hi^2 a^+ - sigma_lo^2 a^-) / 2``; works elementwise on arrays."""
    a = np.asarray(a, dtype=float)
    out = 0.5 * (band.sigma_hi**2 * np.maximum(a, 0.0) - band.sigma_lo**2 * np.maximum(-a, 0.0))
    return float(out) if out.ndim == 0 else out


def validate_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2:
        raise ValidationError("time grid needs at least two nodes")
    if grid[0] != 0.0:
        raise ValidationError("time grid must start at 0")
    if not np.all(np.diff(grid) > 0):
        raise ValidationError("time grid must be strictly increasing (no duplicate nodes)")
    return grid


def uniform_grid(T: float, n: int) -> np.ndarray:
    if T <= 0 or n < 1:
        raise ValidationError(f"need T > 0 and n >= 1, got T={T}, n={n}")
    return np.linspace(0.0, T, n + 1)


def stable_key(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def derive_seed(master: int, *keys: int) -> int:
    """Reproducible 63-bit child seed for ``(master, *keys)``."""
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int((int(hi) << 32 | int(lo)) >> 1)


def _generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(frozen=True)
class ControlPath:
    grid: np.ndarray
    theta: np.ndarray
    control_id: str = "control"
    band: VolatilityBand | None = None

    def __post_init__(self):
        validate_grid(self.grid)
        if len(self.theta) != len(self.grid) - 1:
            raise ValidationError("control needs one theta value per grid cell")
        if self.band is not None:
            lo, hi = self.band.sigma_lo, self.band.sigma_hi
            if np.any(self.theta < lo) or np.any(self.theta > hi):
                raise ValidationError(f"control {self.control_id} leaves the band [{lo}, {hi}]")


def make_control(kind: str, band: VolatilityBand, grid, seed: int = 0, pieces: int = 4) -> ControlPath:
    """Build one member of the finite control family.

    ``piecewise`` draws ``pieces`` uniform levels in the band on equal time
    blocks; ``bang_bang_random`` picks ``sigma_lo`` or ``sigma_hi`` per cell.
    """
    grid = validate_grid(grid)
    n = grid.size - 1
    lo, hi = band.sigma_lo, band.sigma_hi
    if kind == "constant_lo":
        return ControlPath(grid, np.full(n, lo), "constant_lo", band)
    if kind == "constant_hi":
        return ControlPath(grid, np.full(n, hi), "constant_hi", band)
    rng = _generator(derive_seed(seed, stable_key(kind)))
    if kind == "piecewise":
        levels = rng.uniform(lo, hi, pieces)
        block = np.minimum((grid[:-1] - grid[0]) / (grid[-1] - grid[0]) * pieces, pieces - 1)
        theta = levels[block.astype(int)]
        return ControlPath(grid, theta, f"piecewise-{seed}", band)
    if kind == "bang_bang_random":
        theta = np.where(rng.random(n) < 0.5, lo, hi)
        return ControlPath(grid, theta, f"bang_bang_random-{seed}", band)
    raise ValidationError(f"unknown control kind {kind!r}; expected one of {CONTROL_KINDS}")


@dataclass(frozen=True)
class DrivenPath:
    grid: np.ndarray
    b_vals: np.ndarray
    qv_vals: np.ndarray
    control_id: str
    seed: int

    @property
    def ref(self):
        return f"{self.control_id}:{self.seed}"


@dataclass(frozen=True)
class DriverBatch:
    """Several driver paths on a shared grid; ``b`` and ``qv`` have shape ``(P, N+1)``."""

    grid: np.ndarray
    b: np.ndarray
    qv: np.ndarray
    control_ids: tuple
    seeds: tuple
    single: bool = field(default=False, compare=False)

    @property
    def n_paths(self):
        return self.b.shape[0]

    def path(self, i) -> DrivenPath:
        return DrivenPath(self.grid, self.b[i], self.qv[i], self.control_ids[i], self.seeds[i])

    def __iter__(self):
        return (self.path(i) for i in range(self.n_paths))

    def refs(self):
        return [f"{c}:{s}" for c, s in zip(self.control_ids, self.seeds)]

    def subsample(self, stride: int) -> "DriverBatch":
        if (self.grid.size - 1) % stride:
            raise ValidationError("stride must divide the number of cells")
        return DriverBatch(self.grid[::stride], self.b[:, ::stride], self.qv[:, ::stride],
                           self.control_ids, self.seeds, self.single)


def as_batch(driver) -> DriverBatch:
    if isinstance(driver, DriverBatch):
        return driver
    if isinstance(driver, DrivenPath):
        return DriverBatch(np.asarray(driver.grid), np.asarray(driver.b_vals)[None, :],
                           np.asarray(driver.qv_vals)[None, :], (driver.control_id,),
                           (driver.seed,), single=True)
    return concat_paths(list(driver))


def concat_paths(paths: Sequence) -> DriverBatch:
    if not paths:
        raise ValidationError("empty path collection")
    batches = [as_batch(p) for p in paths]
    grid = batches[0].grid
    for bt in batches[1:]:
        if bt.grid.shape != grid.shape or not np.array_equal(bt.grid, grid):
            raise ValidationError("paths in a batch must share one grid")
    return DriverBatch(
        grid,
        np.concatenate([bt.b for bt in batches]),
        np.concatenate([bt.qv for bt in batches]),
        tuple(c for bt in batches for c in bt.control_ids),
        tuple(s for bt in batches for s in bt.seeds),
    )


def simulate_driver(control: ControlPath, seed: int) -> DrivenPath:
    """One driver path: ``dB_k = theta_k sqrt(dt_k) z_k``, ``dqv_k = theta_k^2 dt_k``."""
    grid = np.asarray(control.grid, dtype=float)
    dt = np.diff(grid)
    theta = np.asarray(control.theta, dtype=float)
    z = _generator(seed).standard_normal(dt.size)
    b = np.concatenate(([0.0], np.cumsum(theta * np.sqrt(dt) * z)))
    return DrivenPath(grid, b, _qv_from_theta(grid, theta), control.control_id, int(seed))


def _qv_from_theta(grid, theta):
    # linear in t on each run of constant theta, so a constant control gives theta^2 * t exactly
    n = theta.size
    starts = np.concatenate(([0], np.flatnonzero(np.diff(theta) != 0) + 1))
    ends = np.append(starts[1:], n)
    theta2 = theta[starts] ** 2
    q_start = np.concatenate(([0.0], np.cumsum(theta2 * (grid[ends] - grid[starts]))))[:-1]
    run = np.repeat(np.arange(starts.size), ends - starts)
    qv = np.empty(n + 1)
    qv[0] = 0.0
    qv[1:] = q_start[run] + theta2[run] * (grid[1:] - grid[starts[run]])
    return qv


def path_seeds(master: int, control_id: str, n: int) -> list[int]:
    key = stable_key(control_id)
    return [derive_seed(master, key, i) for i in range(n)]


def simulate_batch(controls: Sequence[ControlPath], paths_per_control: int, seed: int) -> DriverBatch:
    """``paths_per_control`` drivers for each control; path ``i`` of control ``c``
    uses seed ``derive_seed(seed, key(c), i)`` so adding controls leaves others untouched."""
    if not controls:
        raise ValidationError("empty control family")
    paths = []
    for control in controls:
        for s in path_seeds(seed, control.control_id, paths_per_control):
            paths.append(simulate_driver(control, s))
    return concat_paths(paths)


def refine_driver(driver, factor: int):
    """Refine every cell into ``factor`` sub-cells by Brownian-bridge sampling.

    The control is piecewise constant on the coarse cells, so the fine ``qv``
    is linear inside each cell (exact) and ``B`` is bridged with variance
    ``theta^2 (s - s_prev)(t1 - s)/(t1 - s_prev)``.  Coarse nodes are kept
    bit-for-bit.
    """
    batch = as_batch(driver)
    if factor < 1:
        raise ValidationError("refinement factor must be >= 1")
    if factor == 1:
        return driver
    grid = batch.grid
    dt = np.diff(grid)
    frac = np.arange(factor + 1) / factor
    fine_grid = np.append((grid[:-1, None] + dt[:, None] * frac[None, :-1]).reshape(-1), grid[-1])
    fine_grid[::factor] = grid
    n_coarse = dt.size
    P = batch.n_paths
    b_out = np.empty((P, n_coarse * factor + 1))
    qv_out = np.empty_like(b_out)
    for p in range(P):
        b, qv = batch.b[p], batch.qv[p]
        dqv = np.diff(qv)
        theta2 = dqv / dt
        z = _generator(derive_seed(batch.seeds[p], stable_key("refine"), factor)).standard_normal(
            (n_coarse, factor - 1)
        )
        cur = b[:-1].copy()
        end = b[1:]
        fb = np.empty((n_coarse, factor))
        fb[:, 0] = b[:-1]
        for j in range(1, factor):
            s_prev, s = (j - 1) / factor, j / factor
            w = (s - s_prev) / (1.0 - s_prev)
            mean = cur + w * (end - cur)
            var = theta2 * dt * (s - s_prev) * (1.0 - s) / (1.0 - s_prev)
            cur = mean + np.sqrt(var) * z[:, j - 1]
            fb[:, j] = cur
        b_out[p, :-1] = fb.reshape(-1)
        b_out[p, -1] = b[-1]
        fq = qv[:-1, None] + dqv[:, None] * frac[None, :-1]
        qv_out[p, :-1] = fq.reshape(-1)
        qv_out[p, -1] = qv[-1]
    out = DriverBatch(fine_grid, b_out, qv_out, batch.control_ids, batch.seeds, batch.single)
    return out.path(0) if isinstance(driver, DrivenPath) else out


def realized_qv(path) -> np.ndarray:
    """Cumulative sums of squared driver increments (leading zero included)."""
    b = path.b_vals if isinstance(path, DrivenPath) else path.b
    inc = np.diff(b, axis=-1)
    zeros = np.zeros(b.shape[:-1] + (1,))
    return np.concatenate([zeros, np.cumsum(inc * inc, axis=-1)], axis=-1)


@dataclass(frozen=True)
class SublinearEstimate:
    """Max over controls of Monte Carlo means: a lower bound of the sublinear expectation."""

    estimate: float
    per_control_means: dict
    argmax_control: str
    lower_bound: bool = True


def sublinear_expectation(
    functional: Callable,
    controls: Sequence[ControlPath],
    paths_per_control: int,
    seed: int,
    vectorized: bool = False,
) -> SublinearEstimate:
    """Estimate ``sup_P E_P[functional]`` over the given finite control family.

    ``functional`` maps a ``DrivenPath`` to a real, or (``vectorized=True``) a
    ``DriverBatch`` to an array of per-path values.  Controls are visited in the
    given order and the max is taken in that order.
    """
    if not controls:
        raise ValidationError("sublinear_expectation needs a nonempty control family")
    means = {}
    for control in controls:
        batch = simulate_batch([control], paths_per_control, seed)
        if vectorized:
            vals = np.asarray(functional(batch), dtype=float)
        else:
            vals = np.array([functional(p) for p in batch], dtype=float)
        bad = ~np.isfinite(vals)
        if bad.any():
            i = int(np.argmax(bad))
            raise NumericalError(
                f"functional is non-finite on control {control.control_id}, path seed {batch.seeds[i]}"
            )
        means[control.control_id] = float(vals.mean())
    best = max(means, key=lambda k: means[k])
    return SublinearEstimate(means[best], means, best)


def _fmt(v):
    return repr(float(v))


def write_driver_csv(driver, out, header_comment: str | None = None):
    """Write ``t,B,QV,control_id,seed`` rows (one per node, paths stacked) to a text stream."""
    batch = as_batch(driver)
    if header_comment:
        out.write(f"# {header_comment}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["t", "B", "QV", "control_id", "seed"])
    for p in range(batch.n_paths):
        for k in range(batch.grid.size):
            w.writerow([_fmt(batch.grid[k]), _fmt(batch.b[p, k]), _fmt(batch.qv[p, k]),
                        batch.control_ids[p], batch.seeds[p]])
