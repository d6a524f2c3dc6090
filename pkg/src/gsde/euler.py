"""Direct Euler-Maruyama scheme for the G-SDE on a fixed driver path.

    X_{k+1} = X_k + b dt_k + h dqv_k + sigma dB_k,  coefficients at (t_k, B_k, X_k).

Used as the independent oracle for the sample-solution engine.
"""

from __future__ import annotations

import numpy as np

from .coeff_expr import CoefficientSet
from .doss import PathSolution, _initial, _wrap
from .errors import NumericalError
from .g_driver import as_batch, validate_grid


def solve_euler(cs: CoefficientSet, driver, x0) -> PathSolution:
    batch = as_batch(driver)
    grid = validate_grid(batch.grid)
    P, n1 = batch.b.shape
    X = np.empty((P, n1))
    X[:, 0] = _initial(x0, batch)
    b_fn, h_fn, s_fn = (cs.b_field._vec_fn, cs.h_field._vec_fn, cs.sigma_field._vec_fn)
    dB = np.diff(batch.b, axis=1)
    dQ = np.diff(batch.qv, axis=1)
    with np.errstate(all="ignore"):
        for k in range(n1 - 1):
            t, x, y = grid[k], batch.b[:, k], X[:, k]
            X[:, k + 1] = (y + b_fn(t, x, y) * (grid[k + 1] - t) + h_fn(t, x, y) * dQ[:, k]
                           + s_fn(t, x, y) * dB[:, k])
            if not np.all(np.isfinite(X[:, k + 1])):
                i = int(np.argmax(~np.isfinite(X[:, k + 1])))
                raise NumericalError(
                    f"Euler state became non-finite at step {k + 1} on driver {batch.refs()[i]}"
                )
    return _wrap(batch, None, X, "euler")
