"""Pathwise sample solutions of scalar G-SDEs and numerical comparison checks."""

from .coeff_expr import CoefficientSet, differentiate, evaluate, format_expr, parse
from .compare import (
    BoundSystem,
    ComparisonReport,
    ComparisonSpec,
    certify_g_condition,
    check_ode_comparison,
    necessary_sufficient_check,
    path_envelope,
    pure_diffusion_compare,
    verify_pathwise,
)
from .doss import PathSolution, recover_v, solve_doss, solve_v, total_variation
from .errors import GSDEError, NumericalError, ValidationError
from .euler import solve_euler
from .flow import FlowField, phi, phi_dt, phi_dv, phi_inverse
from .g_driver import (
    ControlPath,
    DrivenPath,
    VolatilityBand,
    g_function,
    make_control,
    realized_qv,
    simulate_driver,
    sublinear_expectation,
)
from .mollify import Mollifier, convergence_study, smooth_sigma

__version__ = "0.1.0"
