"""Day-ahead EV charging scheduler with shortfall compensation.

The pipeline: fit a dependence model to historical sessions (``datagen``),
sample a synthetic day of sessions, build the exact scheduling program and
solve it with branch-and-bound over a from-scratch simplex core (``solver``,
``lp``), then settle every session in exact money (``model``).  Compensation
for energy not served is priced on lower-semicontinuous piecewise-linear
curves (``utility``).
"""

from .model import (Instance, Schedule, SessionSpec, SettlementReport,
                    TimeGrid, default_grid, load_instance, save_instance,
                    settle, snap_to_grid, validate)
from .solver import (BnbConfig, SolveResult, brute_force, build_model, solve,
                     verify_solution)
from .utility import UtilityCurve, evaluate
from .datagen import (CopulaModel, GenPolicy, fit_copula, generate_sessions,
                      sample_copula, student_t_cdf)

__version__ = "0.1.0"

__all__ = [
    "BnbConfig",
    "CopulaModel",
    "GenPolicy",
    "Instance",
    "Schedule",
    "SessionSpec",
    "SettlementReport",
    "SolveResult",
    "TimeGrid",
    "UtilityCurve",
    "brute_force",
    "build_model",
    "default_grid",
    "evaluate",
    "fit_copula",
    "generate_sessions",
    "load_instance",
    "sample_copula",
    "save_instance",
    "settle",
    "snap_to_grid",
    "solve",
    "student_t_cdf",
    "validate",
    "verify_solution",
    "__version__",
]
