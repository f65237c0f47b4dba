"""Rough-path calculus toolkit: lifts, compensated integrals, flows, RPDEs."""

from .analysis import (
    AnalysisParams,
    ConstantsReport,
    SampledPath,
    TimeGrid,
    TwoParamField,
    first_window_bounds,
    holder_seminorm,
    k_alpha,
    make_grid,
    sewing_constant,
    step_constants,
    weighted_driver_norm,
)
from .drivers import (
    CompositionDriver,
    FunctionBundle,
    SmoothDriver,
    SmoothField,
    SpanPrefix,
    composed_field,
    composition_driver,
    exp_product,
    fd_crosscheck,
    linear_adapter,
    linear_bundle,
    linear_field,
    matrix_linear,
    nl_chen_residual,
    pointwise_product,
    rotation,
    second_field,
    sine_field,
    smooth_driver,
    taylor_remainder,
    time_only_field,
)
from .linear import (
    BracketSet,
    ChenReport,
    ControlledPath,
    RoughPath,
    SewDivergenceError,
    SewResult,
    brackets,
    chen_residual,
    circle_path,
    compose_controlled,
    identity_controlled,
    ito_residual,
    line_path,
    make_lift,
    oscillator_path,
    rough_integral,
    sew,
    sewing_bound_report,
    sine_path,
    solve_linear_rde,
)
from .nlintegral import (
    DefectBoundReport,
    IntegralStabilityReport,
    NLControlledPath,
    NLIntegralResult,
    NLYoungResult,
    ReductionReport,
    StabilityReport,
    driver_distance,
    nl_rough_integral,
    nl_young_integral,
    oscillator_young_case,
    reduction_to_linear,
    stability_distance,
)
from .rde import (
    AprioriReport,
    GrowthConditionError,
    PicardDivergenceError,
    RDESolution,
    SensitivityReport,
    WindowDiagnostics,
    apriori_report,
    measure_driver_norm,
    sensitivity_report,
    solve_rde,
)

__version__ = "0.1.0"

__all__ = [
    "AnalysisParams",
    "apriori_report",
    "AprioriReport",
    "brackets",
    "BracketSet",
    "chen_residual",
    "ChenReport",
    "circle_path",
    "compose_controlled",
    "composed_field",
    "composition_driver",
    "CompositionDriver",
    "ConstantsReport",
    "ControlledPath",
    "DefectBoundReport",
    "driver_distance",
    "exp_product",
    "fd_crosscheck",
    "first_window_bounds",
    "FunctionBundle",
    "GrowthConditionError",
    "holder_seminorm",
    "identity_controlled",
    "IntegralStabilityReport",
    "ito_residual",
    "k_alpha",
    "line_path",
    "linear_adapter",
    "linear_bundle",
    "linear_field",
    "make_grid",
    "make_lift",
    "matrix_linear",
    "measure_driver_norm",
    "nl_chen_residual",
    "nl_rough_integral",
    "nl_young_integral",
    "NLControlledPath",
    "NLIntegralResult",
    "NLYoungResult",
    "oscillator_path",
    "oscillator_young_case",
    "PicardDivergenceError",
    "pointwise_product",
    "RDESolution",
    "reduction_to_linear",
    "ReductionReport",
    "rotation",
    "rough_integral",
    "RoughPath",
    "SampledPath",
    "second_field",
    "sensitivity_report",
    "SensitivityReport",
    "sew",
    "SewDivergenceError",
    "sewing_bound_report",
    "sewing_constant",
    "SewResult",
    "sine_field",
    "sine_path",
    "smooth_driver",
    "SmoothDriver",
    "SmoothField",
    "solve_linear_rde",
    "solve_rde",
    "SpanPrefix",
    "stability_distance",
    "StabilityReport",
    "step_constants",
    "taylor_remainder",
    "time_only_field",
    "TimeGrid",
    "TwoParamField",
    "WindowDiagnostics",
    "__version__",
]
