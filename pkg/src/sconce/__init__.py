"""sconce: a numerical laboratory for the 1-D stochastic continuity equation.

The solution is simulated through its method-of-characteristics
representation u(t, x) = u0(Y(x)) * JY(x) along the inverse stochastic
flow, its derivative with respect to the driving noise is evaluated from
explicit pathwise formulas, and the quantitative consequences (positivity
of the derivative norm, closed-form bounds, Gaussian density envelopes)
are verified by Monte Carlo, quadrature and independent oracles.
"""

from .errors import (
    ConfigError,
    DegenerateSampleError,
    DivergenceError,
    GridMismatchError,
    SconceError,
    UnsupportedOrderError,
)
from .scenario import (
    BoundConstants,
    DriftKind,
    DriftSpec,
    HypothesisReport,
    InitialConditionKind,
    InitialConditionSpec,
    Window,
    check_hypotheses,
    constants,
    eval_drift,
    eval_initial,
)
from .paths import (
    BrownianPath,
    ShiftDirection,
    TimeGrid,
    mix_paths,
    sample_increments,
    sample_path,
    shift_path,
    zero_path,
)
from .flow import (
    BackwardTrajectory,
    ForwardTrajectory,
    SolutionValue,
    jacobian_backward,
    solution_at,
    solve_backward,
    solve_forward,
)
from .malliavin import (
    BoundsAudit,
    DerivativeProfile,
    MalliavinReport,
    SecondDerivativeProfile,
    audit_bounds,
    bounds_report,
    d2JY,
    d2Y,
    d2u_profile,
    dJY,
    dY,
    du_profile,
    h_inner,
    h_norm,
)
from .density import (
    BouleauHirschReport,
    DensityEstimate,
    EnvelopeReport,
    SampleSet,
    SandwichBounds,
    TailReport,
    bouleau_hirsch_check,
    envelope_check,
    kde,
    sample_solution,
    sandwich,
    tail_check,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
