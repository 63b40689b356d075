"""Set identification and inference for BLP demand with unobserved outside shares."""

from .errors import (
    BlpBoundsError,
    ConfigError,
    DataError,
    DegenerateShareError,
    InfeasibleSampleError,
    InversionError,
    QuadratureError,
    SingularityError,
)
from .model import (
    Dataset,
    GridAxis,
    MarketObservation,
    MixingSpec,
    OutsideShareSet,
    ParamTheta,
    Quadrature,
    ThetaGrid,
    build_quadrature,
    load_dataset,
    plain_logit_mixing,
    save_dataset,
)
from .shares import (
    choice_probabilities,
    diversion_ratio,
    elasticity_cross,
    elasticity_own,
    implied_share,
    markup,
    sigma,
    sigma_tilde,
)
from .inversion import demand_shocks, invert_sigma
from .identify import (
    Direction,
    DirectionSet,
    MembershipResult,
    SupportEngine,
    SupportMomentResult,
    compute_identified_set,
    conditional_moment_table,
    default_directions,
    equilibrium_bounds,
    membership,
    residual,
    shock_set,
    support_moment,
)
from .inference import (
    Combo,
    HypercubeSpec,
    InstrumentFunctionSet,
    MomentSystem,
    PairwiseComboSpec,
    TestOutcome,
    build_instruments,
    confidence_set,
    critical_value_bootstrap,
    critical_value_sn,
    evaluate_theta,
    hypercube_count,
    moment_stats,
    multiplier_bootstrap_quantile,
    nevo_style_combos,
    project_confidence_set,
    test_statistic,
)
from .results import GridResult
from .simulate import (
    CounterexampleEvaluator,
    HiddenTruths,
    SimulationDesign,
    counterexample_curve,
    counterexample_minimum,
    counterexample_value,
    median_market,
    simulate_dataset,
    synthetic_median_market,
)

__version__ = "0.1.0"
