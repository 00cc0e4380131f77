"""Regression Monte Carlo solvers for BSDEs with time-delayed generators."""

from .bsde import (
    BsdeSolution,
    PicardTrace,
    SolverConfig,
    picard_residual,
    solve_delayed_bsde,
    solve_standard_bsde,
)
from .errors import *  # noqa: F401,F403
from .forward import ForwardEnsemble, ForwardModel, make_model, simulate_forward
from .generators import (
    DelayMeasure,
    GeneratorSpec,
    check_contraction,
    make_generator,
    make_lagged,
    make_markovian,
    make_moving_average,
    make_weighted_linear,
)
from .paths import DiscretePath, PathSegment, TimeGrid, delayed_segment, pseudometric, stop_path, sup_norm
from .rng import BrownianEnsemble

__version__ = "0.1.0"
