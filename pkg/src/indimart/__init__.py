"""Martingales on finite filtered spaces, split into martingales with independent increments."""

from .decompose import (
    Decomposition,
    best_independent_approx,
    closed_tail,
    corpus_instance,
    corpus_params,
    decompose_martingale,
    generate_random_martingale,
    stage_decompose,
)
from .errors import (
    DegenerateStageError,
    DomainError,
    IndimartError,
    InvariantError,
    MeasurabilityError,
    PreconditionError,
    SchemaError,
)
from .space import (
    DiscreteLaw,
    Filtration,
    Partition,
    Refinement,
    WeightedSpace,
    cond_exp,
    conditional_law,
    is_martingale,
    law,
    lift,
    refine,
)
from .transport import Coupling, barycenter, optimal_coupling, w2_sq
from .verify import Report, check_independence_of_past, check_mutual_independence, run_full_report

__version__ = "0.1.0"
