"""Black-box adversarial attack engine for object detectors.

Searches an L-infinity bounded perturbation that suppresses true-positive
detections while preserving false positives, using a two-member evolutionary
search with random patch sampling and divide-and-conquer refinement, under a
strict query budget. Ships a deterministic synthetic detector for
experiments, a wire-protocol client for real detectors, and an executable
verification harness for the underlying subset-selection approximation
bounds.
"""

from .detection import (
    BoundingBox,
    Detection,
    GroundTruthObject,
    MatchResult,
    average_precision,
    iou,
    match_detections,
)
from .initpop import (
    DEFAULT_EPSILON,
    Momentum,
    Perturbation,
    SmoothingKernel,
    build_mixed_population,
    cross_entropy_objective,
    load_seed_perturbation,
    save_seed_perturbation,
    ti_sign_step,
)
from .objective import (
    FitnessValue,
    FitnessWeights,
    SubFitness,
    cw_margin,
    individual_fitness,
    subcomponent_fitness,
)
from .oracle import (
    BudgetExhausted,
    ImageTensor,
    OracleUnavailable,
    QueryBudget,
    SyntheticDetector,
    SyntheticDetectorSpec,
    UnsupportedOracle,
    detect,
    detect_clipped,
    gradient,
    perturbed,
)
from .search import (
    AttackTrace,
    GAParams,
    PatchIndex,
    Population,
    attack,
    dc_ga,
    partition_patch,
    random_subset_step,
    side_length,
)
from .subsetsel import (
    BoundReport,
    PartitionScheme,
    SetFunctionInstance,
    alpha_ratio,
    brute_force_opt,
    dc_subset_select,
    gamma_ratio,
)

__version__ = "0.1.0"
