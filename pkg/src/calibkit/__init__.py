"""Calibration toolkit: ECE measurement, finite-support calibration theory
checks, and EM-based calibration-aware training on toy policies."""

from .core import (
    BinningConfig,
    CalibrationError,
    ConfidenceVector,
    Dataset,
    PredictionRecord,
    argmax_option,
    bin_index,
    normalize_options,
    validate_dataset,
)
from .metrics import (
    BinStats,
    CalibrationReport,
    PairwisePreferenceRecord,
    accuracy,
    build_report,
    conf_ece,
    cw_ece,
    mc_ece_population,
    reliability_diagram,
    sequence_logprob,
    win_rate,
)
from .genmodel import (
    FiniteGenerativeModel,
    Predictor,
    RegimeClassification,
    classify_regime,
    construct_bound_predictor,
    lower_bound_constant,
    make_model,
    sample_dataset,
    tce,
    verify_ece_le_tce,
)
from .targetmap import (
    MappingParams,
    TargetDistribution,
    build_target,
    compute_gamma,
    rank_condition,
    solve_alpha_beta,
    solve_mapping_params,
)
from .emcal import (
    BinAccuracy,
    EmConfig,
    LatentAssignment,
    build_all_targets,
    e_step,
    ece_loss,
    m_step,
    run_em,
    sft_loss,
)
from .toylab import (
    LinearPolicy,
    TabularPolicy,
    ToyTask,
    apply_temperature,
    fit_temperature,
    forward,
    gen_toy_task,
    grad_combined,
    label_smooth_targets,
    tradeoff_study,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "BinningConfig",
    "CalibrationError",
    "ConfidenceVector",
    "Dataset",
    "PredictionRecord",
    "argmax_option",
    "bin_index",
    "normalize_options",
    "validate_dataset",
    "BinStats",
    "CalibrationReport",
    "PairwisePreferenceRecord",
    "accuracy",
    "build_report",
    "conf_ece",
    "cw_ece",
    "mc_ece_population",
    "reliability_diagram",
    "sequence_logprob",
    "win_rate",
    "FiniteGenerativeModel",
    "Predictor",
    "RegimeClassification",
    "classify_regime",
    "construct_bound_predictor",
    "lower_bound_constant",
    "make_model",
    "sample_dataset",
    "tce",
    "verify_ece_le_tce",
    "MappingParams",
    "TargetDistribution",
    "build_target",
    "compute_gamma",
    "rank_condition",
    "solve_alpha_beta",
    "solve_mapping_params",
    "BinAccuracy",
    "EmConfig",
    "LatentAssignment",
    "build_all_targets",
    "e_step",
    "ece_loss",
    "m_step",
    "run_em",
    "sft_loss",
    "LinearPolicy",
    "TabularPolicy",
    "ToyTask",
    "apply_temperature",
    "fit_temperature",
    "forward",
    "gen_toy_task",
    "grad_combined",
    "label_smooth_targets",
    "tradeoff_study",
    "train",
]
