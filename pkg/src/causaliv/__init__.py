"""Causal feature extraction from adversarial examples via instrumental-variable
regression, with causal-feature inoculation for defense training."""

from .amr import (
    AmrBatch,
    AmrFitConfig,
    amr_moment,
    amr_residual,
    compute_instrument,
    fit_amr_gmm,
    log_likelihood_project,
)
from .analysis import (
    ConjunctionSet,
    DiagnosticsReport,
    confidence_profile,
    conjunction_features,
    conjunction_robustness,
    imbalance_ratio,
    iv_diagnostics,
    rademacher_distance,
)
from .attacks import (
    EVAL_PGD,
    TRAIN_PGD,
    PerturbationBudget,
    cw_linf,
    evaluate_robustness,
    fgsm,
    pgd,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import DEFAULT_CONFIG, load_config, parse_pixels
from .data import Dataset, generate_shapes, load_dataset
from .defense import DefenseConfig, cafe_regularizer, defense_loss, train_defense

# the defense trainer doubles as the baseline/CAFE entry point
train_cafe = train_defense
from .inversion import (
    CausalInversionResult,
    InversionArchive,
    build_inversion_archive,
    invert_causal,
)
from .ivcore import (
    GmmFitConfig,
    MomentEstimate,
    ScalarIVDataset,
    gmm_minimax_fit,
    moment_value,
    ols_fit,
    simulate_linear_dgp,
    twosls_fit,
)
from .models import (
    FeatureMap,
    HypothesisModel,
    ImageBatch,
    SplitClassifier,
    TestFunction,
    build_classifier,
    forward_split,
)
from .pipeline import emit_report, run_pipeline
from .viz import VizConfig, invert_feature, render_panel

__version__ = "0.1.0"
