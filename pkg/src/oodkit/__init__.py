"""Softmax-energy OOD scoring, class-weighted open-set metrics, and
margin-based training on a seeded synthetic benchmark."""

from .data import (
    ClassWeights,
    DataFormatError,
    Dataset,
    LogitRecord,
    compute_class_weights,
    load_dataset,
    save_dataset,
    split_view,
)
from .losses import (
    GradCheckResult,
    LmclHead,
    MarginSchedule,
    SmeLossConfig,
    calibrate_hinge_margins,
    ce_loss,
    combined_objective,
    lmcl_logits,
    lmcl_loss,
    numeric_gradient,
    run_gradient_checks,
    sme_hinge_loss,
)
from .metrics import (
    SweepPoint,
    WeightedMetricReport,
    eer,
    eerc,
    fpr95,
    full_report,
    id_accuracy,
    sweep_table,
    with_unit_weights,
)
from .scoring import (
    ScoreMethod,
    ScoredSample,
    energy,
    format_method,
    id_score,
    msp,
    parse_method,
    score_dataset,
    sme,
    sme_bounds,
    top_k_logit_profile,
)
from .synth import SynthDataset, SynthSpec, class_imbalance, generate
from .train import (
    ToyModel,
    TrainConfig,
    TrainLog,
    TrainingDivergedError,
    evaluate,
    load_model,
    save_model,
    sweep_temperature,
    train,
)

__version__ = "0.1.0"
