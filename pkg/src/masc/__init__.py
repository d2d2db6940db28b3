"""Step-level anomaly detection and self-correction for multi-agent traces."""

__version__ = "0.1.0"

from .detector import (
    AnomalyVerdict,
    BackboneSpec,
    DetectorModel,
    StepPrediction,
    anomaly_score,
    detect,
    encode_context,
    loss_proto,
    loss_recon,
    predict_next,
    score_trajectory,
    total_loss,
    update_prototype,
)
from .embedding import (
    EmbedderSpec,
    embed_step,
    embed_text,
    embed_texts,
    embed_trajectory,
    hashing_embed,
)
from .trace import (
    DatasetSplit,
    Step,
    Trajectory,
    error_position_histogram,
    load_trajectories,
    parse_trajectory,
    save_trajectories,
    serialize_trajectory,
    split_dataset,
)
from .training import (
    PROFILES,
    Calibration,
    TrainConfig,
    TrainReport,
    calibrate_threshold,
    train,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .correction import (
    CorrectionPolicySpec,
    CorrectionRequest,
    CorrectionResult,
    apply_correction,
    build_correction_prompt,
    parse_correction_response,
)
from .evaluation import (
    MetricsReport,
    ScoredStep,
    auc_roc,
    compute_metrics,
    embedding_distance_diagnostics,
    score_histogram,
    step_accuracy,
)
from .simulator import (
    AgentSpec,
    FaultSpec,
    MascHook,
    RunReport,
    Topology,
    inject_fault,
    run_trajectory,
    schedule,
)
from .experiment import ExperimentConfig, MascSettings, batch_experiment

__all__ = [
    "AgentSpec",
    "AnomalyVerdict",
    "BackboneSpec",
    "Calibration",
    "CorrectionPolicySpec",
    "CorrectionRequest",
    "CorrectionResult",
    "DatasetSplit",
    "DetectorModel",
    "EmbedderSpec",
    "ExperimentConfig",
    "FaultSpec",
    "MascHook",
    "MascSettings",
    "MetricsReport",
    "PROFILES",
    "RunReport",
    "ScoredStep",
    "Step",
    "StepPrediction",
    "Topology",
    "TrainConfig",
    "TrainReport",
    "Trajectory",
    "anomaly_score",
    "apply_correction",
    "auc_roc",
    "batch_experiment",
    "build_correction_prompt",
    "calibrate_threshold",
    "compute_metrics",
    "detect",
    "embed_step",
    "embed_text",
    "embed_texts",
    "embed_trajectory",
    "embedding_distance_diagnostics",
    "encode_context",
    "error_position_histogram",
    "hashing_embed",
    "inject_fault",
    "load_checkpoint",
    "load_trajectories",
    "loss_proto",
    "loss_recon",
    "parse_correction_response",
    "parse_trajectory",
    "predict_next",
    "run_trajectory",
    "save_checkpoint",
    "save_trajectories",
    "schedule",
    "score_histogram",
    "score_trajectory",
    "serialize_trajectory",
    "split_dataset",
    "step_accuracy",
    "total_loss",
    "train",
    "update_prototype",
]
