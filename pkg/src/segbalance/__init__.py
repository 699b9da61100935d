"""Class-rebalance training and imbalance diagnostics for long-tailed
semantic segmentation: exact confusion-matrix metrics, dataset imbalance
profiling, a differentiable rebalance loss engine, a desk-scale trainer,
and a deterministic synthetic scene generator."""

from .metrics import (
    IGNORE_LABEL,
    ClassAbsentError,
    ClassCounts,
    ConfusionMatrix,
    DeltaReport,
    EvalReport,
    ImprovementCheck,
    PremiseError,
    RebalanceScenario,
    acc,
    delta_report,
    fp_tp_sweep,
    iou,
    iou_improvement_check,
)
from .stats import (
    FrequencyTable,
    ImbalanceError,
    ImbalanceSummary,
    accuracy_frequency_correlation,
    imbalance,
    pearson,
    profile,
)
from .losses import (
    LossConfig,
    RegionBatch,
    balanced_softmax_ce,
    combined_loss,
    inverse_frequency_weights,
    region_loss,
    region_pool,
    region_pool_backward,
    reweighted_ce,
    softmax_ce,
)
from .model import (
    DivergenceError,
    PixelClassifier,
    TrainConfig,
    TrainResult,
    evaluate,
    load_checkpoint,
    poly_lr,
    save_checkpoint,
    train,
)
from .synthdata import GeneratedDataset, GenerationError, SceneSpec, generate
from .experiment import DEFAULT_CONFIG, ExperimentConfig, parse_config, run_experiment

__version__ = "0.1.0"
