"""Gradient-sign transfer attacks with input transformations, built on a
small numpy autodiff engine and trainable CNN classifiers."""

from .attacks import (
    AdversaryResult,
    AttackConfig,
    AttackRng,
    Ensemble,
    admix_attack,
    aggregate_gradient,
    attack_config,
    ensemble_grad,
    fgsm,
    ifgsm,
    mifgsm,
    run_attack,
)
from .data import Dataset, generate_synthetic_dataset
from .errors import (
    AdmixError,
    CheckpointError,
    ConfigError,
    DatasetFormatError,
    GraphError,
    LabelError,
    NonFiniteError,
    ReportError,
    SamplingError,
    ShapeError,
    ZeroGradientError,
)
from .harness import ReportRow, RunConfig, evaluate_attack, read_report, sweep_ablation, write_report
from .models import Model, ModelSpec, builtin_spec, load_checkpoint, load_model, save_checkpoint, train
from .tensor import Tape, Tensor
from .transforms import SamplePool, TransformConfig

__all__ = [
    "admix_attack", "AdmixError", "AdversaryResult", "aggregate_gradient", "attack_config",
    "AttackConfig", "AttackRng", "builtin_spec", "CheckpointError", "ConfigError", "Dataset",
    "DatasetFormatError", "Ensemble", "ensemble_grad", "evaluate_attack", "fgsm",
    "generate_synthetic_dataset", "GraphError", "ifgsm", "LabelError", "load_checkpoint",
    "load_model", "mifgsm", "Model", "ModelSpec", "NonFiniteError", "read_report", "ReportError",
    "ReportRow", "run_attack", "RunConfig", "SamplePool", "SamplingError", "save_checkpoint",
    "ShapeError", "sweep_ablation", "Tape", "Tensor", "train", "TransformConfig", "write_report",
    "ZeroGradientError",
]

__version__ = "0.1.0"
