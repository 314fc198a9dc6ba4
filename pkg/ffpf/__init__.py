from ffpf._version import VERSION
from ffpf.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from ffpf.data import Dataset, generate_dataset, load_dataset
from ffpf.gradcheck import grad_check_suite
from ffpf.model import FFPF
from ffpf.models import (
    AblationRow,
    BoxDetection,
    EpochMetrics,
    EvaluationResult,
    GradCheckReport,
    ModelConfig,
    SceneSpec,
    TrainConfig,
)
from ffpf.spectral import fourier_unit, irfft2, rfft2
from ffpf.tensor import AutodiffTape, Tensor, backward, finite_diff_check
from ffpf.train import ablate, evaluate, train

__all__ = [
    "VERSION",
    "AblationRow",
    "AutodiffTape",
    "BoxDetection",
    "Checkpoint",
    "Dataset",
    "EpochMetrics",
    "EvaluationResult",
    "FFPF",
    "GradCheckReport",
    "ModelConfig",
    "SceneSpec",
    "Tensor",
    "TrainConfig",
    "ablate",
    "backward",
    "evaluate",
    "finite_diff_check",
    "fourier_unit",
    "generate_dataset",
    "grad_check_suite",
    "irfft2",
    "load_checkpoint",
    "load_dataset",
    "rfft2",
    "save_checkpoint",
    "train",
]
