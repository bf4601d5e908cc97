"""CalShift at desk scale: contrastive prompt tuning with Fisher and CMP penalties."""

from .calibration import CalibrationReport, ReliabilityBin, accuracy, brute_force_ece, ece
from .datagen import ShiftScenario, few_shot_split, make_scenario, sample_domain
from .losses import (
    LossBreakdown,
    calshift_gradient,
    calshift_loss,
    cmp_penalty,
    contrastive_loss,
    fisher_penalty,
)
from .model import Batch, ModelParams, ProbBatch, class_logits, init_params, predict_probs
from .trainer import RunResult, TrainConfig, evaluate, lambda_sweep, natural_gradient_step, train

__version__ = "0.1.0"
