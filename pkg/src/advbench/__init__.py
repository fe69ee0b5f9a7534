"""Desk-scale benchmark of gradient attacks against logit-statistics detectors."""

from .attacks import AttackConfig, LogitProfile, attack_samples, compute_profiles, pgd
from .autodiff import Tensor
from .config import ExperimentConfig
from .data import Dataset, load_external, save_dataset, synth_dataset
from .detectors import (
    CalibrationStats,
    DetectionOutcome,
    DetectorModel,
    ThresholdTable,
    build_feature,
    calibrate_thresholds,
    stat_test_detect,
    stat_test_score,
    train_detector,
)
from .models import Model, TrainReport, predict, train
from .noise import LogitSummary, NoiseConfig, benign_calibration, logit_summary, make_noisy

__version__ = "0.1.0"
