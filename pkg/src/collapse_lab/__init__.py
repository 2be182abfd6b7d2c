"""Desk-scale one-shot pruning lab: signal collapse and BN recalibration."""

from .core_math import (FisherBlock, StreamingStats, fisher_inverse_vector, make_rng, stats_accumulate,
                        stats_merge)
from .datasets import Dataset, gen_blobs, gen_spirals, load_idx
from .diagnostics import (cumulative_variance_projection, detect_signal_collapse, normalized_hamming,
                          prediction_histogram, variance_ratio_report)
from .errors import (CollapseLabError, ConfigError, FormatError, InputError, NumericError,
                     PreconditionError, ShapeError)
from .model import BNMode, Model, ModelConfig, forward, init_model, load_checkpoint, save_checkpoint
from .pruning import (ScoreMethod, UpdateMode, build_mask, estimate_fisher, joint_obs_update,
                      obs_single_update, prune_pipeline, score_weights)
from .reflow import CalibrationMode, CalibrationSpec, apply_reflow, collect_bn_stats, reflow
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BNMode", "CalibrationMode", "CalibrationSpec", "CollapseLabError", "ConfigError", "Dataset",
    "FisherBlock", "FormatError", "InputError", "Model", "ModelConfig", "NumericError",
    "PreconditionError", "ScoreMethod", "ShapeError", "StreamingStats", "TrainConfig", "UpdateMode",
    "apply_reflow", "build_mask", "collect_bn_stats", "cumulative_variance_projection",
    "detect_signal_collapse", "estimate_fisher", "fisher_inverse_vector", "forward", "gen_blobs",
    "gen_spirals", "init_model", "joint_obs_update", "load_checkpoint", "load_idx", "make_rng",
    "normalized_hamming", "obs_single_update", "prediction_histogram", "prune_pipeline", "reflow",
    "save_checkpoint", "score_weights", "stats_accumulate", "stats_merge", "train",
    "variance_ratio_report",
]
