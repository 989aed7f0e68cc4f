"""Recurrent dual-decoder Granger causality testing under latent confounding."""

from .datagen import GenConfig, SeriesBundle, gen_dataset1, gen_dataset2, window_split
from .estimator import BundleStandardizer, DualDecoderGrangerTest, VarGrangerTest
from .experiments import ExperimentConfig, run_verdict, seqlen_sweep, snr_bisection
from .model import ModelParams
from .stats import GrangerReport, decide_granger, var_granger_baseline, welch_ttest
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "GenConfig", "SeriesBundle", "gen_dataset1", "gen_dataset2", "window_split",
    "BundleStandardizer", "DualDecoderGrangerTest", "VarGrangerTest",
    "ExperimentConfig", "run_verdict", "seqlen_sweep", "snr_bisection",
    "ModelParams",
    "GrangerReport", "decide_granger", "var_granger_baseline", "welch_ttest",
    "TrainConfig", "load_checkpoint", "save_checkpoint", "train",
]
