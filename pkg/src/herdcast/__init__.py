"""Predict herders' upcoming target choices from simulated herding trials, and explain the predictions."""

from .dataset import SampleSet, SplitConfig, Standardizer, assemble_split, build_pool, read_hxs, write_hxs
from .explain import ShapleyExplainer, kendall_tau, shapley_exact, shapley_sample
from .features import FEATURE_NAMES, N_FEATURES, extract_features, trial_features
from .ingest import Trial, auto_label, read_trials, write_trials
from .nn import LstmModel
from .sim import PolicyKind, WorldConfig, run_trial, simulate_batch
from .train import LSTMClassifier, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "FEATURE_NAMES", "LSTMClassifier", "LstmModel", "N_FEATURES", "PolicyKind", "SampleSet", "ShapleyExplainer",
    "SplitConfig", "Standardizer", "Trial", "WorldConfig", "assemble_split", "auto_label", "build_pool",
    "extract_features", "kendall_tau", "load_checkpoint", "read_hxs", "read_trials", "run_trial",
    "save_checkpoint", "shapley_exact", "shapley_sample", "simulate_batch", "trial_features", "write_hxs",
    "write_trials",
]
