"""Episodes, datasets, meta-training, evaluation and file formats."""
from .config import RunConfig, load_run_config
from .data import Dataset, Episode, SyntheticSpec, gen_synthetic, load_dataset, sample_episode, save_dataset
from .evaluation import EvalReport, evaluate, evaluate_single_branch, sweep_alpha
from .losses import branch_loss, branch_probabilities
from .tensorio import load_tensors, save_tensors
from .training import TrainingLog, meta_train, train_adaptive_fusion

__all__ = [
    "Dataset",
    "Episode",
    "EvalReport",
    "RunConfig",
    "SyntheticSpec",
    "TrainingLog",
    "branch_loss",
    "branch_probabilities",
    "evaluate",
    "evaluate_single_branch",
    "gen_synthetic",
    "load_dataset",
    "load_run_config",
    "load_tensors",
    "meta_train",
    "sample_episode",
    "save_dataset",
    "save_tensors",
    "sweep_alpha",
    "train_adaptive_fusion",
]
