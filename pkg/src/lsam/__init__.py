"""Latent space attention for classification with missing data."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .baselines import SubsetSpec, train_ensemble
from .corruption import CorruptionSpec, corrupt
from .data import FeatureSchema, SplitSpec, TabularDataset, load_csv, split, standardize, write_csv
from .model import LsamConfig, LsamModel
from .spiral import SpiralConfig, gen_spiral
from .training import TrainConfig, train

__all__ = [
    "__version__",
    "CorruptionSpec",
    "FeatureSchema",
    "LsamConfig",
    "LsamModel",
    "SplitSpec",
    "SpiralConfig",
    "SubsetSpec",
    "TabularDataset",
    "TrainConfig",
    "corrupt",
    "gen_spiral",
    "load_csv",
    "split",
    "standardize",
    "train",
    "train_ensemble",
    "write_csv",
]
