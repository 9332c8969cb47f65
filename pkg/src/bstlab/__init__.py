"""Desk-scale offline RL lab: TD3 with behavioral supervisor tuning.

The package trains a Morse-kernel uncertainty model on an offline dataset,
then uses its certainty scores to weight a behavioral-cloning term inside a
twin-critic actor-critic learner. Toy environments, dataset tooling and an
ablation harness round it out.
"""

from .agent import BCPolicy, TD3BST, evaluate
from .datasets import ReplayDataset, four_mode_dataset, load_dataset, save_dataset
from .envs import EnvSpec, generate_maze_dataset, make_env
from .errors import (
    BstError,
    ConfigError,
    DimensionError,
    FormatError,
    NumericError,
    StateError,
    UnsupportedError,
)
from .kernels import KernelSpec
from .morse import MorseNet

__version__ = "0.1.0"

__all__ = [
    "BCPolicy",
    "BstError",
    "ConfigError",
    "DimensionError",
    "EnvSpec",
    "FormatError",
    "KernelSpec",
    "MorseNet",
    "NumericError",
    "ReplayDataset",
    "StateError",
    "TD3BST",
    "UnsupportedError",
    "evaluate",
    "four_mode_dataset",
    "generate_maze_dataset",
    "load_dataset",
    "make_env",
    "save_dataset",
    "__version__",
]
