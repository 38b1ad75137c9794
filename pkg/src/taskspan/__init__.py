"""Multi-task RL with task policies composed from a shared parameter set."""

from .autodiff import Tensor, backward, no_grad
from .composition import (
    CompositionalLayer,
    CompositionalMatrix,
    ParameterSet,
    build_structured_multihead,
    compose,
    init_identical,
    init_w,
)
from .envs import PointEnv, TaskSpec, build_suite
from .replay import ReplayBuffer
from .sac import SacAgent, polyak_update
from .training import (
    LossReport,
    SpikeConfig,
    TrainConfig,
    Trainer,
    evaluate,
    maskout,
    mode_select,
    sample_simplex,
    train,
    transfer_run,
    w_reset,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "no_grad",
    "CompositionalLayer", "CompositionalMatrix", "ParameterSet",
    "build_structured_multihead", "compose", "init_identical", "init_w",
    "PointEnv", "TaskSpec", "build_suite",
    "ReplayBuffer", "SacAgent", "polyak_update",
    "LossReport", "SpikeConfig", "TrainConfig", "Trainer",
    "evaluate", "maskout", "mode_select", "sample_simplex",
    "train", "transfer_run", "w_reset",
    "__version__",
]
