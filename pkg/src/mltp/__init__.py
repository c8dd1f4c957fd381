"""Meta-learning based training procedure (MLTP) on a small higher-order autodiff core."""

from .autodiff import Node, grad, no_grad
from .data import Batch, Dataset, TaskPair, make_synth, split_task_pair
from .errors import (ConfigError, IngestionError, InvalidInputError, MLTPError, NumericError,
                     OracleError, PrecisionError)
from .gradcheck import finite_diff_grad
from .kernels import BACKEND
from .meta import (AlphaSet, ObjectiveConfig, TrainState, inner_step, mltp_grads, mltp_objective,
                   regularized_objective, taylor_objective, task_loss, train_step)
from .nn import LayerSpec, NetworkSpec, ParamSet, cnet, forward, init_params, mlp, select_mask
from .optim import OptimizerSpec, OptimizerState, apply_update, lr_at

__version__ = "0.1.0"

__all__ = [
    "Node",
    "grad",
    "no_grad",
    "Batch",
    "Dataset",
    "TaskPair",
    "make_synth",
    "split_task_pair",
    "ConfigError",
    "IngestionError",
    "InvalidInputError",
    "MLTPError",
    "NumericError",
    "OracleError",
    "PrecisionError",
    "finite_diff_grad",
    "BACKEND",
    "AlphaSet",
    "ObjectiveConfig",
    "TrainState",
    "inner_step",
    "mltp_grads",
    "mltp_objective",
    "regularized_objective",
    "taylor_objective",
    "task_loss",
    "train_step",
    "LayerSpec",
    "NetworkSpec",
    "ParamSet",
    "cnet",
    "forward",
    "init_params",
    "mlp",
    "select_mask",
    "OptimizerSpec",
    "OptimizerState",
    "apply_update",
    "lr_at",
]
