"""Uncertainty-aware, second-order gradient scheduling for simulated fog clusters."""

from .autodiff import Tensor, grad, hvp
from .nn import AdamW, FcnModel, LstmModel, NpnModel, aleatoric_loss, mse_loss
from .optim import (HessianState, OptimizerConfig, discretize, first_order_minimize,
                    hutchinson_diag, second_order_minimize)
from .schedulers import (CoSimScheduler, GradientScheduler, ObjectiveSpec, RandomScheduler,
                         objective_score)
from .sim import (ClusterState, ConfigurationError, ContractError, HostSpec, IntervalMetrics,
                  Simulator, Task, WorkloadGenerator, jain_index, nearest_rank_percentile)
from .surrogate import (ExplorationState, FcnSurrogate, SurrogateBundle, lcb, update_exploration,
                        value_at_risk)

__version__ = "0.1.0"

__all__ = [
    "Tensor", "grad", "hvp", "AdamW", "FcnModel", "LstmModel", "NpnModel", "aleatoric_loss",
    "mse_loss", "HessianState", "OptimizerConfig", "discretize", "first_order_minimize",
    "hutchinson_diag", "second_order_minimize", "CoSimScheduler", "GradientScheduler",
    "ObjectiveSpec", "RandomScheduler", "objective_score", "ClusterState", "ConfigurationError",
    "ContractError", "HostSpec", "IntervalMetrics", "Simulator", "Task", "WorkloadGenerator",
    "jain_index", "nearest_rank_percentile", "ExplorationState", "FcnSurrogate",
    "SurrogateBundle", "lcb", "update_exploration", "value_at_risk",
]
