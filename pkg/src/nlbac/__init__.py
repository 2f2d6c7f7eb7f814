"""Safe actor-critic control with a learned neural ODE model, barrier and Lyapunov constraints."""
from .car_env import CarFollowingEnv, EnvConfig
from .constrained_opt import MultiplierState, controller_loss
from .diff_core import IntegratorConfig, MlpParams, integrate
from .node_model import NodeModel
from .safety import CbfSpec, car_barriers, phi_chain
from .trainer import TrainConfig, Trainer, load_config

__all__ = ["CarFollowingEnv", "EnvConfig", "MultiplierState", "controller_loss",
           "IntegratorConfig", "MlpParams", "integrate", "NodeModel", "CbfSpec",
           "car_barriers", "phi_chain", "TrainConfig", "Trainer", "load_config"]
