"""Trajectory-learning engine: an entangled bias force over all particles'
positions and velocities steers controlled Langevin dynamics from an initial
to a target distribution, trained with an importance-weighted cross-entropy
objective over path measures."""

__version__ = "0.1.0"

from .autodiff import AdamState, Tensor, adam_step, gradients
from .biasnet import BiasNetwork, BiasOutput, TargetSpec, compute_bias, kabsch_align
from .buffer import ReplayBuffer
from .dynamics import DynamicsParams, SystemState, Trajectory, rollout, rollout_many
from .energy import DoubleWell, MullerBrown, RbfManifold, fit_rbf_manifold
from .metrics import MetricsConfig, rbf_mmd, rmsd, thp, wasserstein
from .objective import LvState, PathScore, batch_weights, ce_loss, f_hat, lv_loss, terminal_reward
from .trainer import TrainConfig, TrainReport, infer, train

__all__ = [
    "AdamState", "Tensor", "adam_step", "gradients",
    "BiasNetwork", "BiasOutput", "TargetSpec", "compute_bias", "kabsch_align",
    "ReplayBuffer",
    "DynamicsParams", "SystemState", "Trajectory", "rollout", "rollout_many",
    "DoubleWell", "MullerBrown", "RbfManifold", "fit_rbf_manifold",
    "MetricsConfig", "rbf_mmd", "rmsd", "thp", "wasserstein",
    "LvState", "PathScore", "batch_weights", "ce_loss", "f_hat", "lv_loss", "terminal_reward",
    "TrainConfig", "TrainReport", "infer", "train",
]
