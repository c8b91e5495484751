"""Terminal reward, discretized path functional, importance weights, and the
two training losses (importance-weighted cross-entropy and log-variance with a
scalar control variate).

The path functional re-evaluates the current bias on stored trajectories:
``F = 0.5 sum ||b||^2 dt - sum (b . b_bar) dt - sum b . dW`` summed over steps
and particles, with the behavior evaluations and noise increments taken from
the trajectory as constants.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .biasnet import BiasNetwork, TargetSpec, bias_graph

if TYPE_CHECKING:  # pragma: no cover
    from .dynamics import Trajectory


class ObjectiveError(Exception):
    pass


@dataclass
class PathScore:
    """Scoring fields of one trajectory; the log importance weight is
    reward + log_p0 - log_pb (softmax normalization stands in for the
    intractable constant)."""

    reward: float
    log_p0: float
    log_pb: float

    def __post_init__(self):
        if not all(np.isfinite(v) for v in (self.reward, self.log_p0, self.log_pb)):
            raise ObjectiveError("non-finite path score fields")

    @property
    def log_weight(self) -> float:
        return self.reward + self.log_p0 - self.log_pb

    @classmethod
    def from_trajectory(cls, traj: "Trajectory") -> "PathScore":
        return cls(reward=traj.reward, log_p0=traj.log_p0, log_pb=traj.log_pb)


@dataclass
class LvState:
    """Scalar control variate, jointly trained with the network."""

    w: Tensor

    @classmethod
    def fresh(cls) -> "LvState":
        return cls(w=ad.parameter(np.zeros(())))


def terminal_reward(positions_t: np.ndarray, target: TargetSpec) -> float:
    """Log-density of the endpoint under the Gaussian target, constant dropped:
    -||R_T - R_B||^2 / (2 sigma^2)."""
    positions_t = np.asarray(positions_t, dtype=np.float64)
    if positions_t.shape != target.positions.shape:
        raise ObjectiveError(
            f"endpoint shape {positions_t.shape} != target {target.positions.shape}"
        )
    diff = positions_t - target.positions
    return float(-np.sum(diff * diff) / (2.0 * target.sigma ** 2))


def f_hat(traj: "Trajectory", b_theta) -> "Tensor | float":
    """Discretized path functional of the current bias on a stored trajectory.

    ``b_theta`` is (K, n, d): a graph Tensor (differentiable result) or a
    plain array (float result, used by the consistency checks).
    """
    expected = traj.behavior_bias.shape
    if isinstance(b_theta, Tensor):
        if b_theta.shape != expected:
            raise ObjectiveError(f"bias evaluations shape {b_theta.shape} != {expected}")
        quad = ad.mul(ad.tsum(ad.square(b_theta)), ad.constant(0.5 * traj.dt))
        cross = ad.mul(ad.tsum(ad.mul(b_theta, ad.constant(traj.behavior_bias))),
                       ad.constant(traj.dt))
        noise = ad.tsum(ad.mul(b_theta, ad.constant(traj.noise)))
        return ad.sub(ad.sub(quad, cross), noise)
    b = np.asarray(b_theta, dtype=np.float64)
    if b.shape != expected:
        raise ObjectiveError(f"bias evaluations shape {b.shape} != {expected}")
    return float(0.5 * np.sum(b * b) * traj.dt
                 - np.sum(b * traj.behavior_bias) * traj.dt
                 - np.sum(b * traj.noise))


def batch_weights(scores) -> np.ndarray:
    """Softmax over log weights; accepts PathScores or raw log-weight values."""
    if len(scores) == 0:
        raise ObjectiveError("batch_weights: empty batch")
    ell = np.array([s.log_weight if isinstance(s, PathScore) else float(s)
                    for s in scores])
    ell = ell - ell.max()
    w = np.exp(ell)
    return w / w.sum()


def bias_on_trajectories(net: BiasNetwork, batch: Sequence["Trajectory"],
                         train: bool = False,
                         rng: np.random.Generator | None = None) -> list[Tensor]:
    """Evaluate the current bias on every step of every trajectory in one
    batched forward pass; returns one (K, n, d) graph tensor per trajectory."""
    if not batch:
        raise ObjectiveError("empty trajectory batch")
    K = batch[0].n_steps
    n, d = batch[0].positions.shape[1:]
    for t in batch:
        if t.n_steps != K or t.positions.shape[1:] != (n, d):
            raise ObjectiveError("trajectories in a batch must share K, n, d")
    R = np.concatenate([t.positions[:-1] for t in batch])        # (B*K, n, d)
    V = np.concatenate([t.velocities[:-1] for t in batch])
    targets = np.concatenate([np.broadcast_to(t.target.positions, (K, n, d))
                              for t in batch])
    bias, _, _, _ = bias_graph(net, R, V, targets, train=train, rng=rng)
    return [ad.take(bias, slice(i * K, (i + 1) * K)) for i in range(len(batch))]


def ce_loss(batch: Sequence["Trajectory"], net: BiasNetwork, train: bool = True,
            rng: np.random.Generator | None = None) -> Tensor:
    """Importance-weighted cross-entropy over the batch.

    Weights are the in-batch softmax of the stored log weights and are treated
    as constants (no gradient flows through them).
    """
    if not batch:
        raise ObjectiveError("ce_loss: empty batch")
    weights = batch_weights([PathScore.from_trajectory(t) for t in batch])
    b_evals = bias_on_trajectories(net, batch, train=train, rng=rng)
    loss = None
    for w, traj, b in zip(weights, batch, b_evals):
        term = ad.mul(f_hat(traj, b), ad.constant(w))
        loss = term if loss is None else ad.add(loss, term)
    return loss


def lv_loss(batch: Sequence["Trajectory"], net: BiasNetwork, lv: LvState,
            train: bool = True, rng: np.random.Generator | None = None) -> Tensor:
    """Log-variance loss (G_b - w)^2 averaged over the batch, where
    G_b = F_hat_b + reward_b; gradients reach both the network and w."""
    if not batch:
        raise ObjectiveError("lv_loss: empty batch")
    b_evals = bias_on_trajectories(net, batch, train=train, rng=rng)
    loss = None
    for traj, b in zip(batch, b_evals):
        g = ad.add(f_hat(traj, b), ad.constant(traj.reward))
        term = ad.square(ad.sub(g, lv.w))
        loss = term if loss is None else ad.add(loss, term)
    return ad.mul(loss, ad.constant(1.0 / len(batch)))
