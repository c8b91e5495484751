"""Controlled Langevin integration (first- and second-order) with exact
discrete transition log-densities and linear temperature annealing.

Convention: the control u enters the SDE as sigma * u, so the discrete
Girsanov sum ``sum_k [u . dW_k + 0.5 ||u||^2 dt]`` relates the behavior and
base path log-densities exactly.  In overdamped mode the stored velocities are
the unconditional drift velocities ``-grad U / gamma`` (the velocity signal the
bias network conditions on); in underdamped mode they are the integrated
velocity state and the noise acts on the velocity channel only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .biasnet import TargetSpec
from .objective import terminal_reward

LOG_2PI = float(np.log(2.0 * np.pi))


class DynamicsError(Exception):
    pass


class RolloutError(DynamicsError):
    def __init__(self, step_index: int, message: str):
        super().__init__(f"step {step_index}: {message}")
        self.step_index = step_index


@dataclass
class SystemState:
    positions: np.ndarray   # (n, d)
    velocities: np.ndarray  # (n, d)
    t_index: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.velocities = np.asarray(self.velocities, dtype=np.float64)
        if self.positions.shape != self.velocities.shape or self.positions.ndim != 2:
            raise DynamicsError(
                f"state shapes disagree: R{self.positions.shape} V{self.velocities.shape}"
            )
        if not (np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.velocities))):
            raise DynamicsError("non-finite entries in system state")


@dataclass
class DynamicsParams:
    mode: str            # "overdamped" | "underdamped"
    gamma: float
    tau_start: float
    tau_end: float
    dt: float
    n_steps: int
    k_b: float = 1.0
    masses: np.ndarray | float = 1.0

    def __post_init__(self):
        if self.mode not in ("overdamped", "underdamped"):
            raise DynamicsError(f"unknown dynamics mode '{self.mode}'")
        if self.gamma <= 0 or self.dt <= 0 or self.n_steps < 1:
            raise DynamicsError("gamma, dt must be positive and n_steps >= 1")
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise DynamicsError("temperatures must be positive")
        if np.any(np.asarray(self.masses) <= 0):
            raise DynamicsError("masses must be positive")

    def mass_column(self, n: int) -> np.ndarray:
        m = np.asarray(self.masses, dtype=np.float64)
        if m.ndim == 0:
            return np.full((n, 1), float(m))
        if m.shape != (n,):
            raise DynamicsError(f"masses shape {m.shape} != ({n},)")
        return m[:, None]

    def temperature(self, k: int) -> float:
        if self.n_steps == 1:
            return self.tau_start
        frac = k / (self.n_steps - 1)
        return self.tau_start + (self.tau_end - self.tau_start) * frac

    def noise_scale(self, k: int, n: int) -> np.ndarray:
        """Per-particle diffusion scale sigma_k, shape (n,)."""
        tau = self.temperature(k)
        if self.mode == "overdamped":
            return np.full(n, np.sqrt(2.0 * self.k_b * tau / self.gamma))
        m = self.mass_column(n)[:, 0]
        return np.sqrt(2.0 * self.gamma * self.k_b * tau / m)


@dataclass
class Trajectory:
    """A discrete path with everything the objectives need to re-weight it."""

    positions: np.ndarray       # (K+1, n, d)
    velocities: np.ndarray      # (K+1, n, d)
    noise: np.ndarray           # (K, n, d) Brownian increments
    behavior_bias: np.ndarray   # (K, n, d) behavior control evaluations
    sigma: np.ndarray           # (K, n) per-step diffusion scales
    log_p0: float
    log_pb: float
    reward: float
    target: TargetSpec
    seed: int
    dt: float
    mode: str

    @property
    def n_steps(self) -> int:
        return self.noise.shape[0]

    @property
    def endpoint(self) -> np.ndarray:
        return self.positions[-1]

    def state(self, k: int) -> SystemState:
        return SystemState(self.positions[k], self.velocities[k], t_index=k)

    def validate(self) -> None:
        k, n, d = self.noise.shape
        if self.positions.shape != (k + 1, n, d) or self.velocities.shape != (k + 1, n, d):
            raise DynamicsError("trajectory arrays have inconsistent shapes")
        if self.behavior_bias.shape != (k, n, d) or self.sigma.shape != (k, n):
            raise DynamicsError("trajectory arrays have inconsistent shapes")
        for name in ("positions", "velocities", "noise", "behavior_bias", "sigma"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DynamicsError(f"non-finite entries in trajectory field '{name}'")
        for name in ("log_p0", "log_pb", "reward"):
            if not np.isfinite(getattr(self, name)):
                raise DynamicsError(f"non-finite trajectory log field '{name}'")


def transition_logdensity(x_k: np.ndarray, x_next: np.ndarray, mean_drift: np.ndarray,
                          sigma: np.ndarray, dt: float) -> float:
    """Exact Gaussian log-density of one Euler step on the stochastic channel.

    The step distribution is N(x_k + mean_drift * dt, sigma^2 dt) per
    component, with sigma per particle (broadcast over the d axis).
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise DynamicsError("transition_logdensity: sigma must be positive")
    var = (sigma ** 2 * dt)[:, None]
    resid = x_next - (x_k + mean_drift * dt)
    return float(-0.5 * np.sum(resid * resid / var + np.log(var) + LOG_2PI))


def step(state: SystemState, drift_f: np.ndarray, control_u: np.ndarray,
         params: DynamicsParams, k: int, rng: np.random.Generator | None = None,
         noise: np.ndarray | None = None) -> tuple[SystemState, np.ndarray]:
    """One Euler-Maruyama update.  ``noise`` overrides the rng draw (tests)."""
    n, d = state.positions.shape
    if not np.all(np.isfinite(drift_f)):
        raise RolloutError(k, "non-finite force")
    if noise is None:
        if rng is None:
            raise DynamicsError("step: provide rng or explicit noise")
        noise = rng.normal(0.0, np.sqrt(params.dt), (n, d))
    sig = params.noise_scale(k, n)[:, None]
    u = np.zeros((n, d)) if control_u is None else control_u
    if params.mode == "overdamped":
        r_next = state.positions + (drift_f + sig * u) * params.dt + sig * noise
        v_next = state.velocities
    else:
        v_next = state.velocities + (drift_f - params.gamma * state.velocities
                                     + sig * u) * params.dt + sig * noise
        r_next = state.positions + v_next * params.dt
    return SystemState(r_next, v_next, t_index=state.t_index + 1), noise


ControlFn = Callable[[np.ndarray, np.ndarray, Sequence[TargetSpec]], np.ndarray]


def rollout_many(control: ControlFn | None, initial: Sequence[SystemState],
                 targets: Sequence[TargetSpec], params: DynamicsParams,
                 potential, base_seed: int) -> list[Trajectory]:
    """Roll out one trajectory per initial state, in lockstep.

    Trajectory i draws its noise from its own generator seeded
    ``base_seed + i``, so results are independent of batching.  ``control``
    maps batched (M, n, d) positions/velocities plus the targets to a batched
    control; ``None`` reproduces the base measure.
    """
    m = len(initial)
    if m == 0 or len(targets) != m:
        raise DynamicsError("rollout_many: need matching nonempty initial states and targets")
    n, d = initial[0].positions.shape
    for st, tg in zip(initial, targets):
        if st.positions.shape != (n, d) or tg.positions.shape != (n, d):
            raise DynamicsError("rollout_many: inconsistent particle shapes")
    K = params.n_steps
    gens = [np.random.default_rng(base_seed + i) for i in range(m)]
    mass = params.mass_column(n)

    R = np.stack([st.positions for st in initial])
    V = np.stack([st.velocities for st in initial])
    positions = np.empty((m, K + 1, n, d))
    velocities = np.empty((m, K + 1, n, d))
    noise = np.empty((m, K, n, d))
    bias = np.empty((m, K, n, d))
    sig_rows = np.empty((K, n))
    log_p0 = np.zeros(m)
    log_pb = np.zeros(m)
    positions[:, 0] = R
    velocities[:, 0] = V

    def drift(pos: np.ndarray, k: int) -> np.ndarray:
        _, grad = potential.value_grad(pos.reshape(m * n, d))
        grad = grad.reshape(m, n, d)
        if not np.all(np.isfinite(grad)):
            raise RolloutError(k, "non-finite force")
        if params.mode == "overdamped":
            return -grad / params.gamma
        return -grad / mass

    f = drift(R, 0)
    for k in range(K):
        sig = params.noise_scale(k, n)
        sig_rows[k] = sig
        sig_col = sig[:, None]
        u = np.zeros((m, n, d)) if control is None else np.asarray(
            control(R, V, targets), dtype=np.float64)
        if u.shape != (m, n, d):
            raise RolloutError(k, f"control shape {u.shape} != {(m, n, d)}")
        if not np.all(np.isfinite(u)):
            raise RolloutError(k, "non-finite control")
        dW = np.stack([g.normal(0.0, np.sqrt(params.dt), (n, d)) for g in gens])
        var = (sig_col ** 2) * params.dt
        if params.mode == "overdamped":
            R_next = R + (f + sig_col * u) * params.dt + sig_col * dW
            V_next = V
        else:
            V_next = V + (f - params.gamma * V + sig_col * u) * params.dt + sig_col * dW
            R_next = R + V_next * params.dt
        # the base-measure residual is the behavior residual plus the control
        # displacement; this form keeps log_pb == log_p0 bitwise when u = 0
        resid_b = sig_col * dW
        resid_0 = resid_b + sig_col * u * params.dt
        norm_term = float(d * np.sum(np.log(sig ** 2 * params.dt) + LOG_2PI))
        log_pb += -0.5 * (np.sum(resid_b * resid_b / var, axis=(1, 2)) + norm_term)
        log_p0 += -0.5 * (np.sum(resid_0 * resid_0 / var, axis=(1, 2)) + norm_term)
        noise[:, k] = dW
        bias[:, k] = u
        positions[:, k + 1] = R_next
        R = R_next
        f = drift(R, k + 1)
        # overdamped velocities are the unconditional drift at the new position
        V = f if params.mode == "overdamped" else V_next
        velocities[:, k + 1] = V

    out = []
    for i in range(m):
        traj = Trajectory(
            positions=positions[i], velocities=velocities[i], noise=noise[i],
            behavior_bias=bias[i], sigma=sig_rows.copy(),
            log_p0=float(log_p0[i]), log_pb=float(log_pb[i]),
            reward=terminal_reward(positions[i, -1], targets[i]),
            target=targets[i], seed=base_seed + i, dt=params.dt, mode=params.mode,
        )
        traj.validate()
        out.append(traj)
    return out


def rollout(control, state0: SystemState, target: TargetSpec,
            params: DynamicsParams, potential, seed: int) -> Trajectory:
    """Single-trajectory convenience wrapper around :func:`rollout_many`."""
    return rollout_many(control, [state0], [target], params, potential, seed)[0]


# ---------------------------------------------------------------------------
# CSV export (one file per trajectory; consumed by the metrics tooling)
# ---------------------------------------------------------------------------

def write_trajectory_csv(traj: Trajectory, path: str | Path) -> None:
    k1, n, d = traj.positions.shape
    header = (["step", "particle"] + [f"x{j}" for j in range(d)]
              + [f"v{j}" for j in range(d)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(k1):
            for i in range(n):
                row = [k, i]
                row += [repr(float(v)) for v in traj.positions[k, i]]
                row += [repr(float(v)) for v in traj.velocities[k, i]]
                w.writerow(row)


def read_trajectory_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read one trajectory CSV back into (positions, velocities) arrays."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    d = sum(1 for c in header if c.startswith("x"))
    body = rows[1:]
    steps = 1 + max(int(r[0]) for r in body)
    n = 1 + max(int(r[1]) for r in body)
    positions = np.empty((steps, n, d))
    velocities = np.empty((steps, n, d))
    for r in body:
        k, i = int(r[0]), int(r[1])
        positions[k, i] = [float(v) for v in r[2:2 + d]]
        velocities[k, i] = [float(v) for v in r[2 + d:2 + 2 * d]]
    return positions, velocities
