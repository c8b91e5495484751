"""Outer training loop (alternating rollout and gradient phases) and the
inference procedure for trained checkpoints.

Each rollout phase freezes the current parameters as the behavior control,
simulates a batch of trajectories with per-trajectory rng streams, scores and
buffers them, then runs ``n_epochs`` gradient steps on importance-weighted
buffer batches.  A checkpoint is emitted after every rollout.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, adam_step, clip_gradients, gradients
from .biasnet import BiasNetwork, TargetSpec, bias_graph
from .buffer import ReplayBuffer
from .dynamics import DynamicsParams, SystemState, Trajectory, rollout_many
from .energy import load_potential, read_point_cloud
from .kernels import pairwise_sq_dists
from .objective import LvState, PathScore, ce_loss, lv_loss


class ConfigError(Exception):
    pass


class TrainError(Exception):
    pass


@dataclass
class TrainConfig:
    # outer loop
    n_rollouts: int = 100
    n_epochs: int = 1000
    n_samples: int = 64          # trajectories per rollout
    batch_size: int = 64
    buffer_capacity: int = 1000
    # dynamics
    dt: float = 0.01
    n_steps: int = 100
    n_particles: int = 16
    dim: int = 2
    gamma: float = 2.0
    tau_start: float = 1.0
    tau_end: float = 1.0
    mass: float = 1.0
    k_b: float = 1.0
    mode: str = "overdamped"     # overdamped | underdamped
    # objective and reward
    objective: str = "ce"        # ce | lv
    sigma: float = 0.1
    # network
    hidden_dim: int = 256
    n_layers: int = 4
    n_heads: int = 8
    ff_dim: int = 512
    dropout: float = 0.1
    velocity_conditioning: bool = True
    md_mode: bool = False
    # optimization
    lr: float = 1e-4
    grad_clip: float = 10.0
    # sources
    potential: str = "double_well"
    init_source: str = ""
    target_source: str = ""
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in ("overdamped", "underdamped"):
            raise ConfigError(f"mode must be overdamped or underdamped, got '{self.mode}'")
        if self.objective not in ("ce", "lv"):
            raise ConfigError(f"objective must be ce or lv, got '{self.objective}'")
        for key in ("n_epochs", "n_samples", "batch_size", "buffer_capacity",
                    "n_steps", "n_particles", "dim", "hidden_dim", "n_layers",
                    "n_heads", "ff_dim"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        if self.n_rollouts < 0:
            raise ConfigError("n_rollouts must be nonnegative")
        for key in ("dt", "gamma", "tau_start", "tau_end", "sigma", "lr", "mass", "k_b"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive")
        if not self.init_source or not self.target_source:
            raise ConfigError("init_source and target_source are required")

    def dynamics_params(self) -> DynamicsParams:
        return DynamicsParams(mode=self.mode, gamma=self.gamma,
                              tau_start=self.tau_start, tau_end=self.tau_end,
                              dt=self.dt, n_steps=self.n_steps, k_b=self.k_b,
                              masses=self.mass)

    def build_network(self) -> BiasNetwork:
        return BiasNetwork(dim=self.dim, hidden_dim=self.hidden_dim,
                           n_layers=self.n_layers, n_heads=self.n_heads,
                           ff_dim=self.ff_dim, dropout=self.dropout,
                           velocity_conditioning=self.velocity_conditioning,
                           md_mode=self.md_mode, seed=self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in dataclasses.fields(self)]
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"invalid boolean for '{key}': {raw!r}")
    return raw


def parse_config_text(text: str, overrides: dict | None = None) -> TrainConfig:
    """Flat ``key = value`` format with '#' comments; keys are the TrainConfig
    field names.  Overrides (CLI flags) win over file values."""
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key '{key}'")
        values[key] = _coerce(key, raw)
    for key, raw in (overrides or {}).items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key '{key}'")
        values[key] = _coerce(key, str(raw))
    return TrainConfig(**values)


def load_config(path: str | Path, overrides: dict | None = None) -> TrainConfig:
    return parse_config_text(Path(path).read_text(), overrides)


@dataclass
class TrainReport:
    loss_curve: list = field(default_factory=list)     # mean loss per rollout
    reward_curve: list = field(default_factory=list)   # mean fresh-path reward per rollout
    wall_time: float = 0.0
    checkpoint_path: str = ""


# ---------------------------------------------------------------------------
# state / target sampling
# ---------------------------------------------------------------------------

class StateSampler:
    """Draws (initial state, target) pairs from the configured sources.

    Point sources ("point:x0,x1,...") tile the point over all particles.
    Cloud sources (CSV path) draw a uniformly random anchor and take its
    n-nearest-neighbor cluster, paired with an independently drawn target
    cluster by neighbor rank.
    """

    def __init__(self, config: TrainConfig, base_dir: Path | None = None):
        self.config = config
        self.init_kind, self.init_data = self._load(config.init_source, base_dir)
        self.target_kind, self.target_data = self._load(config.target_source, base_dir)

    def _load(self, spec: str, base_dir: Path | None):
        if spec.startswith("point:"):
            coords = np.array([float(v) for v in spec[len("point:"):].split(",")])
            if coords.shape != (self.config.dim,):
                raise ConfigError(f"point source has {coords.size} coords, expected {self.config.dim}")
            return "point", coords
        path = Path(spec)
        if not path.is_absolute() and base_dir is not None and not path.exists():
            path = base_dir / spec
        cloud = read_point_cloud(path)
        if cloud.shape[1] != self.config.dim:
            raise ConfigError(f"cloud {path} has dimension {cloud.shape[1]}, expected {self.config.dim}")
        if cloud.shape[0] < self.config.n_particles:
            raise ConfigError(f"cloud {path} has fewer points than n_particles")
        return "cloud", cloud

    @staticmethod
    def _nn_cluster(cloud: np.ndarray, anchor: int, n: int) -> np.ndarray:
        d2 = pairwise_sq_dists(cloud[anchor:anchor + 1], cloud)[0]
        order = np.argsort(d2, kind="stable")[:n]
        return cloud[order]

    def _draw(self, kind: str, data: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n = self.config.n_particles
        if kind == "point":
            return np.tile(data, (n, 1))
        return self._nn_cluster(data, int(rng.integers(data.shape[0])), n)

    def initial_velocities(self, rng: np.random.Generator) -> np.ndarray:
        n, d = self.config.n_particles, self.config.dim
        if self.config.mode == "underdamped":
            scale = np.sqrt(self.config.k_b * self.config.tau_start / self.config.mass)
            return rng.normal(0.0, scale, (n, d))
        return np.zeros((n, d))

    def sample_pair(self, rng: np.random.Generator) -> tuple[SystemState, TargetSpec]:
        r0 = self._draw(self.init_kind, self.init_data, rng)
        rb = self._draw(self.target_kind, self.target_data, rng)
        state = SystemState(r0, self.initial_velocities(rng))
        return state, TargetSpec(rb, self.config.sigma)


def make_controller(net: BiasNetwork):
    """Behavior control: evaluation-mode bias as a batched numpy function."""

    def control(R: np.ndarray, V: np.ndarray, targets: Sequence[TargetSpec]) -> np.ndarray:
        tgt = np.stack([t.positions for t in targets])
        bias, _, _, _ = bias_graph(net, R, V, tgt, train=False)
        return bias.data

    return control


# ---------------------------------------------------------------------------
# training / inference
# ---------------------------------------------------------------------------

def train(config: TrainConfig, out_dir: str | Path | None = None,
          base_dir: Path | None = None) -> TrainReport:
    config.validate()
    started = time.perf_counter()
    potential = load_potential(config.potential)
    sampler = StateSampler(config, base_dir)
    params = config.dynamics_params()
    net = config.build_network()
    opt_params = dict(net.parameters())
    lv = None
    lv_adam = None
    if config.objective == "lv":
        lv = LvState.fresh()
        # w must track the raw log-ratio scale (|G| can be in the hundreds);
        # it gets its own fast optimizer while gradients still flow through
        # the shared loss
        lv_adam = AdamState(lr=0.5)
    adam = AdamState(lr=config.lr)
    buf = ReplayBuffer(config.buffer_capacity)
    controller = make_controller(net)

    init_rng = np.random.default_rng(config.seed + 101)
    buffer_rng = np.random.default_rng(config.seed + 202)
    dropout_rng = np.random.default_rng(config.seed + 303)

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    def save_checkpoint() -> str:
        if out_path is None:
            return ""
        ckpt = out_path / "checkpoint.bin"
        net.save(ckpt, n=config.n_particles, extra={"train_config": config.to_dict()})
        return str(ckpt)

    report = TrainReport(checkpoint_path=save_checkpoint())
    names = list(opt_params)
    for r in range(config.n_rollouts):
        pairs = [sampler.sample_pair(init_rng) for _ in range(config.n_samples)]
        states0 = [p[0] for p in pairs]
        targets = [p[1] for p in pairs]
        base_seed = config.seed + 1 + r * config.n_samples
        try:
            trajs = rollout_many(controller, states0, targets, params, potential,
                                 base_seed)
        except Exception as exc:
            raise TrainError(f"rollout {r}: {exc}") from exc
        for traj in trajs:
            buf.push(traj, PathScore.from_trajectory(traj))
        report.reward_curve.append(float(np.mean([t.reward for t in trajs])))

        losses = []
        for _ in range(config.n_epochs):
            entries = buf.sample(config.batch_size, buffer_rng,
                                 uniform=config.objective == "lv")
            batch = [entry[0] for entry in entries]
            try:
                if config.objective == "ce":
                    loss = ce_loss(batch, net, train=True, rng=dropout_rng)
                else:
                    loss = lv_loss(batch, net, lv, train=True, rng=dropout_rng)
            except Exception as exc:
                raise TrainError(f"rollout {r}: {exc}") from exc
            value = loss.item()
            if not np.isfinite(value):
                raise TrainError(f"rollout {r}: non-finite loss")
            wanted = names + (["lv.w"] if lv is not None else [])
            tensors = [opt_params[k] for k in names] + ([lv.w] if lv is not None else [])
            grads = dict(zip(wanted, gradients(loss, tensors)))
            w_grad = grads.pop("lv.w", None)
            clip_gradients(grads, config.grad_clip)
            adam_step(opt_params, grads, adam)
            if lv is not None:
                adam_step({"lv.w": lv.w}, {"lv.w": w_grad}, lv_adam)
            losses.append(value)
        report.loss_curve.append(float(np.mean(losses)))
        report.checkpoint_path = save_checkpoint()

    report.wall_time = time.perf_counter() - started
    return report


def infer(net: BiasNetwork, initial: Sequence[SystemState],
          targets: Sequence[TargetSpec], params: DynamicsParams, potential,
          seed: int) -> list[Trajectory]:
    """Roll out trajectories under a trained bias without parameter updates."""
    if initial and initial[0].positions.shape[1] != net.dim:
        raise TrainError(
            f"checkpoint dimension {net.dim} != state dimension {initial[0].positions.shape[1]}"
        )
    return rollout_many(make_controller(net), list(initial), list(targets),
                        params, potential, seed)
