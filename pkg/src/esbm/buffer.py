"""Replay buffer of scored trajectories with FIFO eviction and
importance-weighted categorical sampling (softmax over stored log weights,
drawn with replacement)."""

from __future__ import annotations

import json
from collections import deque
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .biasnet import TargetSpec
from .objective import PathScore, batch_weights

if TYPE_CHECKING:  # pragma: no cover
    from .dynamics import Trajectory


class BufferError(Exception):
    pass


class ReplayBuffer:
    def __init__(self, capacity: int):
        if capacity < 1:
            raise BufferError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.entries: deque = deque(maxlen=capacity)
        self.insertions = 0

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, traj: "Trajectory", score: PathScore | None = None) -> None:
        traj.validate()
        if score is None:
            score = PathScore.from_trajectory(traj)
        self.entries.append((traj, score))
        self.insertions += 1

    def log_weights(self) -> np.ndarray:
        return np.array([s.log_weight for _, s in self.entries])

    def probabilities(self) -> np.ndarray:
        if not self.entries:
            raise BufferError("empty buffer")
        return batch_weights(self.log_weights())

    def sample(self, batch_size: int, rng: np.random.Generator,
               uniform: bool = False) -> list:
        """Draw batch_size entries with replacement from the categorical
        distribution over stored log weights (or uniformly: the log-variance
        objective needs diverse batches, since duplicate draws zero its
        variance residual)."""
        if not self.entries:
            raise BufferError("cannot sample from an empty buffer")
        probs = None if uniform else self.probabilities()
        idx = rng.choice(len(self.entries), size=batch_size, replace=True, p=probs)
        return [self.entries[i] for i in idx]

    # -- persistence (resume support) ---------------------------------------

    def save(self, directory: str | Path) -> None:
        from .dynamics import write_trajectory_csv

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index = []
        for i, (traj, score) in enumerate(self.entries):
            name = f"traj_{i:05d}.csv"
            write_trajectory_csv(traj, directory / name)
            np.savez(directory / f"traj_{i:05d}.npz",
                     noise=traj.noise, behavior_bias=traj.behavior_bias,
                     sigma=traj.sigma, target=traj.target.positions)
            index.append({
                "file": name, "reward": score.reward, "log_p0": score.log_p0,
                "log_pb": score.log_pb, "seed": traj.seed, "dt": traj.dt,
                "mode": traj.mode, "target_sigma": traj.target.sigma,
            })
        payload = {"capacity": self.capacity, "insertions": self.insertions,
                   "entries": index}
        (directory / "buffer_index.json").write_text(
            json.dumps(payload, sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "ReplayBuffer":
        from .dynamics import Trajectory, read_trajectory_csv

        directory = Path(directory)
        payload = json.loads((directory / "buffer_index.json").read_text())
        buf = cls(payload["capacity"])
        for rec in payload["entries"]:
            positions, velocities = read_trajectory_csv(directory / rec["file"])
            extra = np.load(directory / rec["file"].replace(".csv", ".npz"))
            traj = Trajectory(
                positions=positions, velocities=velocities,
                noise=extra["noise"], behavior_bias=extra["behavior_bias"],
                sigma=extra["sigma"],
                log_p0=rec["log_p0"], log_pb=rec["log_pb"], reward=rec["reward"],
                target=TargetSpec(extra["target"], rec["target_sigma"]),
                seed=rec["seed"], dt=rec["dt"], mode=rec["mode"],
            )
            buf.push(traj, PathScore(reward=rec["reward"], log_p0=rec["log_p0"],
                                     log_pb=rec["log_pb"]))
        buf.insertions = payload["insertions"]
        return buf
