"""
Per-episode trajectory dumps.

One comma-delimited file per episode with a single header line and columns
``t, u0..u{n-1}, a0..a{m-1}, r, d``. Row k holds the physical state at the
start of control step k, the action applied during it and the resulting
reward and done flag. A closing row holds the final state with ``nan`` in the
action, reward and done columns, so consecutive rows form transitions.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from pimbrl_lab.environments.base import BaseEnvironment


def trajectory_columns(state_dim: int, action_dim: int) -> List[str]:
    return (
        ["t"] + [f"u{i}" for i in range(state_dim)] + [f"a{j}" for j in range(action_dim)] + ["r", "d"]
    )


@dataclass
class TrajectoryRecorder:
    """Collects the rows of one episode."""

    state_dim: int
    action_dim: int
    rows: List[np.ndarray] = field(default_factory=list)
    closed: bool = False

    def record(self, time: float, u: np.ndarray, action: np.ndarray, reward: float, done: bool):
        self.rows.append(
            np.concatenate([[time], np.ravel(u), np.ravel(action), [reward, float(done)]])
        )

    def close(self, time: float, u: np.ndarray) -> None:
        tail = np.full(self.action_dim + 2, np.nan)
        self.rows.append(np.concatenate([[time], np.ravel(u), tail]))
        self.closed = True

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = ",".join(trajectory_columns(self.state_dim, self.action_dim))
        data = np.vstack(self.rows) if self.rows else np.zeros((0, len(header.split(","))))
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")
        return path


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray

    def transitions(
        self, env: BaseEnvironment
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(obs, action, next_obs, reward, done, time) arrays for every complete row pair."""
        n = len(self.times) - 1
        obs = np.stack([env.observe(self.states[k], self.times[k]) for k in range(n)])
        next_obs = np.stack([env.observe(self.states[k + 1], self.times[k + 1]) for k in range(n)])
        return obs, self.actions[:n], next_obs, self.rewards[:n], self.dones[:n], self.times[:n]


def read_trajectory(path: Union[str, Path], state_dim: int, action_dim: int) -> Trajectory:
    """Parse a dump written by ``TrajectoryRecorder.write``."""
    with Path(path).open() as stream:
        header = stream.readline().strip().split(",")
    expected = trajectory_columns(state_dim, action_dim)
    if header != expected:
        raise ValueError(f"{path}: unexpected trajectory columns {header[:3]}...")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    a0 = 1 + state_dim
    return Trajectory(
        times=data[:, 0],
        states=data[:, 1:a0],
        actions=data[:, a0 : a0 + action_dim],
        rewards=data[:, a0 + action_dim],
        dones=data[:, a0 + action_dim + 1],
    )
