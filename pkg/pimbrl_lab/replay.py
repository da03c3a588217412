"""Replay buffers for real (D^r) and model-generated (D^f) transitions."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import numpy as np

from pimbrl_lab.errors import EmptyBufferError, NonFiniteTransitionError

logger = logging.getLogger(__name__)

DEFAULT_CAPACITY = 1_000_000
_INITIAL_ALLOCATION = 1024

_FIELDS = ("observations", "actions", "next_observations", "rewards", "dones", "times")


@dataclass
class TransitionBatch:
    """Column-wise batch of transitions; ``fake`` marks model-generated rows."""

    observations: np.ndarray
    actions: np.ndarray
    next_observations: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    times: np.ndarray
    fake: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)

    @classmethod
    def concatenate(cls, batches: Sequence["TransitionBatch"]) -> "TransitionBatch":
        return cls(
            **{
                name: np.concatenate([getattr(b, name) for b in batches])
                for name in _FIELDS + ("fake",)
            }
        )


class ReplayBuffer:
    """
    Bounded FIFO ring of transitions, sampled uniformly with replacement.

    Storage grows by doubling up to ``capacity`` so large nominal capacities
    cost nothing until they are used.
    """

    def __init__(
        self,
        capacity: int,
        obs_dim: int,
        action_dim: int,
        rng: np.random.Generator,
        fake: bool = False,
    ):
        if capacity < 1:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.rng = rng
        self.fake = fake
        self._size = 0
        self._head = 0  # next write slot once full
        self._data: Dict[str, np.ndarray] = {}
        self._allocate(min(capacity, _INITIAL_ALLOCATION))

    def _allocate(self, rows: int) -> None:
        shapes = {
            "observations": (rows, self.obs_dim),
            "actions": (rows, self.action_dim),
            "next_observations": (rows, self.obs_dim),
            "rewards": (rows,),
            "dones": (rows,),
            "times": (rows,),
        }
        grown = {name: np.zeros(shape) for name, shape in shapes.items()}
        for name, old in self._data.items():
            grown[name][: len(old)] = old
        self._data = grown

    def __len__(self) -> int:
        return self._size

    def push(
        self,
        observation: np.ndarray,
        action: np.ndarray,
        next_observation: np.ndarray,
        reward: float,
        done: bool,
        time: float = 0.0,
    ) -> None:
        """
        Append one transition, evicting the oldest at capacity.

        Raises:
            NonFiniteTransitionError: If any field holds NaN or inf
        """
        row = {
            "observations": np.ravel(observation),
            "actions": np.ravel(action),
            "next_observations": np.ravel(next_observation),
            "rewards": float(reward),
            "dones": float(done),
            "times": float(time),
        }
        for name, value in row.items():
            if not np.all(np.isfinite(value)):
                raise NonFiniteTransitionError(f"Transition field '{name}' is not finite")

        if self._size < self.capacity:
            slot = self._size
            allocated = len(self._data["rewards"])
            if slot >= allocated:
                self._allocate(min(self.capacity, 2 * allocated))
            self._size += 1
        else:
            slot = self._head
            self._head = (self._head + 1) % self.capacity
        for name, value in row.items():
            self._data[name][slot] = value

    def _gather(self, indices: np.ndarray) -> TransitionBatch:
        columns = {name: self._data[name][indices].copy() for name in _FIELDS}
        return TransitionBatch(fake=np.full(len(indices), self.fake), **columns)

    def sample(self, batch_size: int) -> TransitionBatch:
        """``batch_size`` uniform draws with replacement."""
        if self._size == 0:
            raise EmptyBufferError("Cannot sample from an empty replay buffer")
        return self._gather(self.rng.integers(0, self._size, size=batch_size))

    def contents(self) -> TransitionBatch:
        """Every stored transition, oldest first."""
        order = (self._head + np.arange(self._size)) % max(self._size, 1)
        return self._gather(order.astype(int))

    def state_arrays(self, prefix: str) -> Dict[str, np.ndarray]:
        contents = self.contents()
        return {f"{prefix}.{name}": getattr(contents, name) for name in _FIELDS}

    def load_arrays(self, prefix: str, arrays: Dict[str, np.ndarray]) -> None:
        """Replace the contents with arrays written by ``state_arrays``."""
        self._size, self._head, self._data = 0, 0, {}
        self._allocate(min(self.capacity, _INITIAL_ALLOCATION))
        columns = [arrays[f"{prefix}.{name}"] for name in _FIELDS]
        for row in zip(*columns):
            self.push(*row)


def buffer_push(
    buffer: ReplayBuffer,
    observation: np.ndarray,
    action: np.ndarray,
    next_observation: np.ndarray,
    reward: float,
    done: bool,
    time: float = 0.0,
) -> None:
    buffer.push(observation, action, next_observation, reward, done, time)


def buffer_sample(
    buffers: Sequence[ReplayBuffer],
    batch_size: int,
    rng: Optional[np.random.Generator] = None,
    real_fraction: Optional[float] = None,
) -> TransitionBatch:
    """
    Sample from the union of several buffers.

    With ``real_fraction`` unset every stored transition is equally likely. With it
    set, each draw comes from the real buffers with that probability (while both
    kinds hold data). Provenance survives in ``TransitionBatch.fake``.

    Raises:
        EmptyBufferError: If every buffer is empty
    """
    filled = [b for b in buffers if len(b) > 0]
    if not filled:
        raise EmptyBufferError("All replay buffers are empty")
    rng = rng if rng is not None else buffers[0].rng

    real = [b for b in filled if not b.fake]
    fake = [b for b in filled if b.fake]
    if real_fraction is not None and real and fake:
        n_real = int(rng.binomial(batch_size, real_fraction))
        parts = []
        if n_real:
            parts.append(buffer_sample(real, n_real, rng))
        if batch_size - n_real:
            parts.append(buffer_sample(fake, batch_size - n_real, rng))
        return TransitionBatch.concatenate(parts)

    sizes = np.array([len(b) for b in filled])
    flat = rng.integers(0, int(sizes.sum()), size=batch_size)
    owner = np.searchsorted(np.cumsum(sizes), flat, side="right")
    offsets = flat - np.concatenate([[0], np.cumsum(sizes)[:-1]])[owner]
    parts = []
    for i, buffer in enumerate(filled):
        rows = offsets[owner == i]
        if len(rows):
            parts.append(buffer._gather(rows))
    batch = TransitionBatch.concatenate(parts)
    # restore draw order so batches do not arrive grouped by buffer
    order = np.argsort(np.argsort(owner, kind="stable"), kind="stable")
    return TransitionBatch(**{name: getattr(batch, name)[order] for name in _FIELDS + ("fake",)})


def save_buffers(path: Union[str, Path], buffers: Dict[str, ReplayBuffer]) -> None:
    arrays: Dict[str, np.ndarray] = {}
    for name, buffer in buffers.items():
        arrays.update(buffer.state_arrays(name))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)


def load_buffers(path: Union[str, Path], buffers: Dict[str, ReplayBuffer]) -> None:
    with np.load(path) as data:
        arrays = {key: data[key] for key in data.files}
    for name, buffer in buffers.items():
        buffer.load_arrays(name, arrays)
        logger.debug("Restored %d transitions into buffer '%s'", len(buffer), name)
