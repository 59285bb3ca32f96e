"""Fixed-capacity ring buffer with uniform and windowed (multi-step) sampling."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from replab.errors import UsageError, ValidationError


@dataclasses.dataclass
class TransitionRecord:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    done: bool
    # time-limit end of episode: closes sequence windows but still bootstraps
    truncated: bool = False
    mask: np.ndarray | None = None
    next_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.obs.shape != self.next_obs.shape:
            raise ValidationError(f"obs {self.obs.shape} and next_obs {self.next_obs.shape} differ in shape")
        if not np.isfinite(self.reward):
            raise ValidationError("reward must be finite")


@dataclasses.dataclass
class Batch:
    obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray
    indices: np.ndarray
    mask: np.ndarray | None = None
    next_mask: np.ndarray | None = None

    def __len__(self):
        return len(self.reward)


@dataclasses.dataclass
class SequenceBatch:
    """``obs`` is (B, H+1, ...); ``action``, ``reward``, ``done`` are (B, H, ...)."""

    obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    done: np.ndarray
    start: np.ndarray

    @property
    def horizon(self):
        return self.action.shape[1]


class ReplayBuffer:
    def __init__(self, capacity: int, obs_shape, action_dim: int, store_masks: bool = False):
        if capacity < 1:
            raise ValidationError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.obs_shape = tuple(obs_shape)
        self.action_dim = int(action_dim)
        self.store_masks = store_masks
        self.obs = np.empty((self.capacity, *self.obs_shape), dtype=np.uint8)
        self.next_obs = np.empty((self.capacity, *self.obs_shape), dtype=np.uint8)
        self.actions = np.empty((self.capacity, self.action_dim), dtype=np.float32)
        self.rewards = np.empty((self.capacity,), dtype=np.float32)
        self.dones = np.empty((self.capacity,), dtype=bool)
        self.truncs = np.empty((self.capacity,), dtype=bool)
        if store_masks:
            # one mask per stacked RGB frame
            mshape = (*self.obs_shape[:2], self.obs_shape[2] // 3)
            self.masks = np.empty((self.capacity, *mshape), dtype=np.uint8)
            self.next_masks = np.empty((self.capacity, *mshape), dtype=np.uint8)
        self.idx = 0
        self.full = False

    def __len__(self):
        return self.capacity if self.full else self.idx

    def push(self, record: TransitionRecord):
        if record.obs.shape != self.obs_shape:
            raise ValidationError(f"record obs shape {record.obs.shape} != buffer shape {self.obs_shape}")
        i = self.idx
        self.obs[i] = record.obs
        self.next_obs[i] = record.next_obs
        self.actions[i] = record.action
        self.rewards[i] = record.reward
        self.dones[i] = record.done
        self.truncs[i] = record.truncated
        if self.store_masks:
            if record.mask is None or record.next_mask is None:
                raise ValidationError("this buffer stores relevance masks; record has none")
            self.masks[i] = record.mask
            self.next_masks[i] = record.next_mask
        self.idx = (self.idx + 1) % self.capacity
        self.full = self.full or self.idx == 0

    def record(self, i: int) -> TransitionRecord:
        """Record at logical position ``i`` (0 = oldest stored)."""
        j = self._physical(np.array([i]))[0]
        return TransitionRecord(
            obs=self.obs[j].copy(),
            action=self.actions[j].copy(),
            reward=float(self.rewards[j]),
            next_obs=self.next_obs[j].copy(),
            done=bool(self.dones[j]),
            truncated=bool(self.truncs[j]),
            mask=self.masks[j].copy() if self.store_masks else None,
            next_mask=self.next_masks[j].copy() if self.store_masks else None,
        )

    def _physical(self, logical):
        start = self.idx if self.full else 0
        return (start + logical) % self.capacity

    def _gather(self, phys):
        return Batch(
            obs=self.obs[phys],
            action=self.actions[phys],
            reward=self.rewards[phys],
            next_obs=self.next_obs[phys],
            done=self.dones[phys],
            indices=phys,
            mask=self.masks[phys] if self.store_masks else None,
            next_mask=self.next_masks[phys] if self.store_masks else None,
        )

    def sample(self, batch_size: int, seed=None) -> Batch:
        """Uniform sampling with replacement.

        ``seed`` may be an int or a ``numpy.random.Generator``.
        """
        if len(self) == 0:
            raise UsageError("cannot sample from an empty replay buffer")
        if batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        rng = np.random.default_rng(seed)
        logical = rng.integers(0, len(self), size=batch_size)
        return self._gather(self._physical(logical))

    def window_starts(self, horizon: int) -> np.ndarray:
        """Logical start indices of all windows of ``horizon`` transitions.

        A window may end on an episode boundary but never contains one before
        its last transition.
        """
        n = len(self)
        if horizon < 1 or n < horizon:
            return np.zeros(0, dtype=np.int64)
        phys = self._physical(np.arange(n))
        boundary = (self.dones[phys] | self.truncs[phys]).astype(np.int64)
        # boundaries among the first H-1 transitions of each window
        csum = np.concatenate([[0], np.cumsum(boundary)])
        starts = np.arange(n - horizon + 1)
        inner = csum[starts + horizon - 1] - csum[starts]
        return starts[inner == 0]

    def sample_sequences(self, batch_size: int, horizon: int, seed=None) -> SequenceBatch:
        starts = self.window_starts(horizon)
        if len(starts) == 0:
            raise UsageError(f"no stored episode segment long enough for horizon H={horizon}")
        rng = np.random.default_rng(seed)
        chosen = starts[rng.integers(0, len(starts), size=batch_size)]
        logical = chosen[:, None] + np.arange(horizon)[None, :]
        phys = self._physical(logical)
        obs = np.concatenate([self.obs[phys], self.next_obs[phys[:, -1:]]], axis=1)
        return SequenceBatch(
            obs=obs,
            action=self.actions[phys],
            reward=self.rewards[phys],
            done=self.dones[phys],
            start=self._physical(chosen),
        )

    # on-disk spill: one .npz blob per record plus a JSON index
    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = []
        for i in range(len(self)):
            rec = self.record(i)
            name = f"record_{i:07d}.npz"
            arrays = dict(
                obs=rec.obs,
                action=rec.action,
                reward=np.float32(rec.reward),
                next_obs=rec.next_obs,
                done=np.bool_(rec.done),
                truncated=np.bool_(rec.truncated),
            )
            if self.store_masks:
                arrays.update(mask=rec.mask, next_mask=rec.next_mask)
            with open(directory / name, "wb") as fh:
                np.savez(fh, **arrays)
            names.append(name)
        index = {
            "capacity": self.capacity,
            "obs_shape": list(self.obs_shape),
            "action_dim": self.action_dim,
            "store_masks": self.store_masks,
            "records": names,
        }
        (directory / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "ReplayBuffer":
        directory = Path(directory)
        index = json.loads((directory / "index.json").read_text())
        buf = cls(index["capacity"], index["obs_shape"], index["action_dim"], index["store_masks"])
        for name in index["records"]:
            with np.load(directory / name) as z:
                buf.push(
                    TransitionRecord(
                        obs=z["obs"],
                        action=z["action"],
                        reward=float(z["reward"]),
                        next_obs=z["next_obs"],
                        done=bool(z["done"]),
                        truncated=bool(z["truncated"]),
                        mask=z["mask"] if buf.store_masks else None,
                        next_mask=z["next_mask"] if buf.store_masks else None,
                    )
                )
        return buf
