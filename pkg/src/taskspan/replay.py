"""Shared ring replay buffer with per-task index tracking.

One buffer holds transitions for every task; per-task index lists make
task-balanced batches cheap. Because appends happen in ring order, the
slot overwritten on wrap-around is always the globally oldest transition,
which is also the oldest for its own task, so eviction is O(1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class TaskBatch:
    obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    terminal: np.ndarray


class SamplingError(RuntimeError):
    """A requested sub-batch could not be drawn (e.g. empty task)."""


class ReplayBuffer:
    def __init__(self, capacity: int, obs_dim: int, act_dim: int, task_count: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.task_count = int(task_count)
        self.obs = np.zeros((capacity, obs_dim))
        self.action = np.zeros((capacity, act_dim))
        self.reward = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.terminal = np.zeros(capacity)
        self.task = np.full(capacity, -1, dtype=np.int64)
        self.size = 0
        self._pos = 0
        # insertion-ordered slot ids per task; _head marks evicted prefix
        self._slots = [[] for _ in range(task_count)]
        self._head = [0] * task_count

    def __len__(self) -> int:
        return self.size

    def count(self, task: int) -> int:
        return len(self._slots[task]) - self._head[task]

    def add(self, obs, action, reward, next_obs, terminal: bool, task: int) -> None:
        if not 0 <= task < self.task_count:
            raise ValueError(f"task id {task} out of range [0, {self.task_count})")
        pos = self._pos
        old_task = self.task[pos]
        if old_task >= 0:
            # overwriting the oldest slot of old_task (FIFO per task)
            self._head[old_task] += 1
            self._maybe_compact(old_task)
        self.obs[pos] = obs
        self.action[pos] = action
        self.reward[pos] = reward
        self.next_obs[pos] = next_obs
        self.terminal[pos] = 1.0 if terminal else 0.0
        self.task[pos] = task
        self._slots[task].append(pos)
        self._pos = (pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _maybe_compact(self, task: int) -> None:
        slots = self._slots[task]
        head = self._head[task]
        if head > 1024 and head * 2 > len(slots):
            self._slots[task] = slots[head:]
            self._head[task] = 0

    def sample_task(self, task: int, n: int, rng: np.random.Generator) -> TaskBatch:
        live = self.count(task)
        if live == 0:
            raise SamplingError(f"no transitions stored for task {task}")
        lo = self._head[task]
        picks = rng.integers(lo, lo + live, size=n)
        slots = self._slots[task]
        idx = np.fromiter((slots[i] for i in picks), dtype=np.int64, count=n)
        return TaskBatch(
            obs=self.obs[idx],
            action=self.action[idx],
            reward=self.reward[idx],
            next_obs=self.next_obs[idx],
            terminal=self.terminal[idx],
        )

    def sample_balanced(self, batch_size: int, rng: np.random.Generator) -> dict:
        """Equal-count sub-batches for every task: {task: TaskBatch}."""
        if batch_size % self.task_count != 0:
            raise SamplingError(
                f"batch size {batch_size} not divisible by task count {self.task_count}"
            )
        per_task = batch_size // self.task_count
        return {t: self.sample_task(t, per_task, rng) for t in range(self.task_count)}
