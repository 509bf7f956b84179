"""Running mean/std normalization for observations and goals."""

from __future__ import annotations

import numpy as np


class Normalizer:
    def __init__(self, size: int, eps: float = 1e-2, clip_range: float = 5.0):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.size = size
        self.eps = eps
        self.clip_range = clip_range
        self.total = np.zeros(size)
        self.total_sq = np.zeros(size)
        self.count = 0.0

    def update(self, batch):
        batch = np.atleast_2d(np.asarray(batch, dtype=float))
        self.total += batch.sum(axis=0)
        self.total_sq += (batch * batch).sum(axis=0)
        self.count += batch.shape[0]

    @property
    def mean(self):
        if self.count == 0:
            return np.zeros(self.size)
        return self.total / self.count

    @property
    def std(self):
        if self.count == 0:
            return np.ones(self.size)
        var = self.total_sq / self.count - (self.total / self.count) ** 2
        return np.sqrt(np.maximum(var, self.eps ** 2))

    def normalize(self, x):
        x = np.asarray(x, dtype=float)
        return np.clip((x - self.mean) / self.std, -self.clip_range, self.clip_range)

    def state_dict(self):
        return {"total": self.total.tolist(), "total_sq": self.total_sq.tolist(),
                "count": self.count, "eps": self.eps, "clip_range": self.clip_range}

    @classmethod
    def from_state(cls, state):
        n = cls(len(state["total"]), eps=state["eps"], clip_range=state["clip_range"])
        n.total = np.asarray(state["total"], dtype=float)
        n.total_sq = np.asarray(state["total_sq"], dtype=float)
        n.count = float(state["count"])
        return n
