"""Episode replay buffers with hindsight goal relabeling.

Two buffer roles: the agent's ring buffer of self-collected episodes, and
the expert buffer loaded once from demonstrations and immutable afterward.
Sampling relabels a k/(k+1) fraction of transitions with the achieved goal
of a uniformly chosen future step of the same episode and recomputes the
sparse reward against the new goal.
"""

from __future__ import annotations

import numpy as np

from ..demos import DemoSet


class BufferError(RuntimeError):
    pass


class ReplayBuffer:
    def __init__(self, capacity_episodes: int, role: str = "agent"):
        if role not in ("agent", "expert"):
            raise ValueError("role must be agent or expert")
        self.capacity = capacity_episodes
        self.role = role
        self.episodes: list[dict] = []
        self._frozen = False
        self._next_slot = 0

    def __len__(self):
        return len(self.episodes)

    @property
    def n_transitions(self) -> int:
        return int(sum(ep["actions"].shape[0] for ep in self.episodes))

    def freeze(self):
        self._frozen = True

    def add(self, observations, achieved_goals, desired_goals, actions):
        """Store one episode; the agent buffer overwrites oldest at capacity."""
        if self._frozen:
            raise BufferError("expert buffer is immutable after load")
        ep = {
            "obs": np.asarray(observations, dtype=float),
            "ag": np.asarray(achieved_goals, dtype=float),
            "g": np.asarray(desired_goals, dtype=float),
            "actions": np.asarray(actions, dtype=float),
        }
        if ep["obs"].shape[0] != ep["actions"].shape[0] + 1:
            raise BufferError("episode arrays inconsistent")
        if len(self.episodes) < self.capacity:
            self.episodes.append(ep)
        else:
            if self.role == "expert":
                raise BufferError("expert buffer never evicts")
            self.episodes[self._next_slot] = ep
            self._next_slot = (self._next_slot + 1) % self.capacity

    @classmethod
    def from_demos(cls, demos: DemoSet) -> "ReplayBuffer":
        buf = cls(capacity_episodes=max(1, len(demos)), role="expert")
        for ep in demos.episodes:
            buf.add(ep.observations, ep.achieved_goals, ep.desired_goals, ep.actions)
        buf.freeze()
        return buf

    def signature(self):
        """Cheap content hash used to assert expert-buffer immutability."""
        acc = 0.0
        for ep in self.episodes:
            acc += float(ep["obs"].sum()) + float(ep["actions"].sum())
        return (len(self.episodes), self.n_transitions, acc)

    def her_sample(self, batch_size: int, future_k: int, rng, reward_fn):
        """Sample a relabeled batch of transitions.

        Returns dict with obs, goal, action, reward, next_obs, achieved_next.
        With future_k = 0 no transition is relabeled.
        """
        if not self.episodes:
            raise BufferError("cannot sample from an empty buffer")
        n_eps = len(self.episodes)
        ep_idx = rng.integers(0, n_eps, size=batch_size)
        lengths = np.array([self.episodes[i]["actions"].shape[0] for i in ep_idx])
        ts = (rng.random(batch_size) * lengths).astype(np.int64)
        future_p = 1.0 - 1.0 / (1.0 + future_k)
        relabel = rng.random(batch_size) < future_p
        # uniform future index in (t, T]
        future_ts = ts + 1 + (rng.random(batch_size) * (lengths - ts - 1)).astype(np.int64)

        obs_dim = self.episodes[0]["obs"].shape[1]
        act_dim = self.episodes[0]["actions"].shape[1]
        out = {
            "obs": np.empty((batch_size, obs_dim)),
            "next_obs": np.empty((batch_size, obs_dim)),
            "goal": np.empty((batch_size, 3)),
            "action": np.empty((batch_size, act_dim)),
            "achieved_next": np.empty((batch_size, 3)),
        }
        for j in range(batch_size):
            ep = self.episodes[ep_idx[j]]
            t = ts[j]
            out["obs"][j] = ep["obs"][t]
            out["next_obs"][j] = ep["obs"][t + 1]
            out["action"][j] = ep["actions"][t]
            out["achieved_next"][j] = ep["ag"][t + 1]
            if relabel[j]:
                out["goal"][j] = ep["ag"][future_ts[j]]
            else:
                out["goal"][j] = ep["g"][t + 1]
        out["reward"] = reward_fn(out["achieved_next"], out["goal"])
        return out
