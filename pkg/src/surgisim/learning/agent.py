"""Demonstration-guided deep RL: DDPG with hindsight relabeling and a
behavior-cloning term on an expert buffer.

The critic minimizes the squared Bellman error with targets clipped to the
sparse-reward value range [-1/(1-gamma), 0].  The actor maximizes the
critic on agent states while staying close to expert actions via an L2
behavior-cloning term; it is also pre-trained on the expert buffer with
plain mean-squared-error regression before any environment interaction.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from ..world import TaskEnv, compute_reward, make_env
from .nets import MLP, Adam, soft_update
from .normalizer import Normalizer
from .replay import ReplayBuffer


class NaNGuard(RuntimeError):
    pass


class EmptyDemoSet(ValueError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.98
    tau: float = 0.05
    batch_size: int = 256
    epochs: int = 20
    cycles_per_epoch: int = 10
    episodes_per_cycle: int = 10
    updates_per_cycle: int = 40
    exploration_sigma: float = 0.2
    random_action_eps: float = 0.3
    future_k: int = 4
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    bc_weight: float = 1.0
    bc_pretrain_steps: int = 2000
    hidden: tuple = (256, 256, 256)
    buffer_episodes: int = 2000
    eval_episodes: int = 20
    norm_eps: float = 1e-2
    norm_clip: float = 5.0

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        for name in ("tau", "lr_actor", "lr_critic"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.future_k < 0:
            raise ValueError("future_k must be >= 0")


# ---------------------------------------------------------------------------
# losses (each returns the scalar loss and writes gradients into the nets)


def critic_loss(critic: MLP, target_critic: MLP, target_actor: MLP, batch,
                gamma: float, compute_grads: bool = True) -> float:
    """Squared Bellman error with value-range clipping on the target."""
    s = np.concatenate([batch["obs_n"], batch["goal_n"]], axis=1)
    s_next = np.concatenate([batch["next_obs_n"], batch["goal_n"]], axis=1)
    a_next = target_actor.forward(s_next)
    q_next = target_critic.forward(np.concatenate([s_next, a_next], axis=1))
    target = batch["reward"].reshape(-1, 1) + gamma * q_next
    lo = -1.0 / (1.0 - gamma) if gamma < 1.0 else -np.inf
    target = np.clip(target, lo, 0.0)
    pred, cache = critic.forward_cache(np.concatenate([s, batch["action"]], axis=1))
    err = pred - target
    loss = float(np.mean(err ** 2))
    if compute_grads:
        critic.zero_grad()
        critic.backward(cache, 2.0 * err / err.shape[0])
    return loss


def actor_loss(actor: MLP, critic: MLP, agent_batch, demo_batch,
               bc_weight: float = 1.0, compute_grads: bool = True) -> float:
    """-Q(s, pi(s)) on agent states plus L2 behavior cloning on expert pairs."""
    s = np.concatenate([agent_batch["obs_n"], agent_batch["goal_n"]], axis=1)
    a_pi, actor_cache = actor.forward_cache(s)
    q_in = np.concatenate([s, a_pi], axis=1)
    q, critic_cache = critic.forward_cache(q_in)
    n = q.shape[0]
    loss = -float(np.mean(q))

    s_e = np.concatenate([demo_batch["obs_n"], demo_batch["goal_n"]], axis=1)
    a_e, bc_cache = actor.forward_cache(s_e)
    diff = a_e - demo_batch["action"]
    norms = np.sqrt(np.sum(diff * diff, axis=1, keepdims=True))
    m = norms.shape[0]
    loss += bc_weight * float(np.mean(norms))

    if compute_grads:
        actor.zero_grad()
        critic.zero_grad()
        dq = np.full_like(q, -1.0 / n)
        dq_in = critic.backward(critic_cache, dq)
        critic.zero_grad()                       # critic is fixed in this loss
        da = dq_in[:, s.shape[1]:]
        actor.backward(actor_cache, da)
        safe = np.maximum(norms, 1e-12)
        dnorm = bc_weight * diff / (safe * m)
        actor.backward(bc_cache, dnorm)
    return loss


def bc_loss(actor: MLP, batch, compute_grads: bool = True) -> float:
    """Mean squared action error used for supervised pretraining."""
    s = np.concatenate([batch["obs_n"], batch["goal_n"]], axis=1)
    a, cache = actor.forward_cache(s)
    diff = a - batch["action"]
    loss = float(np.mean(diff ** 2))
    if compute_grads:
        actor.zero_grad()
        actor.backward(cache, 2.0 * diff / diff.size)
    return loss


def bc_pretrain(actor: MLP, demo_buffer: ReplayBuffer, steps: int, lr: float,
                batch_size: int, rng, normalize, future_k: int = 0) -> list[float]:
    """Supervised pretraining on the expert buffer; returns the loss curve."""
    if len(demo_buffer) == 0:
        raise EmptyDemoSet("behavior cloning needs at least one demonstration")
    if steps <= 0:
        return []
    opt = Adam(actor.n_params, lr=lr)
    losses = []
    for _ in range(steps):
        batch = demo_buffer.her_sample(batch_size, future_k, rng, compute_reward)
        normalize(batch)
        losses.append(bc_loss(actor, batch))
        actor.theta = opt.step(actor.theta, actor.grad)
    return losses


# ---------------------------------------------------------------------------
# trainer


@dataclass
class TrainResult:
    actor: MLP
    critic: MLP
    obs_norm: Normalizer
    goal_norm: Normalizer
    history: list[dict] = field(default_factory=list)
    task: str = "needle_pick"

    def policy(self):
        return make_policy_fn(self.actor, self.obs_norm, self.goal_norm)


def make_policy_fn(actor: MLP, obs_norm: Normalizer, goal_norm: Normalizer):
    def policy(obs):
        x = np.concatenate([obs_norm.normalize(obs.vector),
                            goal_norm.normalize(obs.desired_goal)])
        return actor.forward(x[None, :])[0]
    return policy


class DDPGTrainer:
    def __init__(self, task: str, demos, config: TrainConfig, seed: int = 0):
        if len(demos.episodes) == 0:
            raise EmptyDemoSet("training requires successful demonstrations")
        self.task = task
        self.config = config
        self.demos = demos
        seq = np.random.SeedSequence(seed)
        (self._init_ss, self._explore_ss, self._her_ss, self._env_ss,
         self._eval_ss) = seq.spawn(5)
        self.rng_init = np.random.default_rng(self._init_ss)
        self.rng_explore = np.random.default_rng(self._explore_ss)
        self.rng_her = np.random.default_rng(self._her_ss)
        self.rng_env = np.random.default_rng(self._env_ss)

        env = make_env(task)
        obs = env.reset(seed=0)
        self.obs_dim = obs.vector.shape[0]
        self.goal_dim = obs.desired_goal.shape[0]
        self.act_dim = 5
        self.env = env

        h = list(config.hidden)
        in_dim = self.obs_dim + self.goal_dim
        self.actor = MLP([in_dim] + h + [self.act_dim], rng=self.rng_init, squash=True)
        self.critic = MLP([in_dim + self.act_dim] + h + [1], rng=self.rng_init)
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.opt_actor = Adam(self.actor.n_params, lr=config.lr_actor)
        self.opt_critic = Adam(self.critic.n_params, lr=config.lr_critic)

        self.obs_norm = Normalizer(self.obs_dim, config.norm_eps, config.norm_clip)
        self.goal_norm = Normalizer(self.goal_dim, config.norm_eps, config.norm_clip)
        self.expert = ReplayBuffer.from_demos(demos)
        self.agent = ReplayBuffer(config.buffer_episodes, role="agent")
        for ep in demos.episodes:
            self.obs_norm.update(ep.observations)
            self.goal_norm.update(ep.desired_goals)
            self.goal_norm.update(ep.achieved_goals)

    # -- helpers ----------------------------------------------------------

    def _normalize_batch(self, batch):
        batch["obs_n"] = self.obs_norm.normalize(batch["obs"])
        batch["next_obs_n"] = self.obs_norm.normalize(batch["next_obs"])
        batch["goal_n"] = self.goal_norm.normalize(batch["goal"])

    def _explore_action(self, obs):
        cfg = self.config
        if self.rng_explore.random() < cfg.random_action_eps:
            return self.rng_explore.uniform(-1.0, 1.0, self.act_dim)
        x = np.concatenate([self.obs_norm.normalize(obs.vector),
                            self.goal_norm.normalize(obs.desired_goal)])
        a = self.actor.forward(x[None, :])[0]
        a = a + cfg.exploration_sigma * self.rng_explore.standard_normal(self.act_dim)
        return np.clip(a, -1.0, 1.0)

    def _collect_episode(self):
        env = self.env
        obs = env.reset(seed=int(self.rng_env.integers(0, 2**31 - 1)))
        observations = [obs.vector.copy()]
        achieved = [obs.achieved_goal.copy()]
        desired = [obs.desired_goal.copy()]
        actions = []
        while not env.done:
            a = self._explore_action(obs)
            obs, _, _, _ = env.step(a)
            actions.append(a)
            observations.append(obs.vector.copy())
            achieved.append(obs.achieved_goal.copy())
            desired.append(obs.desired_goal.copy())
        self.agent.add(np.asarray(observations), np.asarray(achieved),
                       np.asarray(desired), np.asarray(actions))
        self.obs_norm.update(np.asarray(observations))
        self.goal_norm.update(np.asarray(desired))

    def _update_once(self):
        cfg = self.config
        agent_batch = self.agent.her_sample(cfg.batch_size, cfg.future_k,
                                            self.rng_her, compute_reward)
        demo_batch = self.expert.her_sample(cfg.batch_size, cfg.future_k,
                                            self.rng_her, compute_reward)
        self._normalize_batch(agent_batch)
        self._normalize_batch(demo_batch)

        critic_batch = {
            k: np.concatenate([agent_batch[k], demo_batch[k]], axis=0)
            for k in ("obs_n", "next_obs_n", "goal_n", "action", "reward")}
        lq = critic_loss(self.critic, self.target_critic, self.target_actor,
                         critic_batch, cfg.gamma)
        if not np.isfinite(lq):
            raise NaNGuard(f"critic loss diverged: {lq}")
        self.critic.theta = self.opt_critic.step(self.critic.theta, self.critic.grad)

        lpi = actor_loss(self.actor, self.critic, agent_batch, demo_batch,
                         cfg.bc_weight)
        if not np.isfinite(lpi):
            raise NaNGuard(f"actor loss diverged: {lpi}")
        self.actor.theta = self.opt_actor.step(self.actor.theta, self.actor.grad)
        return lq, lpi

    # -- main loop ----------------------------------------------------------

    def train(self, log=None) -> TrainResult:
        cfg = self.config
        history = []
        pretrain_losses = bc_pretrain(
            self.actor, self.expert, cfg.bc_pretrain_steps, cfg.lr_actor,
            cfg.batch_size, self.rng_her, self._normalize_batch, cfg.future_k)
        self.target_actor = self.actor.copy()
        if log and pretrain_losses:
            log.write(f"pretrain bc_loss_start={pretrain_losses[0]:.6f} "
                      f"bc_loss_end={pretrain_losses[-1]:.6f}\n")

        lq = lpi = float("nan")
        for epoch in range(1, cfg.epochs + 1):
            for _ in range(cfg.cycles_per_epoch):
                for _ in range(cfg.episodes_per_cycle):
                    self._collect_episode()
                for _ in range(cfg.updates_per_cycle):
                    lq, lpi = self._update_once()
                soft_update(self.target_actor, self.actor, cfg.tau)
                soft_update(self.target_critic, self.critic, cfg.tau)
            metrics = self.evaluate(cfg.eval_episodes, seed_base=100_000 + epoch)
            record = {"epoch": epoch, **metrics, "critic_loss": lq, "actor_loss": lpi}
            history.append(record)
            if log:
                log.write(
                    "epoch=%03d success_rate=%.3f mean_steps=%.1f eom_cm=%.3f "
                    "critic_loss=%.6f actor_loss=%.6f\n" % (
                        epoch, metrics["success_rate"], metrics["mean_steps"],
                        metrics["economy_of_motion_cm"], lq, lpi))
                log.flush()
        return TrainResult(self.actor, self.critic, self.obs_norm, self.goal_norm,
                           history, task=self.task)

    def evaluate(self, n_episodes: int, seed_base: int = 0) -> dict:
        policy = make_policy_fn(self.actor, self.obs_norm, self.goal_norm)
        return evaluate(policy, make_env(self.task), n_episodes, seed_base=seed_base)


def evaluate(policy, env: TaskEnv, n_episodes: int, seed_base: int = 0) -> dict:
    """Deterministic evaluation: success %, mean steps, economy of motion (cm)."""
    if n_episodes <= 0:
        raise ValueError("n_episodes must be positive")
    wins, steps, eoms = 0, [], []
    for i in range(n_episodes):
        obs = env.reset(seed=seed_base + i)
        info = {"is_success": False}
        while not env.done:
            obs, _, _, info = env.step(policy(obs))
        wins += bool(info["is_success"])
        steps.append(env.step_count)
        eoms.append(env.path_length)
    return {
        "success_rate": wins / n_episodes,
        "mean_steps": float(np.mean(steps)),
        "economy_of_motion_cm": float(100.0 * np.mean(eoms)),
    }


# ---------------------------------------------------------------------------
# checkpoints


CHECKPOINT_VERSION = 1


def save_policy(result: TrainResult, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    meta = {
        "version": CHECKPOINT_VERSION,
        "task": result.task,
        "actor_sizes": result.actor.sizes,
        "critic_sizes": result.critic.sizes,
        "obs_norm": result.obs_norm.state_dict(),
        "goal_norm": result.goal_norm.state_dict(),
        "history": result.history,
    }
    with open(os.path.join(out_dir, "policy.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1)
    np.savez(os.path.join(out_dir, "params.npz"),
             actor=result.actor.theta, critic=result.critic.theta)


def load_policy(out_dir):
    with open(os.path.join(out_dir, "policy.json"), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
    params = np.load(os.path.join(out_dir, "params.npz"))
    actor = MLP(meta["actor_sizes"], squash=True)
    actor.theta = params["actor"].copy()
    critic = MLP(meta["critic_sizes"])
    critic.theta = params["critic"].copy()
    result = TrainResult(
        actor, critic,
        Normalizer.from_state(meta["obs_norm"]),
        Normalizer.from_state(meta["goal_norm"]),
        history=meta.get("history", []),
        task=meta.get("task", "needle_pick"),
    )
    return result
