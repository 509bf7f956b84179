"""Demonstration recording, persistence, and generator policies.

Demo files are versioned JSON-lines text: a header record followed by one
self-contained episode record per line.  Floats serialize through repr and
parse back bit-exact, so load(save(x)) is an identity.

Two generator families produce the demonstration corpora used for training:
a clean waypoint script, and a "humanoid" variant that overlays smooth
directional bias noise (curvy trajectories) and, in a configurable fraction
of episodes, one deliberate missed grasp followed by a recovery regrasp.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .world import TaskEnv, WORKSPACE_SIDE, compute_reward, make_env

DEMO_SCHEMA_VERSION = 1


class DemoError(Exception):
    pass


class FormatError(DemoError):
    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class VersionMismatch(DemoError):
    pass


class GenerationStalled(DemoError):
    pass


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    achieved_goal: np.ndarray      # after the action (next observation's)
    desired_goal: np.ndarray       # goal the reward was computed against
    info: dict


@dataclass
class Episode:
    episode_id: int
    task: str
    seed: int
    observations: np.ndarray       # (T+1, obs_dim)
    achieved_goals: np.ndarray     # (T+1, 3)
    desired_goals: np.ndarray      # (T+1, 3)
    actions: np.ndarray            # (T, 5)
    rewards: np.ndarray            # (T,)
    success: bool
    path_length: float

    @property
    def n_steps(self) -> int:
        return self.actions.shape[0]

    def transitions(self):
        for t in range(self.n_steps):
            yield Transition(
                obs=self.observations[t],
                action=self.actions[t],
                reward=float(self.rewards[t]),
                next_obs=self.observations[t + 1],
                achieved_goal=self.achieved_goals[t + 1],
                desired_goal=self.desired_goals[t + 1],
                info={"is_success": self.success and t == self.n_steps - 1},
            )

    def validate(self, tolerance: float):
        """Stored rewards must equal the sparse reward recomputed from goals."""
        recomputed = compute_reward(self.achieved_goals[1:], self.desired_goals[1:],
                                    tolerance)
        if not np.array_equal(recomputed, self.rewards):
            raise DemoError(
                f"episode {self.episode_id}: stored rewards inconsistent with goals")


def jaw_closed_periods(episode: Episode) -> int:
    """Number of maximal jaw-closed (j < 0) runs over the episode."""
    jaw = episode.observations[:, 4]
    closed = jaw < 0
    return int(np.sum(closed[1:] & ~closed[:-1]) + (1 if closed[0] else 0))


def episode_has_regrasp(episode: Episode) -> bool:
    """True when the jaw closed, reopened, and closed again (miss recovery)."""
    return jaw_closed_periods(episode) >= 2


@dataclass
class DemoSet:
    task: str
    episodes: list[Episode] = field(default_factory=list)

    def __len__(self):
        return len(self.episodes)

    def mean_steps(self) -> float:
        if not self.episodes:
            return 0.0
        return float(np.mean([e.n_steps for e in self.episodes]))

    def mean_path_length(self) -> float:
        if not self.episodes:
            return 0.0
        return float(np.mean([e.path_length for e in self.episodes]))

    def success_fraction(self) -> float:
        if not self.episodes:
            return 0.0
        return float(np.mean([e.success for e in self.episodes]))

    def regrasp_fraction(self) -> float:
        if not self.episodes:
            return 0.0
        return float(np.mean([episode_has_regrasp(e) for e in self.episodes]))

    def validate(self, tolerance: float):
        for ep in self.episodes:
            ep.validate(tolerance)

    def stats_table(self) -> str:
        lines = [
            f"{'episodes':<18}{len(self):>10d}",
            f"{'success':<18}{100.0 * self.success_fraction():>9.1f}%",
            f"{'mean steps':<18}{self.mean_steps():>10.1f}",
            f"{'mean path (cm)':<18}{100.0 * self.mean_path_length():>10.2f}",
            f"{'regrasp frac':<18}{self.regrasp_fraction():>10.3f}",
        ]
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# persistence


def save_demos(demos: DemoSet, path):
    with open(path, "w", encoding="utf-8") as fh:
        header = {"kind": "surgisim-demos", "version": DEMO_SCHEMA_VERSION,
                  "task": demos.task, "count": len(demos)}
        fh.write(json.dumps(header) + "\n")
        for ep in demos.episodes:
            rec = {
                "episode_id": ep.episode_id,
                "task": ep.task,
                "seed": ep.seed,
                "success": ep.success,
                "path_length": ep.path_length,
                "observations": ep.observations.tolist(),
                "achieved_goals": ep.achieved_goals.tolist(),
                "desired_goals": ep.desired_goals.tolist(),
                "actions": ep.actions.tolist(),
                "rewards": ep.rewards.tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def load_demos(path) -> DemoSet:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(1, "empty demo file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(1, f"bad header: {exc}") from None
    if header.get("kind") != "surgisim-demos":
        raise FormatError(1, "not a demo file (missing kind)")
    if header.get("version") != DEMO_SCHEMA_VERSION:
        raise VersionMismatch(
            f"unsupported demo schema version {header.get('version')!r}")
    demos = DemoSet(task=header.get("task", ""))
    expected = header.get("count")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(lineno, f"bad episode record: {exc}") from None
        try:
            ep = Episode(
                episode_id=int(rec["episode_id"]),
                task=rec["task"],
                seed=int(rec["seed"]),
                observations=np.asarray(rec["observations"], dtype=float),
                achieved_goals=np.asarray(rec["achieved_goals"], dtype=float),
                desired_goals=np.asarray(rec["desired_goals"], dtype=float),
                actions=np.asarray(rec["actions"], dtype=float),
                rewards=np.asarray(rec["rewards"], dtype=float),
                success=bool(rec["success"]),
                path_length=float(rec["path_length"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(lineno, f"malformed episode: {exc}") from None
        if ep.observations.shape[0] != ep.actions.shape[0] + 1:
            raise FormatError(lineno, "observation/action length mismatch")
        demos.episodes.append(ep)
    if expected is not None and expected != len(demos):
        raise FormatError(1, f"header count {expected} != {len(demos)} episodes")
    return demos


# ---------------------------------------------------------------------------
# recording


def record(env: TaskEnv, policy, seed=None, episode_id: int = 0) -> Episode:
    """Roll the policy in the environment to termination and capture everything."""
    obs = env.reset(seed=seed)
    if hasattr(policy, "reset"):
        policy.reset()
    observations = [obs.vector.copy()]
    achieved = [obs.achieved_goal.copy()]
    desired = [obs.desired_goal.copy()]
    actions, rewards = [], []
    info = {"is_success": False}
    while not env.done:
        action = np.asarray(policy(obs), dtype=float)
        obs, reward, done, info = env.step(action)
        actions.append(action.copy())
        rewards.append(float(reward))
        observations.append(obs.vector.copy())
        achieved.append(obs.achieved_goal.copy())
        desired.append(obs.desired_goal.copy())
    return Episode(
        episode_id=episode_id,
        task=env.task,
        seed=-1 if seed is None else int(seed),
        observations=np.asarray(observations),
        achieved_goals=np.asarray(achieved),
        desired_goals=np.asarray(desired),
        actions=np.asarray(actions).reshape(len(actions), -1),
        rewards=np.asarray(rewards),
        success=bool(info.get("is_success", False)),
        path_length=float(env.path_length),
    )


# ---------------------------------------------------------------------------
# generator policies


class ScriptedPolicy:
    """Demonstration script: align above the object, descend, grasp, carry.

    The rules are memoryless functions of the observation: the jaw closes
    exactly when the tip is within grasp range (and reopens automatically if
    it closed on nothing), and the position command is one proportional law
    toward the current target point.  Keeping actions a near-function of the
    observation makes the demonstrations cleanly clonable.
    """

    APPROACH_HEIGHT = 0.016     # m above the object before descending
    ALIGN_TOL = 0.002           # m horizontal alignment before descending
    CLOSE_RANGE = 0.006         # m, close the jaw inside this range (attachment
                                # happens later, on entering the grasp radius)
    REOPEN_RANGE = 0.0075       # m, closed-but-empty beyond this reopens
    HOLD_RANGE = 0.004          # m, held iff within the world grasp radius
    SPEED = 0.14                # fraction of the 1 cm/step action scale
    DESCEND_FACTOR = 0.55       # deliberate final descent

    def __init__(self, task: str = "needle_pick", speed: float | None = None):
        self.task = task
        self.speed = self.SPEED if speed is None else speed
        self.reset()

    def reset(self, rng=None):
        pass

    # -- helpers ---------------------------------------------------------

    @staticmethod
    def _clip_ws(p):
        half = WORKSPACE_SIDE / 2.0
        return np.clip(p, -half, half)

    def _move_toward(self, obs, waypoint, jaw_cmd, speed=None):
        delta = (waypoint - obs.eef_position) / 0.01
        m = float(np.max(np.abs(delta)))
        if m > 1.0:
            delta = delta / m
        a = np.zeros(5)
        a[:3] = delta * (self.speed if speed is None else speed)
        a[4] = jaw_cmd
        return a

    def _grasped(self, obs) -> bool:
        return obs.jaw < 0 and float(np.linalg.norm(obs.object_position
                                                    - obs.eef_position)) < self.HOLD_RANGE

    def __call__(self, obs):
        obj = obs.object_position
        eef = obs.eef_position
        if self._grasped(obs):
            wp = self._clip_ws(eef + (obs.desired_goal - obj))
            remaining = float(np.linalg.norm(obs.desired_goal - obj))
            careful = max(0.35, min(1.0, remaining / 0.03))
            return self._move_toward(obs, wp, jaw_cmd=-1.0,
                                     speed=self.speed * careful)
        d = float(np.linalg.norm(obj - eef))
        if d <= self.CLOSE_RANGE:
            jaw_cmd = -1.0
        elif obs.jaw < 0 and d <= self.REOPEN_RANGE:
            jaw_cmd = -1.0          # hysteresis: stay closed while still near
        else:
            jaw_cmd = 1.0
        horiz = float(np.linalg.norm(obj[:2] - eef[:2]))
        if horiz > self.ALIGN_TOL and eef[2] < obj[2] + 0.5 * self.APPROACH_HEIGHT:
            wp = self._clip_ws(obj + np.array([0.0, 0.0, self.APPROACH_HEIGHT]))
            return self._move_toward(obs, wp, jaw_cmd=jaw_cmd)
        if horiz > self.ALIGN_TOL:
            wp = self._clip_ws(np.array([obj[0], obj[1], eef[2]]))
            return self._move_toward(obs, wp, jaw_cmd=jaw_cmd)
        return self._move_toward(obs, obj, jaw_cmd=jaw_cmd,
                                 speed=self.speed * self.DESCEND_FACTOR)


@dataclass
class NoiseConfig:
    """Humanoid overlay: OU directional bias plus occasional missed grasps."""

    theta: float = 0.15          # OU mean reversion
    sigma: float = 0.65          # OU diffusion per step (action units)
    rot_sigma: float = 0.15      # OU diffusion of the wrist wobble
    yaw_restore: float = 0.8     # proportional correction pulling the tool level
    miss_probability: float = 0.28
    miss_offset: float = 0.010   # m, lateral offset of the deliberate bad grasp
    speed_boost: float = 1.25    # corrective demos move faster along curvy paths


class CorrectivePolicy(ScriptedPolicy):
    """Scripted policy with human-like curvature and missed-grasp recovery.

    The directional bias rides on top of travel commands but fades near the
    waypoint, emulating an operator who drifts along the way and corrects on
    final approach.  A configurable fraction of episodes deliberately closes
    the jaw next to the object; the memoryless reopen rule then produces the
    recovery-and-regrasp pattern.
    """

    NOISE_FADE_RANGE = 0.025   # m; bias fully suppressed at the waypoint

    def __init__(self, task: str = "needle_pick", noise: NoiseConfig | None = None,
                 rng=None):
        self.noise = noise if noise is not None else NoiseConfig()
        self._rng = np.random.default_rng() if rng is None else rng
        super().__init__(task)
        self.speed = self.SPEED * self.noise.speed_boost

    def reset(self, rng=None):
        if rng is not None:
            self._rng = rng
        self._ou = np.zeros(3)
        self._ou_rot = 0.0
        self._miss_planned = bool(self._rng.random() < self.noise.miss_probability)
        self._miss_dir = None
        self._missed = False
        self._miss_close_steps = 0

    def _move_toward(self, obs, waypoint, jaw_cmd, speed=None):
        a = super()._move_toward(obs, waypoint, jaw_cmd, speed)
        n = self.noise
        self._ou = self._ou - n.theta * self._ou + n.sigma * self._rng.standard_normal(3)
        if not self._grasped(obs) and float(np.linalg.norm(
                obs.object_position - obs.eef_position)) < 0.02:
            return a   # steady hands inside the grasp corridor
        fade = min(1.0, float(np.linalg.norm(waypoint - obs.eef_position))
                   / self.NOISE_FADE_RANGE)
        # curvature, not hesitation: keep only the bias component perpendicular
        # to the commanded direction so the tool weaves without stalling
        bias = self._ou.copy()
        norm = float(np.linalg.norm(a[:3]))
        if norm > 1e-12:
            direction = a[:3] / norm
            bias -= float(bias @ direction) * direction
        a[:3] = np.clip(a[:3] + bias * self.speed * fade, -1.0, 1.0)
        # wrist wobble with a proportional correction pulling the tool level
        self._ou_rot = (self._ou_rot - n.theta * self._ou_rot
                        + n.rot_sigma * self._rng.standard_normal())
        a[3] = float(np.clip(self._ou_rot * fade - n.yaw_restore * obs.yaw, -1.0, 1.0))
        return a

    def __call__(self, obs):
        if self._miss_planned and not self._missed and not self._grasped(obs):
            if self._miss_dir is None:
                ang = self._rng.uniform(0, 2 * np.pi)
                self._miss_dir = np.array([np.cos(ang), np.sin(ang), 0.0])
            bad = self._clip_ws(obs.object_position
                                + self.noise.miss_offset * self._miss_dir)
            eef = obs.eef_position
            d_bad = float(np.linalg.norm(bad - eef))
            if d_bad <= self.CLOSE_RANGE or self._miss_close_steps > 0:
                self._miss_close_steps += 1
                if self._miss_close_steps >= 3:
                    self._missed = True      # reopen rule takes over next step
                a = self._move_toward(obs, bad, jaw_cmd=-1.0, speed=0.0)
                return a
            horiz = float(np.linalg.norm(bad[:2] - eef[:2]))
            if horiz > self.ALIGN_TOL and eef[2] < bad[2] + 0.5 * self.APPROACH_HEIGHT:
                wp = self._clip_ws(bad + np.array([0.0, 0.0, self.APPROACH_HEIGHT]))
            elif horiz > self.ALIGN_TOL:
                wp = self._clip_ws(np.array([bad[0], bad[1], eef[2]]))
            else:
                wp = bad
            return self._move_toward(obs, wp, jaw_cmd=1.0)
        return super().__call__(obs)


POLICIES = {"script": ScriptedPolicy, "corrective": CorrectivePolicy}


def make_policy(name: str, task: str = "needle_pick", rng=None):
    if name == "script":
        return ScriptedPolicy(task)
    if name == "corrective":
        return CorrectivePolicy(task, rng=rng)
    raise ValueError(f"unknown policy {name!r}; choose from {sorted(POLICIES)}")


def generate_demos(env: TaskEnv, policy, n: int = 100, seed: int = 0,
                   keep: str = "successful") -> DemoSet:
    """Generate ``n`` kept episodes (failures discarded and resampled)."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    demos = DemoSet(task=env.task)
    attempts = 0
    successes = 0
    while len(demos.episodes) < n:
        if attempts >= 10 * n and successes < 0.01 * attempts:
            raise GenerationStalled(
                f"policy succeeded {successes}/{attempts}; aborting generation")
        ep_seed = int(rng.integers(0, 2**31 - 1))
        if hasattr(policy, "reset"):
            policy.reset(rng=np.random.default_rng(int(rng.integers(0, 2**31 - 1))))
        episode = record(env, _NoResetProxy(policy), seed=ep_seed,
                         episode_id=len(demos.episodes))
        attempts += 1
        if episode.success:
            successes += 1
        if keep == "all" or episode.success:
            demos.episodes.append(episode)
    return demos


class _NoResetProxy:
    """record() resets policies without a seed; generation already did it."""

    def __init__(self, policy):
        self._policy = policy

    def __call__(self, obs):
        return self._policy(obs)
