"""Kinematic simulation world hosting goal-conditioned surgical tasks.

The world is deliberately simple: a single PSM arm over a 10 cm cubic
workspace, primitive bodies, and grasping realized as a rigid attach
constraint that freezes the body pose in the jaw frame while the jaw is
closed (j < 0).  There is no contact response; non-grasped bodies only
move when released somewhere else.  Rewards are sparse {0, -1} on the
distance between the task object and the goal.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import control
from .control import ControllerState, MotorLimits, PDGains
from .kinematics import (
    AtSingularity,
    KinematicChain,
    Pose,
    Unreachable,
    dh_transform,
    psm_chain,
    quat_from_matrix,
    solve_psm_from_matrix,
)

log = logging.getLogger(__name__)

WORKSPACE_SIDE = 0.10      # m, side of the cubic workspace
TOLERANCE = 0.005          # m, goal tolerance (delta)
HORIZON = 150              # steps per episode
POSITION_SCALE = 0.01      # m of commanded motion per unit action
ROTATION_SCALE = math.radians(30)
GRASP_RADIUS = 0.004       # m, jaw tip to grasp point
JAW_OPEN = 0.9             # rad
JAW_CLOSED_MIN = -0.2      # rad
RCM_HEIGHT = 0.13          # m, RCM pivot above the workspace center

# Arm servo preset: snappier than the library default so one environment
# step settles in a few dozen ticks.
ARM_GAINS = dict(kp=8.0, kd=0.005, dt=0.01)
ARM_VELOCITY_CAPS = [2.0, 2.0, 0.4, 4.0, 4.0, 4.0]
ARM_STEP_CAPS = [0.04, 0.04, 0.008, 0.08, 0.08, 0.08]
SETTLE_MAX_TICKS = 120
SETTLE_TOL = 1e-8


class WorldError(Exception):
    pass


class EpisodeDone(WorldError):
    pass


class UnreachableTarget(WorldError):
    pass


@dataclass
class Shape:
    """Render/grasp primitive; ``parts`` holds (offset Pose, Shape) for compounds."""

    kind: str                      # box | cylinder | torus | compound
    size: tuple = ()               # box: (sx, sy, sz); cylinder: (r, h); torus: (R, r)
    parts: list = field(default_factory=list)


@dataclass
class Body:
    id: str
    shape: Shape
    pose: Pose
    graspable: bool = False
    color: str = "gray"


@dataclass
class GraspConstraint:
    arm_id: str
    body_id: str
    relative: Pose  # body pose expressed in the jaw frame, frozen at grasp time


@dataclass
class Observation:
    """Fixed-layout observation: [eef(3), yaw(1), jaw(1), obj(3), obj-eef(3)]."""

    vector: np.ndarray
    achieved_goal: np.ndarray
    desired_goal: np.ndarray

    def to_dict(self):
        return {
            "observation": self.vector.copy(),
            "achieved_goal": self.achieved_goal.copy(),
            "desired_goal": self.desired_goal.copy(),
        }

    @property
    def eef_position(self):
        return self.vector[:3]

    @property
    def yaw(self):
        return float(self.vector[3])

    @property
    def jaw(self):
        return float(self.vector[4])

    @property
    def object_position(self):
        return self.vector[5:8]


def compute_reward(achieved_goal, desired_goal, delta: float = TOLERANCE):
    """Sparse reward: 0 within ``delta`` of the goal, -1 outside (broadcasts)."""
    a = np.asarray(achieved_goal, dtype=float)
    d = np.asarray(desired_goal, dtype=float)
    dist = np.linalg.norm(a - d, axis=-1)
    return np.where(dist < delta, 0.0, -1.0)


def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class Arm:
    """One PSM with its servo loop and jaw state."""

    def __init__(self, arm_id: str, chain: KinematicChain):
        self.id = arm_id
        self.chain = chain
        self.gains = PDGains(**ARM_GAINS)
        self.limits = MotorLimits(ARM_VELOCITY_CAPS, ARM_STEP_CAPS)
        self.q = chain.neutral_joints()
        self.jaw = JAW_OPEN
        self.state = ControllerState.zeros(chain.arity)
        # The fast target solve assumes the RCM frame is axis-aligned.
        if abs(chain.base_pose.orientation[0]) < 1.0 - 1e-12:
            raise ValueError("arm base pose must be a pure translation")
        self._base_t = chain.base_pose.position
        self._tip_cache = None
        # tool-down orientation at neutral joints; yaw rotates it about world z
        self._r_down = self._fk(self.q)[0].copy()

    def _fk(self, q):
        """(rotation, position) of the jaw tip, local math only."""
        t = self.chain.base_pose.to_matrix()
        for row in self.chain.rows:
            t = t @ dh_transform(row, q[row.joint_index])
        return t[:3, :3], t[:3, 3]

    def reset(self):
        self.q = self.chain.neutral_joints()
        self.jaw = JAW_OPEN
        self.state = ControllerState.zeros(self.chain.arity)
        self._tip_cache = None

    def tip_pose(self) -> Pose:
        rot, p = self.tip()
        return Pose(p, quat_from_matrix(rot))

    def tip(self):
        if self._tip_cache is None:
            self._tip_cache = self._fk(self.q)
        return self._tip_cache

    def yaw_of(self, rot) -> float:
        m = rot @ self._r_down.T
        return math.atan2(m[1, 0], m[0, 0])

    def solve_target(self, position, yaw):
        rot = _rz(yaw) @ self._r_down
        return solve_psm_from_matrix(rot, position - self._base_t, self.chain, seed=self.q)

    def settle_to(self, q_target):
        self.q, self.state, ticks = control.settle(
            q_target, self.q, self.gains, self.limits, self.state,
            joint_limits=self.chain.joint_limits, max_ticks=SETTLE_MAX_TICKS,
            tol=SETTLE_TOL)
        self._tip_cache = None
        return ticks


class TaskEnv:
    """Goal-conditioned task environment over the kinematic world."""

    def __init__(self, task: str, bodies: list[Body], object_ids: list[str],
                 goal_ids: list[str] | None = None, seed=None,
                 workspace_center=(0.0, 0.0, 0.0)):
        self.task = task
        self.tolerance = TOLERANCE
        self.horizon = HORIZON
        center = np.asarray(workspace_center, dtype=float)
        half = WORKSPACE_SIDE / 2.0
        self.workspace_lo = center - half
        self.workspace_hi = center + half
        base = Pose(center + np.array([0.0, 0.0, RCM_HEIGHT]),
                    np.array([1.0, 0.0, 0.0, 0.0]))
        self.arm = Arm("psm1", psm_chain(base_pose=base))
        self._template_bodies = [
            Body(b.id, b.shape, b.pose, b.graspable, b.color) for b in bodies]
        self.bodies: dict[str, Body] = {}
        self.object_ids = list(object_ids)
        self.goal_ids = list(goal_ids) if goal_ids else []
        self.grasps: dict[str, GraspConstraint] = {}
        self.goal = np.zeros(3)
        self.goals: dict[str, np.ndarray] = {}
        self.step_count = 0
        self._done = True
        self._rng = np.random.default_rng(seed)
        self.path_length = 0.0
        self.unreachable_count = 0

    # -- sampling -----------------------------------------------------------

    def _sample_point(self, rng, margin: float = 0.005):
        lo = self.workspace_lo + margin
        hi = self.workspace_hi - margin
        return lo + rng.random(3) * (hi - lo)

    def _sample_layout(self, rng):
        raise NotImplementedError

    def reset(self, seed=None) -> Observation:
        rng = np.random.default_rng(seed) if seed is not None else self._rng
        self.arm.reset()
        self.bodies = {
            b.id: Body(b.id, b.shape, b.pose, b.graspable, b.color)
            for b in self._template_bodies}
        self.grasps.clear()
        self._sample_layout(rng)
        self.step_count = 0
        self._done = False
        self.path_length = 0.0
        self.unreachable_count = 0
        self._eef_prev = self.arm.tip()[1].copy()
        return self.observation()

    # -- stepping -----------------------------------------------------------

    def apply_action(self, action, arm_id: str = "psm1"):
        action = np.clip(np.asarray(action, dtype=float).reshape(5), -1.0, 1.0)
        arm = self.arm
        rot, tip = arm.tip()
        yaw = arm.yaw_of(rot)
        target_pos = np.clip(tip + action[:3] * POSITION_SCALE,
                             self.workspace_lo, self.workspace_hi)
        target_yaw = yaw + float(action[3]) * ROTATION_SCALE
        target_yaw = math.atan2(math.sin(target_yaw), math.cos(target_yaw))
        try:
            q_target = arm.solve_target(target_pos, target_yaw)
        except (Unreachable, AtSingularity) as exc:
            self.unreachable_count += 1
            log.debug("unreachable target, action dropped: %s", exc)
            return
        arm.settle_to(q_target)
        arm.jaw = float(np.clip(arm.jaw + float(action[4]), JAW_CLOSED_MIN, JAW_OPEN))

    def check_grasp(self, arm_id: str = "psm1") -> bool:
        arm = self.arm
        held = self.grasps.get(arm.id)
        jaw_pose = arm.tip_pose()
        if held is not None:
            if arm.jaw >= 0.0:
                # release: body stays at its current (followed) pose
                self.bodies[held.body_id].pose = jaw_pose.compose(held.relative)
                del self.grasps[arm.id]
                return False
            self.bodies[held.body_id].pose = jaw_pose.compose(held.relative)
            return True
        if arm.jaw < 0.0:
            tip = jaw_pose.position
            for body in self.bodies.values():
                if not body.graspable:
                    continue
                if any(g.body_id == body.id for g in self.grasps.values()):
                    continue
                if float(np.linalg.norm(body.pose.position - tip)) < GRASP_RADIUS:
                    rel = jaw_pose.inverse().compose(body.pose)
                    self.grasps[arm.id] = GraspConstraint(arm.id, body.id, rel)
                    return True
        return False

    def active_object(self) -> Body:
        raise NotImplementedError

    def active_goal(self) -> np.ndarray:
        raise NotImplementedError

    def is_success(self) -> bool:
        raise NotImplementedError

    def observation(self) -> Observation:
        rot, tip = self.arm.tip()
        yaw = self.arm.yaw_of(rot)
        obj = self.active_object().pose.position
        vec = np.concatenate([
            tip, [yaw, self.arm.jaw], obj, obj - tip]).astype(float)
        return Observation(vec, obj.copy(), self.active_goal().copy())

    def step(self, action):
        if self._done:
            raise EpisodeDone("episode is done; call reset()")
        self.apply_action(action)
        self.check_grasp()
        self.step_count += 1
        tip = self.arm.tip()[1]
        self.path_length += float(np.linalg.norm(tip - self._eef_prev))
        self._eef_prev = tip.copy()
        obs = self.observation()
        reward = float(compute_reward(obs.achieved_goal, obs.desired_goal, self.tolerance))
        success = self.is_success()
        done = success or self.step_count >= self.horizon
        self._done = done
        info = {"is_success": success, "grasped": self.arm.id in self.grasps}
        return obs, reward, done, info

    @property
    def done(self) -> bool:
        return self._done


class NeedlePickEnv(TaskEnv):
    """Reach the needle, grasp it, and carry it to the sampled goal point."""

    def __init__(self, seed=None, bodies=None):
        if bodies is None:
            bodies = default_needle_pick_bodies()
        super().__init__("needle_pick", bodies, object_ids=["needle"], seed=seed)

    def _sample_layout(self, rng):
        needle = self.bodies["needle"]
        pos = self._sample_point(rng)
        needle.pose = Pose(pos, needle.pose.orientation)
        while True:
            goal = self._sample_point(rng)
            if np.linalg.norm(goal - pos) >= 2 * self.tolerance:
                break
        self.goal = goal
        self.goals = {"needle": goal}

    def active_object(self) -> Body:
        return self.bodies["needle"]

    def active_goal(self) -> np.ndarray:
        return self.goal

    def is_success(self) -> bool:
        d = float(np.linalg.norm(self.bodies["needle"].pose.position - self.goal))
        return d < self.tolerance


class PickAndPlaceEnv(TaskEnv):
    """Place every colored jack on the tray of the same color."""

    COLORS = ("red", "blue")

    def __init__(self, seed=None, bodies=None):
        if bodies is None:
            bodies = default_pick_and_place_bodies()
        object_ids = [f"jack_{c}" for c in self.COLORS]
        goal_ids = [f"tray_{c}" for c in self.COLORS]
        super().__init__("pick_and_place", bodies, object_ids, goal_ids, seed=seed)

    def _sample_layout(self, rng):
        floor = self.workspace_lo[2] + 0.006
        placed = []
        for c in self.COLORS:
            while True:
                p = self._sample_point(rng)
                p[2] = floor
                if all(np.linalg.norm(p[:2] - q[:2]) >= 0.02 for q in placed):
                    break
            placed.append(p)
            self.bodies[f"tray_{c}"].pose = Pose(p, np.array([1.0, 0, 0, 0]))
        self.goals = {}
        for c in self.COLORS:
            tray = self.bodies[f"tray_{c}"].pose.position
            while True:
                p = self._sample_point(rng)
                if (np.linalg.norm(p - tray) >= 2 * self.tolerance
                        and all(np.linalg.norm(p[:2] - q[:2]) >= 0.02 for q in placed)):
                    break
            placed.append(p)
            self.bodies[f"jack_{c}"].pose = Pose(p, np.array([1.0, 0, 0, 0]))
            self.goals[f"jack_{c}"] = tray.copy()
        self.goal = self._active_goal_value()

    def _placed(self, color) -> bool:
        jack = self.bodies[f"jack_{color}"].pose.position
        tray = self.bodies[f"tray_{color}"].pose.position
        return float(np.linalg.norm(jack - tray)) < self.tolerance

    def _active_color(self) -> str:
        for c in self.COLORS:
            if not self._placed(c):
                return c
        return self.COLORS[-1]

    def _active_goal_value(self):
        return self.bodies[f"tray_{self._active_color()}"].pose.position.copy()

    def active_object(self) -> Body:
        return self.bodies[f"jack_{self._active_color()}"]

    def active_goal(self) -> np.ndarray:
        self.goal = self._active_goal_value()
        return self.goal

    def is_success(self) -> bool:
        return all(self._placed(c) for c in self.COLORS)


def default_needle_pick_bodies() -> list[Body]:
    return [
        Body("needle", Shape("torus", (0.01, 0.001)), Pose.identity(),
             graspable=True, color="silver"),
        Body("tray", Shape("box", (0.05, 0.035, 0.004)),
             Pose(np.array([0.0, 0.0, -0.048]), np.array([1.0, 0, 0, 0])),
             graspable=False, color="slate"),
    ]


def default_pick_and_place_bodies() -> list[Body]:
    jack = Shape("compound", parts=[
        (Pose.identity(), Shape("cylinder", (0.0012, 0.012))),
        (Pose(np.zeros(3), np.array([math.cos(math.pi / 4), 0.0, math.sin(math.pi / 4), 0.0])),
         Shape("cylinder", (0.0012, 0.012))),
        (Pose(np.zeros(3), np.array([math.cos(math.pi / 4), math.sin(math.pi / 4), 0.0, 0.0])),
         Shape("cylinder", (0.0012, 0.012))),
    ])
    bodies = []
    for c in PickAndPlaceEnv.COLORS:
        bodies.append(Body(f"jack_{c}", jack, Pose.identity(), graspable=True, color=c))
        bodies.append(Body(f"tray_{c}", Shape("box", (0.024, 0.024, 0.003)),
                           Pose.identity(), graspable=False, color=c))
    return bodies


def needle_pick(seed=None, scene=None) -> NeedlePickEnv:
    bodies = load_scene(scene) if scene else None
    return NeedlePickEnv(seed=seed, bodies=bodies)


def pick_and_place(seed=None, scene=None) -> PickAndPlaceEnv:
    bodies = load_scene(scene) if scene else None
    return PickAndPlaceEnv(seed=seed, bodies=bodies)


TASKS = {"needle_pick": needle_pick, "pick_and_place": pick_and_place}


def make_env(task: str, seed=None, scene=None) -> TaskEnv:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {sorted(TASKS)}")
    return TASKS[task](seed=seed, scene=scene)


class SceneFormatError(ValueError):
    pass


def load_scene(path) -> list[Body]:
    """Plain-text scene: ``id kind dims x y z color graspable`` per line."""
    bodies = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            cells = body.split()
            if len(cells) != 8:
                raise SceneFormatError(f"line {lineno}: expected 8 columns, got {len(cells)}")
            try:
                dims = tuple(float(v) for v in cells[2].split(",") if v)
                pos = np.array([float(cells[3]), float(cells[4]), float(cells[5])])
                graspable = bool(int(cells[7]))
            except ValueError as exc:
                raise SceneFormatError(f"line {lineno}: {exc}") from None
            bodies.append(Body(cells[0], Shape(cells[1], dims),
                               Pose(pos, np.array([1.0, 0, 0, 0])),
                               graspable=graspable, color=cells[6]))
    if not bodies:
        raise SceneFormatError("scene file defines no bodies")
    return bodies
