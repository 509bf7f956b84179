"""Arm kinematics for the desk-scale surgical simulator.

Two arms are modeled after the dVRK family: a 6-DOF instrument arm (PSM)
and a 4-DOF camera arm (ECM), both pivoting about a remote center of
motion (RCM).  Chains are described by modified-DH rows (a and alpha are
indexed by the previous link), composed as

    T_i = Rx(alpha_prev) . Tx(a_prev) . Tz(d_i) . Rz(theta_i)

with the joint variable folded into d_i (prismatic) or theta_i (revolute).
Forward kinematics is the product of the rows between ``base_pose`` (the
RCM frame) and ``tool_offset`` (jaw tip).  Inverse kinematics is closed
form for both arms.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

# Link constants (meters) from the published dVRK PSM kit: RCM-to-carriage
# length, instrument shaft length, wrist pitch-to-yaw offset.
DEFAULT_L1 = 0.4318
DEFAULT_L2 = 0.4162
DEFAULT_L3 = 0.0091

_QUAT_NORM_TOL = 1e-6
_SINGULARITY_EPS = 1e-8
_IK_VERIFY_TOL = 1e-7


class KinematicsError(Exception):
    """Base class for kinematics failures."""


class JointOutOfRange(KinematicsError):
    pass


class Unreachable(KinematicsError):
    """Target pose has no in-limit solution."""


class AtSingularity(KinematicsError):
    """Target pose lies at (or numerically near) a wrist/shaft singularity."""


# ---------------------------------------------------------------------------
# quaternions (scalar-first: w, x, y, z)


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = math.sqrt(float(q @ q))
    if n == 0.0:
        raise ValueError("zero quaternion")
    return q / n


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q, v):
    """Rotate 3-vector v by unit quaternion q."""
    w, x, y, z = q
    u = np.array([x, y, z])
    uv = np.cross(u, v)
    return np.asarray(v, dtype=float) + 2.0 * (w * uv + np.cross(u, uv))


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(m):
    m = np.asarray(m, dtype=float)
    t = np.trace(m[:3, :3])
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        w = 0.25 * s
        x = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 2] - m[2, 0]) / s
        z = (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        w = (m[2, 1] - m[1, 2]) / s
        x = 0.25 * s
        y = (m[0, 1] + m[1, 0]) / s
        z = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        w = (m[0, 2] - m[2, 0]) / s
        x = (m[0, 1] + m[1, 0]) / s
        y = 0.25 * s
        z = (m[1, 2] + m[2, 1]) / s
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        w = (m[1, 0] - m[0, 1]) / s
        x = (m[0, 2] + m[2, 0]) / s
        y = (m[1, 2] + m[2, 1]) / s
        z = 0.25 * s
    q = np.array([w, x, y, z])
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_angle(qa, qb) -> float:
    """Rotation angle (rad) taking orientation qa to qb."""
    d = abs(float(np.dot(qa, qb)))
    return 2.0 * math.acos(min(1.0, d))


@dataclass(frozen=True)
class Pose:
    """Rigid pose: position (m) and unit quaternion orientation (w,x,y,z)."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(3)
        q = np.asarray(self.orientation, dtype=float).reshape(4)
        n = math.sqrt(float(q @ q))
        if abs(n - 1.0) > _QUAT_NORM_TOL:
            raise ValueError(f"orientation not a unit quaternion (norm {n})")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", q / n)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    @staticmethod
    def from_matrix(m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return Pose(m[:3, 3].copy(), quat_from_matrix(m[:3, :3]))

    def to_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.orientation)
        m[:3, 3] = self.position
        return m

    def compose(self, other: "Pose") -> "Pose":
        """self then other: returns self ∘ other (other expressed in self's frame)."""
        return Pose(
            self.position + quat_rotate(self.orientation, other.position),
            quat_mul(self.orientation, other.orientation),
        )

    def inverse(self) -> "Pose":
        qi = quat_conj(self.orientation)
        return Pose(-quat_rotate(qi, self.position), qi)

    def transform_point(self, p) -> np.ndarray:
        return self.position + quat_rotate(self.orientation, p)


# ---------------------------------------------------------------------------
# chain description


class JointKind(Enum):
    REVOLUTE = "revolute"
    PRISMATIC = "prismatic"


@dataclass(frozen=True)
class DHRow:
    """One modified-DH row; the joint variable enters d (prismatic) or theta (revolute)."""

    a_prev: float
    alpha_prev: float
    d_offset: float
    theta_offset: float
    joint_kind: JointKind
    joint_index: int


@dataclass
class KinematicChain:
    name: str
    rows: list[DHRow]
    l1: float
    l2: float
    l3: float
    joint_limits: np.ndarray  # (n, 2) [min, max]
    base_pose: Pose = field(default_factory=Pose.identity)
    tool_offset: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        self.joint_limits = np.asarray(self.joint_limits, dtype=float).reshape(len(self.rows), 2)
        if not np.all(np.isfinite(self.joint_limits)):
            raise ValueError("joint limits must be finite")
        if not np.all(self.joint_limits[:, 0] < self.joint_limits[:, 1]):
            raise ValueError("joint limits must satisfy min < max")

    @property
    def arity(self) -> int:
        return len(self.rows)

    def neutral_joints(self) -> np.ndarray:
        """All-zero joints with the prismatic axis pulled to mid-range."""
        q = np.zeros(self.arity)
        for row in self.rows:
            if row.joint_kind is JointKind.PRISMATIC:
                lo, hi = self.joint_limits[row.joint_index]
                q[row.joint_index] = 0.5 * (lo + hi)
        return q

    def validate_joints(self, q, tol: float = 1e-9) -> np.ndarray:
        q = np.asarray(q, dtype=float).reshape(-1)
        if q.shape[0] != self.arity:
            raise JointOutOfRange(
                f"{self.name}: expected {self.arity} joints, got {q.shape[0]}")
        lo, hi = self.joint_limits[:, 0], self.joint_limits[:, 1]
        if np.any(q < lo - tol) or np.any(q > hi + tol):
            bad = np.where((q < lo - tol) | (q > hi + tol))[0]
            raise JointOutOfRange(
                f"{self.name}: joint(s) {bad.tolist()} outside limits: q={q.tolist()}")
        return q

    def clip_joints(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float).reshape(-1)
        return np.clip(q, self.joint_limits[:, 0], self.joint_limits[:, 1])

    def random_joints(self, rng) -> np.ndarray:
        lo, hi = self.joint_limits[:, 0], self.joint_limits[:, 1]
        return lo + rng.random(self.arity) * (hi - lo)


def dh_transform(row: DHRow, q: float) -> np.ndarray:
    """4x4 transform Rx(alpha_prev)·Tx(a_prev)·Tz(d)·Rz(theta) for one row."""
    d = row.d_offset
    theta = row.theta_offset
    if row.joint_kind is JointKind.PRISMATIC:
        d = d + q
    else:
        theta = theta + q
    ca, sa = math.cos(row.alpha_prev), math.sin(row.alpha_prev)
    ct, st = math.cos(theta), math.sin(theta)
    # Expanded product; translation column is Rx(alpha)·[a, 0, d].
    return np.array([
        [ct, -st, 0.0, row.a_prev],
        [st * ca, ct * ca, -sa, -d * sa],
        [st * sa, ct * sa, ca, d * ca],
        [0.0, 0.0, 0.0, 1.0],
    ])


def fk_frames(chain: KinematicChain, joints) -> list[np.ndarray]:
    """World transforms of the base frame and every DH frame (tool excluded)."""
    q = chain.validate_joints(joints)
    t = chain.base_pose.to_matrix()
    frames = [t]
    for row in chain.rows:
        t = t @ dh_transform(row, q[row.joint_index])
        frames.append(t)
    return frames


def forward_kinematics(chain: KinematicChain, joints) -> Pose:
    """Tip pose in the world frame: base ∘ (∏ rows) ∘ tool_offset."""
    tip = fk_frames(chain, joints)[-1] @ chain.tool_offset.to_matrix()
    return Pose.from_matrix(tip)


# ---------------------------------------------------------------------------
# analytical inverse kinematics
#
# In the RCM frame the shaft direction for the first two joints is
#     d(q1, q2) = [sin q1 cos q2, -sin q2, -cos q1 cos q2]
# and the wrist point sits at o4 = s·d with insertion s = q3 - l1 + l2.
# For the PSM the jaw tip adds an l3 offset perpendicular to the jaw z-axis:
#     p = s·d + l3·u,   u ⟂ z6,   y4 ∝ z6 × p.
# Everything below follows from reading q5, q6 out of the tip frame axes.


def _cross3(a, b) -> np.ndarray:
    return np.array([
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ])


def _shaft_direction(q1: float, q2: float) -> np.ndarray:
    return np.array([
        math.sin(q1) * math.cos(q2),
        -math.sin(q2),
        -math.cos(q1) * math.cos(q2),
    ])


def _solve_q1_q2(d) -> tuple[float, float]:
    dy = min(1.0, max(-1.0, float(d[1])))
    q2 = math.asin(-dy)
    cx, cz = float(d[0]), float(-d[2])
    if abs(cx) < _SINGULARITY_EPS and abs(cz) < _SINGULARITY_EPS:
        raise AtSingularity("shaft aligned with the RCM y-axis; q1 undefined")
    q1 = math.atan2(cx, cz)
    return q1, q2


def _local_target(chain: KinematicChain, target: Pose) -> tuple[np.ndarray, np.ndarray]:
    local = chain.base_pose.inverse().compose(target).compose(chain.tool_offset.inverse())
    return quat_to_matrix(local.orientation), local.position


def _pick_branch(candidates, seed, chain, position):
    if not candidates:
        raise Unreachable(
            f"{chain.name}: no in-limit solution for target at {np.round(position, 4).tolist()}")
    if seed is None:
        seed = chain.neutral_joints()
    seed = np.asarray(seed, dtype=float)

    def excursion(q):
        return float(np.max(np.abs(q - seed)))

    best = min(candidates, key=lambda q: (round(excursion(q), 12), abs(q[3]) if len(q) > 3 else 0.0))
    return best


def inverse_kinematics_psm(target: Pose, chain: KinematicChain, seed=None) -> np.ndarray:
    """Closed-form 6-DOF IK; returns joints whose FK reproduces ``target``.

    Raises Unreachable when no in-limit branch exists and AtSingularity when
    the wrist plane is undefined (tip z-axis parallel to the position ray or
    tip at the RCM point).
    """
    rot, p = _local_target(chain, target)
    sol = solve_psm_from_matrix(rot, p, chain, seed=seed)
    _verify_ik(chain, sol, target)
    return sol


def solve_psm_from_matrix(rot, p, chain: KinematicChain, seed=None) -> np.ndarray:
    """PSM IK core on a rotation matrix and position already in the RCM frame."""
    x6, z6 = rot[:, 0], rot[:, 2]
    pn = float(np.linalg.norm(p))
    if pn < _SINGULARITY_EPS:
        raise AtSingularity("tip coincides with the RCM point")
    phat = p / pn
    axis = _cross3(z6, phat)
    axis_n = float(np.linalg.norm(axis))
    if axis_n < _SINGULARITY_EPS:
        raise AtSingularity("tip z-axis parallel to the position ray; wrist plane undefined")
    axis = axis / axis_n

    seed_q5 = 0.0 if seed is None else float(seed[4])
    candidates = []
    for y4 in (axis, -axis):
        u = _cross3(z6, y4)
        w = p - chain.l3 * u
        wn = float(np.linalg.norm(w))
        if wn < 1e-7:
            # Wrist point on the RCM: insertion ~ 0 and q5 is free; keep the
            # seed's q5 (position error stays below wn).
            q5 = seed_q5
            d = math.cos(q5) * u - math.sin(q5) * z6
            s_values = [float(np.dot(w, d))]
        else:
            d = None
            s_values = [wn, -wn]
        for s in s_values:
            dd = (w / s) if d is None else d
            q3 = s + chain.l1 - chain.l2
            try:
                q1, q2 = _solve_q1_q2(dd)
            except AtSingularity:
                continue
            q5 = math.atan2(-float(np.dot(dd, z6)), float(np.dot(dd, u)))
            q6 = math.atan2(float(np.dot(x6, u)), float(np.dot(x6, y4)))
            # y4 expressed in frame 3 gives q4: [-sin q4, cos q4, 0].
            r03 = _rotation_to_frame3(q1, q2)
            v = r03.T @ y4
            q4 = math.atan2(-float(v[0]), float(v[1]))
            q = np.array([q1, q2, q3, q4, q5, q6])
            lo, hi = chain.joint_limits[:, 0], chain.joint_limits[:, 1]
            if np.any(q < lo - 1e-12) or np.any(q > hi + 1e-12):
                continue
            candidates.append(np.clip(q, lo, hi))

    return _pick_branch(candidates, seed, chain, p)


def _rotation_to_frame3(q1: float, q2: float) -> np.ndarray:
    r1 = dh_transform_rotation(math.pi / 2, q1 + math.pi / 2)
    r2 = dh_transform_rotation(-math.pi / 2, q2 - math.pi / 2)
    r3 = dh_transform_rotation(math.pi / 2, 0.0)
    return r1 @ r2 @ r3


def dh_transform_rotation(alpha: float, theta: float) -> np.ndarray:
    ca, sa = math.cos(alpha), math.sin(alpha)
    ct, st = math.cos(theta), math.sin(theta)
    return np.array([
        [ct, -st, 0.0],
        [st * ca, ct * ca, -sa],
        [st * sa, ct * sa, ca],
    ])


def _verify_ik(chain: KinematicChain, q, target: Pose, tol: float = _IK_VERIFY_TOL):
    fk = forward_kinematics(chain, q)
    perr = float(np.linalg.norm(fk.position - target.position))
    aerr = quat_angle(fk.orientation, target.orientation)
    if perr > tol or aerr > tol:
        raise Unreachable(
            f"{chain.name}: residual after solve (pos {perr:.2e} m, rot {aerr:.2e} rad); "
            "target outside the reachable set")


def inverse_kinematics_ecm(target: Pose, chain: KinematicChain, seed=None) -> np.ndarray:
    """Closed-form 4-DOF IK; orientation must lie in the roll-about-shaft set."""
    rot, p = _local_target(chain, target)
    pn = float(np.linalg.norm(p))
    if pn < _SINGULARITY_EPS:
        raise AtSingularity("camera tip coincides with the RCM point")
    candidates = []
    min_tilt = math.inf
    lo, hi = chain.joint_limits[:, 0], chain.joint_limits[:, 1]
    for s in (pn, -pn):
        d = p / s
        q3 = s + chain.l1 - chain.l2
        if not (lo[2] - 1e-12 <= q3 <= hi[2] + 1e-12):
            continue
        try:
            q1, q2 = _solve_q1_q2(d)
        except AtSingularity:
            continue
        r03 = _rotation_to_frame3(q1, q2)
        m = r03.T @ rot
        # Residual tilt between the commanded z-axis and the shaft axis: the
        # 4-DOF arm cannot realize it.
        tilt = math.acos(min(1.0, max(-1.0, float(m[2, 2]))))
        if tilt > 1e-6:
            min_tilt = min(min_tilt, tilt)
            continue
        q4 = math.atan2(float(m[1, 0]), float(m[0, 0]))
        q = np.array([q1, q2, q3, q4])
        if np.any(q < lo - 1e-12) or np.any(q > hi + 1e-12):
            continue
        candidates.append(np.clip(q, lo, hi))

    if not candidates and math.isfinite(min_tilt):
        raise Unreachable(
            f"{chain.name}: target needs {min_tilt:.4f} rad of off-shaft tilt, "
            "beyond the 4-DOF reachable set (projected error reported)")
    sol = _pick_branch(candidates, seed, chain, p)
    _verify_ik(chain, sol, target)
    return sol


# ---------------------------------------------------------------------------
# chain tables
#
# Plain-text mirror of the arm geometry, one row per joint:
#     a  alpha  d  theta
# where exactly one of d/theta contains the joint symbol qN.  Constants may
# reference pi and the link lengths l1, l2, l3.

PSM_TABLE = """\
# PSM: a  alpha  d  theta
0.0  pi/2   0.0    q1+pi/2
0.0  -pi/2  0.0    q2-pi/2
0.0  pi/2   q3-l1  0.0
0.0  0.0    l2     q4
0.0  -pi/2  0.0    q5-pi/2
l3   -pi/2  0.0    q6-pi/2
"""

ECM_TABLE = """\
# ECM: a  alpha  d  theta
0.0  pi/2   0.0    q1+pi/2
0.0  -pi/2  0.0    q2-pi/2
0.0  pi/2   q3-l1  0.0
0.0  0.0    l2     q4
"""

# The prismatic floor keeps the wrist point at or beyond the RCM pivot
# (insertion q3 - l1 + l2 >= 0); retracting behind the pivot is excluded.
PSM_JOINT_LIMITS = [
    (-math.pi / 2, math.pi / 2),
    (-math.pi / 2, math.pi / 2),
    (DEFAULT_L1 - DEFAULT_L2, 0.24),
    (-math.pi, math.pi),
    (-math.pi / 2, math.pi / 2),
    (-math.pi / 2, math.pi / 2),
]

ECM_JOINT_LIMITS = PSM_JOINT_LIMITS[:4]


def _default_limits(l1: float, l2: float, n: int) -> list[tuple[float, float]]:
    limits = [list(t) for t in PSM_JOINT_LIMITS[:n]]
    limits[2] = [l1 - l2, 0.24]
    return [tuple(t) for t in limits]

_TERM_RE = re.compile(r"^(q(?P<joint>\d+))?(?P<rest>[+-].+)?$")


class ChainTableError(ValueError):
    pass


def _eval_const(token: str, consts: dict[str, float]) -> float:
    token = token.strip()
    neg = token.startswith("-")
    if token and token[0] in "+-":
        token = token[1:]
    if token in consts:
        v = consts[token]
    elif token == "pi":
        v = math.pi
    elif token == "pi/2":
        v = math.pi / 2
    else:
        try:
            v = float(token)
        except ValueError:
            raise ChainTableError(f"unknown constant {token!r}") from None
    return -v if neg else v


def _parse_cell(cell: str, consts: dict[str, float]) -> tuple[int | None, float]:
    """Returns (joint_index or None, constant offset) for a d/theta cell."""
    m = _TERM_RE.match(cell.strip())
    if m and m.group("joint") is not None:
        offset = _eval_const(m.group("rest"), consts) if m.group("rest") else 0.0
        return int(m.group("joint")) - 1, offset
    return None, _eval_const(cell, consts)


def parse_chain_table(text: str, l1: float = DEFAULT_L1, l2: float = DEFAULT_L2,
                      l3: float = DEFAULT_L3) -> list[DHRow]:
    consts = {"l1": l1, "l2": l2, "l3": l3}
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        cells = body.split()
        if len(cells) != 4:
            raise ChainTableError(f"line {lineno}: expected 4 columns, got {len(cells)}")
        a = _eval_const(cells[0], consts)
        alpha = _eval_const(cells[1], consts)
        d_joint, d_off = _parse_cell(cells[2], consts)
        t_joint, t_off = _parse_cell(cells[3], consts)
        if (d_joint is None) == (t_joint is None):
            raise ChainTableError(
                f"line {lineno}: exactly one of d/theta must carry a joint symbol")
        if d_joint is not None:
            rows.append(DHRow(a, alpha, d_off, t_off, JointKind.PRISMATIC, d_joint))
        else:
            rows.append(DHRow(a, alpha, d_off, t_off, JointKind.REVOLUTE, t_joint))
    if not rows:
        raise ChainTableError("empty chain table")
    return rows


def psm_chain(l1: float = DEFAULT_L1, l2: float = DEFAULT_L2, l3: float = DEFAULT_L3,
              base_pose: Pose | None = None, joint_limits=None) -> KinematicChain:
    return KinematicChain(
        name="psm",
        rows=parse_chain_table(PSM_TABLE, l1, l2, l3),
        l1=l1, l2=l2, l3=l3,
        joint_limits=np.array(joint_limits if joint_limits is not None else _default_limits(l1, l2, 6)),
        base_pose=base_pose if base_pose is not None else Pose.identity(),
    )


def ecm_chain(l1: float = DEFAULT_L1, l2: float = DEFAULT_L2, l3: float = DEFAULT_L3,
              base_pose: Pose | None = None, joint_limits=None) -> KinematicChain:
    return KinematicChain(
        name="ecm",
        rows=parse_chain_table(ECM_TABLE, l1, l2, l3),
        l1=l1, l2=l2, l3=l3,
        joint_limits=np.array(joint_limits if joint_limits is not None else _default_limits(l1, l2, 4)),
        base_pose=base_pose if base_pose is not None else Pose.identity(),
    )


def chain_from_table_file(path, name: str = "custom", **kwargs) -> KinematicChain:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    rows = parse_chain_table(text, kwargs.get("l1", DEFAULT_L1),
                             kwargs.get("l2", DEFAULT_L2), kwargs.get("l3", DEFAULT_L3))
    limits = kwargs.get("joint_limits")
    if limits is None:
        limits = _default_limits(kwargs.get("l1", DEFAULT_L1), kwargs.get("l2", DEFAULT_L2), len(rows))
    return KinematicChain(
        name=name, rows=rows,
        l1=kwargs.get("l1", DEFAULT_L1), l2=kwargs.get("l2", DEFAULT_L2),
        l3=kwargs.get("l3", DEFAULT_L3),
        joint_limits=np.array(limits),
        base_pose=kwargs.get("base_pose", Pose.identity()),
        tool_offset=kwargs.get("tool_offset", Pose.identity()),
    )
