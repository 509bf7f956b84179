"""Discrete position+velocity PD joint control with motor clamping.

The error signal combines position and velocity terms,

    e = Kp*(p_target - p_current) + Kd*(v_target - v_current),

and the controller output is accumulated incrementally,

    du(t_k) = (Kp + Kd/dt)*e(t_k) - (Kp + 2Kd/dt)*e(t_{k-1}) + (Kd/dt)*e(t_{k-2}),

with u interpreted as a joint velocity command: the tracked joint moves by
u*dt per tick, subject to per-tick motor caps (the kinematic surrogate for
a maximum motor force/velocity).  Because the increment's coefficients sum
to zero, the accumulated command is a function of the two most recent
errors only and cannot wind up while the motor saturates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kinematics import JointOutOfRange


class DimensionMismatch(ValueError):
    pass


def _as_vec(x, n=None):
    v = np.atleast_1d(np.asarray(x, dtype=float))
    if n is not None and v.shape[0] == 1 and n > 1:
        v = np.full(n, float(v[0]))
    return v


@dataclass
class PDGains:
    """Per-joint gains; scalars broadcast to any arity."""

    kp: np.ndarray = 3.0
    kd: np.ndarray = 0.005
    dt: float = 0.01

    def __post_init__(self):
        self.kp = _as_vec(self.kp)
        self.kd = _as_vec(self.kd)
        if np.any(self.kp < 0) or np.any(self.kd < 0):
            raise ValueError("gains must be non-negative")
        if not self.dt > 0:
            raise ValueError("dt must be positive")


@dataclass
class MotorLimits:
    """Per-tick motion caps: a velocity bound and a raw output-delta bound."""

    max_joint_velocity: np.ndarray = 2.0
    max_step_delta: np.ndarray = 0.05

    def __post_init__(self):
        self.max_joint_velocity = _as_vec(self.max_joint_velocity)
        self.max_step_delta = _as_vec(self.max_step_delta)
        if np.any(self.max_joint_velocity <= 0) or np.any(self.max_step_delta <= 0):
            raise ValueError("motor limits must be strictly positive")


@dataclass
class ControllerState:
    """Error/output history owned by a single control loop."""

    e_prev: np.ndarray
    e_prev2: np.ndarray
    u_prev: np.ndarray
    q_prev: np.ndarray | None = None

    @staticmethod
    def zeros(n: int) -> "ControllerState":
        return ControllerState(np.zeros(n), np.zeros(n), np.zeros(n), None)


def pd_error(p_target, p_current, v_target, v_current, gains: PDGains) -> np.ndarray:
    p_target = _as_vec(p_target)
    p_current = _as_vec(p_current)
    v_target = _as_vec(v_target, p_target.shape[0])
    v_current = _as_vec(v_current, p_target.shape[0])
    if not (p_target.shape == p_current.shape == v_target.shape == v_current.shape):
        raise DimensionMismatch(
            f"shapes differ: {p_target.shape} {p_current.shape} {v_target.shape} {v_current.shape}")
    kp = _as_vec(gains.kp, p_target.shape[0])
    kd = _as_vec(gains.kd, p_target.shape[0])
    return kp * (p_target - p_current) + kd * (v_target - v_current)


def pd_increment(e_k, state: ControllerState, gains: PDGains):
    """One incremental step; returns (du, shifted state)."""
    e_k = _as_vec(e_k)
    n = e_k.shape[0]
    kp = _as_vec(gains.kp, n)
    kd_dt = _as_vec(gains.kd, n) / gains.dt
    du = (kp + kd_dt) * e_k - (kp + 2.0 * kd_dt) * state.e_prev + kd_dt * state.e_prev2
    new_state = ControllerState(e_k, state.e_prev.copy(), state.u_prev.copy(), state.q_prev)
    return du, new_state


def clamp_motor(u_desired, u_current, limits: MotorLimits, dt: float) -> np.ndarray:
    """Per-joint clamp of the commanded step to min(step cap, velocity cap * dt)."""
    u_desired = _as_vec(u_desired)
    u_current = _as_vec(u_current, u_desired.shape[0])
    cap = np.minimum(_as_vec(limits.max_step_delta, u_desired.shape[0]),
                     _as_vec(limits.max_joint_velocity, u_desired.shape[0]) * dt)
    return u_current + np.clip(u_desired - u_current, -cap, cap)


def track_to(target, current, gains: PDGains, limits: MotorLimits,
             state: ControllerState, joint_limits=None):
    """One control tick toward ``target``; returns (next joints, state).

    ``joint_limits`` (n,2), when given, is both a precondition on the inputs
    and a hard clip on the output.
    """
    target = _as_vec(target)
    current = _as_vec(current, target.shape[0])
    if target.shape != current.shape:
        raise DimensionMismatch(f"target {target.shape} vs current {current.shape}")
    if joint_limits is not None:
        jl = np.asarray(joint_limits, dtype=float)
        for name, q in (("target", target), ("current", current)):
            if np.any(q < jl[:, 0] - 1e-9) or np.any(q > jl[:, 1] + 1e-9):
                raise JointOutOfRange(f"{name} joints outside limits")

    q_prev = current if state.q_prev is None else state.q_prev
    v_current = (current - q_prev) / gains.dt
    e_k = pd_error(target, current, np.zeros_like(target), v_current, gains)
    du, state = pd_increment(e_k, state, gains)
    u = state.u_prev + du
    desired = current + u * gains.dt
    applied = clamp_motor(desired, current, limits, gains.dt)
    if joint_limits is not None:
        applied = np.clip(applied, jl[:, 0], jl[:, 1])
    # The increment's coefficients sum to zero, so accumulating the raw
    # command cannot wind up against the clamp.
    state.u_prev = u
    state.q_prev = current.copy()
    return applied, state


def settle(target, current, gains: PDGains, limits: MotorLimits,
           state: ControllerState, joint_limits=None, max_ticks: int = 1000,
           tol: float = 1e-9):
    """Run track_to ticks until the joints stop moving or reach ``target``.

    Returns (joints, state, ticks_used).  Used by the simulation world where
    one environment step lets the controller finish its transient.  The loop
    body mirrors track_to's arithmetic op for op (checked by tests) but skips
    the per-call validation and state reallocation.
    """
    target_a = _as_vec(target)
    n = target_a.shape[0]
    kp = _as_vec(gains.kp, n)
    kd = _as_vec(gains.kd, n)
    kdt = kd / gains.dt
    cap_a = np.minimum(_as_vec(limits.max_step_delta, n),
                       _as_vec(limits.max_joint_velocity, n) * gains.dt)
    # Scalar loop: six joints of plain-float IEEE arithmetic beat numpy's
    # per-op dispatch here and reproduce track_to bit for bit.
    t = target_a.tolist()
    q = _as_vec(current, n).tolist()
    kpl, kdl = kp.tolist(), kd.tolist()
    c1 = (kp + kdt).tolist()
    c2 = (kp + 2.0 * kdt).tolist()
    c3 = kdt.tolist()
    cap = cap_a.tolist()
    dt = gains.dt
    if joint_limits is None:
        jlo = jhi = None
    else:
        jl = np.asarray(joint_limits, dtype=float)
        jlo, jhi = jl[:, 0].tolist(), jl[:, 1].tolist()
    e1 = state.e_prev.tolist()
    e2 = state.e_prev2.tolist()
    u = state.u_prev.tolist()
    q_prev = list(q) if state.q_prev is None else state.q_prev.tolist()
    idx = range(n)
    ticks = 0
    for ticks in range(1, max_ticks + 1):
        step = 0.0
        err = 0.0
        for i in idx:
            qi = q[i]
            v = (qi - q_prev[i]) / dt
            e = kpl[i] * (t[i] - qi) + kdl[i] * (0.0 - v)
            ui = u[i] + (c1[i] * e - c2[i] * e1[i] + c3[i] * e2[i])
            delta = (qi + ui * dt) - qi
            ci = cap[i]
            if delta > ci:
                delta = ci
            elif delta < -ci:
                delta = -ci
            nq = qi + delta
            if jlo is not None:
                if nq < jlo[i]:
                    nq = jlo[i]
                elif nq > jhi[i]:
                    nq = jhi[i]
            e2[i] = e1[i]
            e1[i] = e
            u[i] = ui
            q_prev[i] = qi
            q[i] = nq
            d = nq - qi
            if d < 0.0:
                d = -d
            if d > step:
                step = d
            r = t[i] - nq
            if r < 0.0:
                r = -r
            if r > err:
                err = r
        if err < tol or step < tol * 1e-3:
            break
    new_state = ControllerState(np.array(e1), np.array(e2), np.array(u), np.array(q_prev))
    return np.array(q), new_state, ticks
