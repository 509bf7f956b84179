"""Input-device stream to action mapping for teleoperation.

An abstract input device reports absolute samples (position, one rotation
scalar, two buttons).  Per tick the mapper emits the scaled delta against
the previous sample as a 5-component action {dx, dy, dz, d_rot, jaw}.
Button 1 drives the jaw closed while held; button 2 is the clutch: motion
components are zeroed and the reference sample keeps following the device,
so releasing the clutch never produces a position jump.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

# action vector layout
AX, AY, AZ, AROT, AJAW = range(5)


class StaleInput(ValueError):
    """Raised when a sample's timestamp regresses; the sample must be dropped."""


@dataclass(frozen=True)
class InputSample:
    position: np.ndarray          # device units
    rot: float                    # rad, yaw or pitch depending on mode
    button1: bool                 # jaw
    button2: bool                 # clutch
    timestamp: float              # ms, monotone within a session

    def __post_init__(self):
        object.__setattr__(self, "position",
                           np.asarray(self.position, dtype=float).reshape(3))


@dataclass
class TeleopConfig:
    scale: np.ndarray = (0.5, 0.5, 0.5, 0.5)   # per-axis motion scaling
    jaw_step: float = 0.1                      # rad per tick while button1 held
    rot_mode: str = "yaw"                      # yaw | pitch
    jaw_open_max: float = 0.9
    jaw_closed_min: float = -0.2

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=float).reshape(4)
        if np.any(self.scale <= 0):
            raise ValueError("scale components must be positive")
        if self.jaw_step <= 0:
            raise ValueError("jaw_step must be positive")
        if self.rot_mode not in ("yaw", "pitch"):
            raise ValueError("rot_mode must be yaw or pitch")


@dataclass
class TeleopState:
    prev: InputSample | None = None
    clutch_engaged: bool = False


def map_delta(state: TeleopState, cur: InputSample, cfg: TeleopConfig):
    """Map one sample to an action; returns (action, new state).

    The first sample only bootstraps the reference and yields zero motion.
    """
    if state.prev is not None and cur.timestamp < state.prev.timestamp:
        raise StaleInput(
            f"timestamp regressed: {cur.timestamp} < {state.prev.timestamp}")
    action = np.zeros(5)
    if state.prev is not None and not cur.button2:
        action[:3] = cfg.scale[:3] * (cur.position - state.prev.position)
        action[AROT] = cfg.scale[3] * (cur.rot - state.prev.rot)
    action[AJAW] = -cfg.jaw_step if cur.button1 else cfg.jaw_step
    return action, TeleopState(prev=cur, clutch_engaged=cur.button2)


def jaw_update(j_current: float, button1: bool, cfg: TeleopConfig) -> float:
    """Jaw angle after one tick: held closes by jaw_step, released reopens."""
    if button1:
        return max(j_current - cfg.jaw_step, cfg.jaw_closed_min)
    return min(j_current + cfg.jaw_step, cfg.jaw_open_max)


# ---------------------------------------------------------------------------
# device adapters
#
# The cockpit forwards raw UI events; these adapters turn them into the
# InputSample schema.  Pointer: drag moves x/y, wheel moves z, drag with the
# rotation modifier turns the tool; two keys map to the jaw and clutch
# buttons.  Gamepad: left stick x/y, right stick vertical for depth, right
# stick horizontal for rotation, integrated at the caller's sample rate.

POINTER_UNITS_PER_PX = 0.01
WHEEL_UNITS_PER_NOTCH = 0.002
POINTER_ROT_PER_PX = 0.01
GAMEPAD_UNITS_PER_S = 1.0
GAMEPAD_ROT_PER_S = 1.5


def sample_from_pointer(event: dict, prev: InputSample | None = None) -> InputSample:
    """Event fields: dx_px, dy_px, wheel, rot_modifier, button1, button2, t_ms."""
    t = float(event["t_ms"])
    if prev is not None and t < prev.timestamp:
        raise StaleInput(f"pointer event out of order: {t} < {prev.timestamp}")
    pos = np.zeros(3) if prev is None else prev.position.copy()
    rot = 0.0 if prev is None else prev.rot
    dx = float(event.get("dx_px", 0.0))
    dy = float(event.get("dy_px", 0.0))
    if event.get("rot_modifier"):
        rot += dx * POINTER_ROT_PER_PX
    else:
        pos[0] += dx * POINTER_UNITS_PER_PX
        pos[1] -= dy * POINTER_UNITS_PER_PX   # screen y grows downward
    pos[2] += float(event.get("wheel", 0.0)) * WHEEL_UNITS_PER_NOTCH
    return InputSample(pos, rot, bool(event.get("button1")),
                       bool(event.get("button2")), t)


def sample_from_gamepad(pad: dict, prev: InputSample | None, t_ms: float) -> InputSample:
    """Pad fields: lx, ly, rx, ry in [-1, 1]; button1, button2."""
    if prev is not None and t_ms < prev.timestamp:
        raise StaleInput(f"gamepad sample out of order: {t_ms} < {prev.timestamp}")
    dt = 0.0 if prev is None else (t_ms - prev.timestamp) / 1000.0
    pos = np.zeros(3) if prev is None else prev.position.copy()
    rot = 0.0 if prev is None else prev.rot
    pos[0] += float(pad.get("lx", 0.0)) * GAMEPAD_UNITS_PER_S * dt
    pos[1] -= float(pad.get("ly", 0.0)) * GAMEPAD_UNITS_PER_S * dt
    pos[2] -= float(pad.get("ry", 0.0)) * GAMEPAD_UNITS_PER_S * dt
    rot += float(pad.get("rx", 0.0)) * GAMEPAD_ROT_PER_S * dt
    return InputSample(pos, rot, bool(pad.get("button1")),
                       bool(pad.get("button2")), float(t_ms))
