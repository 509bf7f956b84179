"""Service shell: run configuration, simulation loop, and the websocket
protocol binding the browser cockpit to the world.

One session owns one world.  All world mutation happens on the simulation
loop; network handlers only enqueue validated messages.  Input samples use
a latest-wins slot (deltas are recomputed against the previous consumed
sample, so dropped intermediates cannot corrupt the commanded motion).

The loop runs at ``tick_rate`` (default 60 Hz).  The world advances one
action step every ``env_step_divisor`` ticks so a 150-step episode lasts
long enough for a human to complete, and state broadcasts are decimated to
roughly 30 Hz.
"""

from __future__ import annotations

import asyncio
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .demos import DemoSet, Episode, load_demos, save_demos
from .teleop import InputSample, TeleopConfig, TeleopState, map_delta
from .world import make_env

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1


class SessionError(Exception):
    pass


class BindError(SessionError):
    pass


class ClientProtocolError(SessionError):
    def __init__(self, code, msg):
        super().__init__(msg)
        self.code = code


class UnknownEpisode(SessionError):
    pass


@dataclass
class SessionConfig:
    task: str = "needle_pick"
    seed: int = 0
    host: str = "127.0.0.1"
    port: int = 8765
    tick_rate: float = 60.0
    broadcast_rate: float = 30.0
    env_step_divisor: int = 4
    record_path: str | None = None
    scene: str | None = None
    auto_reset: bool = True
    teleop: TeleopConfig = field(default_factory=TeleopConfig)

    def __post_init__(self):
        if not (10.0 <= self.tick_rate <= 240.0):
            raise ValueError(f"tick rate must be in [10, 240], got {self.tick_rate}")
        if not (0 < int(self.port) < 65536) and self.port != 0:
            raise ValueError(f"invalid port {self.port}")
        if self.env_step_divisor < 1:
            raise ValueError("env_step_divisor must be >= 1")


def encode(msg: dict) -> str:
    return json.dumps(msg)


def decode(text) -> dict:
    try:
        msg = json.loads(text)
    except (json.JSONDecodeError, TypeError) as exc:
        raise ClientProtocolError("BAD_MESSAGE", f"not valid JSON: {exc}") from None
    if not isinstance(msg, dict) or "type" not in msg:
        raise ClientProtocolError("BAD_MESSAGE", "message must be an object with a type")
    return msg


def _sample_from_wire(payload) -> InputSample:
    try:
        return InputSample(
            position=np.array([float(v) for v in payload["position"]]),
            rot=float(payload.get("rot", 0.0)),
            button1=bool(payload.get("button1", False)),
            button2=bool(payload.get("button2", False)),
            timestamp=float(payload["timestamp"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ClientProtocolError("BAD_INPUT", f"malformed input sample: {exc}") from None


class Session:
    """Tickable session core; transport-agnostic and lockstep-testable."""

    def __init__(self, config: SessionConfig):
        self.config = config
        self.env = make_env(config.task, seed=config.seed, scene=config.scene)
        self.teleop_state = TeleopState()
        self.rng = np.random.default_rng(config.seed)
        self.tick_count = 0
        self.recording = False
        self._record_armed = False
        self.demos = DemoSet(task=config.task)
        self._capture = None
        self.last_reward = -1.0
        self.last_success = False
        self.reset()

    # -- episode control ----------------------------------------------------

    def reset(self, seed=None):
        if seed is None:
            seed = int(self.rng.integers(0, 2**31 - 1))
        self.episode_seed = int(seed)
        obs = self.env.reset(seed=self.episode_seed)
        self.teleop_state = TeleopState()
        self.last_reward = -1.0
        self.last_success = False
        if self.recording or self._record_armed:
            self.recording = True
            self._record_armed = False
            self._capture = {
                "obs": [obs.vector.copy()],
                "ag": [obs.achieved_goal.copy()],
                "dg": [obs.desired_goal.copy()],
                "actions": [],
                "rewards": [],
            }
        else:
            self._capture = None
        return obs

    def set_recording(self, on: bool):
        if on and not self.recording:
            if self.env.step_count == 0 and not self.env.done:
                self.recording = True
                self._capture = {
                    "obs": [self.env.observation().vector.copy()],
                    "ag": [self.env.observation().achieved_goal.copy()],
                    "dg": [self.env.observation().desired_goal.copy()],
                    "actions": [],
                    "rewards": [],
                }
            else:
                # mid-episode: capture starts at the next reset
                self._record_armed = True
        elif not on:
            self.recording = False
            self._record_armed = False
            self._capture = None

    def submit_sample(self, sample: InputSample):
        """Latest-wins input slot consumed by the next environment step."""
        self._pending_sample = sample

    _pending_sample: InputSample | None = None

    def env_step(self):
        """Consume the latest input and advance the world one action step."""
        if self.env.done:
            if self.config.auto_reset:
                self.flush_episode()
                self.reset()
            return None
        sample = self._pending_sample
        if sample is None:
            action = np.zeros(5)
            action[4] = self.config.teleop.jaw_step  # released button: reopen
        else:
            try:
                action, self.teleop_state = map_delta(self.teleop_state, sample,
                                                      self.config.teleop)
            except Exception as exc:
                log.debug("dropped stale sample: %s", exc)
                return None
            self._pending_sample = None
        obs, reward, done, info = self.env.step(action)
        self.last_reward = float(reward)
        self.last_success = bool(info["is_success"])
        if self.recording and self._capture is not None:
            self._capture["obs"].append(obs.vector.copy())
            self._capture["ag"].append(obs.achieved_goal.copy())
            self._capture["dg"].append(obs.desired_goal.copy())
            self._capture["actions"].append(np.asarray(action, dtype=float))
            self._capture["rewards"].append(float(reward))
        if done:
            self.flush_episode()
        return obs

    def flush_episode(self):
        """Append a completed recorded episode and rewrite the demo file."""
        cap = self._capture
        if cap is None or not cap["actions"] or not self.env.done:
            return
        ep = Episode(
            episode_id=len(self.demos.episodes),
            task=self.config.task,
            seed=self.episode_seed,
            observations=np.asarray(cap["obs"]),
            achieved_goals=np.asarray(cap["ag"]),
            desired_goals=np.asarray(cap["dg"]),
            actions=np.asarray(cap["actions"]),
            rewards=np.asarray(cap["rewards"]),
            success=self.last_success,
            path_length=float(self.env.path_length),
        )
        self.demos.episodes.append(ep)
        self._capture = None
        if self.config.record_path:
            save_demos(self.demos, self.config.record_path)

    def tick(self):
        """One loop tick; returns a state message when the world stepped."""
        self.tick_count += 1
        if self.tick_count % self.config.env_step_divisor == 0:
            self.env_step()
            return self.state_message()
        return None

    # -- protocol ------------------------------------------------------------

    def scene_message(self) -> dict:
        def shape_dict(shape):
            d = {"kind": shape.kind, "size": list(shape.size)}
            if shape.parts:
                d["parts"] = [
                    {"position": p.position.tolist(),
                     "orientation": p.orientation.tolist(),
                     "shape": shape_dict(s)} for p, s in shape.parts]
            return d

        env = self.env
        return {
            "type": "scene",
            "protocol_version": PROTOCOL_VERSION,
            "task": env.task,
            "tick_rate": self.config.tick_rate,
            "workspace": {"lo": env.workspace_lo.tolist(),
                          "hi": env.workspace_hi.tolist()},
            "rcm": env.arm.chain.base_pose.position.tolist(),
            "tolerance": env.tolerance,
            "horizon": env.horizon,
            "bodies": [
                {"id": b.id, "color": b.color, "graspable": b.graspable,
                 "shape": shape_dict(b.shape)}
                for b in env.bodies.values()],
        }

    def state_message(self) -> dict:
        env = self.env
        tip = env.arm.tip_pose()
        rot, _ = env.arm.tip()
        return {
            "type": "state",
            "tick": self.tick_count,
            "step_count": env.step_count,
            "jaw": env.arm.jaw,
            "reward": self.last_reward,
            "is_success": self.last_success,
            "episode_done": env.done,
            "recording": self.recording,
            "goal": env.active_goal().tolist(),
            "eef": {"position": tip.position.tolist(),
                    "orientation": tip.orientation.tolist(),
                    "yaw": env.arm.yaw_of(rot)},
            "bodies": [
                {"id": b.id, "position": b.pose.position.tolist(),
                 "orientation": b.pose.orientation.tolist()}
                for b in env.bodies.values()],
        }

    def handle_message(self, msg: dict) -> list[dict]:
        """Apply one control message; returns replies (state changes happen
        on the next tick)."""
        kind = msg.get("type")
        if kind == "input":
            self.submit_sample(_sample_from_wire(msg.get("sample", {})))
            return []
        if kind == "reset":
            seed = msg.get("seed")
            self.flush_episode()
            self.reset(seed=None if seed is None else int(seed))
            return [{"type": "ack", "what": "reset"},
                    self.scene_message(), self.state_message()]
        if kind == "record":
            self.set_recording(bool(msg.get("on")))
            return [{"type": "ack", "what": "record", "on": self.recording,
                     "armed": self._record_armed}]
        if kind == "hello":
            if msg.get("protocol_version") != PROTOCOL_VERSION:
                raise ClientProtocolError(
                    "VERSION",
                    f"server speaks protocol {PROTOCOL_VERSION}, "
                    f"client sent {msg.get('protocol_version')!r}")
            return [{"type": "ack", "what": "hello"},
                    self.scene_message(), self.state_message()]
        raise ClientProtocolError("BAD_MESSAGE", f"unknown message type {kind!r}")


# ---------------------------------------------------------------------------
# replay


def replay_states(demos: DemoSet, episode_id: int):
    """Yield state messages reconstructing a stored episode for inspection."""
    matches = [e for e in demos.episodes if e.episode_id == episode_id]
    if not matches:
        raise UnknownEpisode(f"episode {episode_id} not in file")
    ep = matches[0]
    for t in range(ep.observations.shape[0]):
        vec = ep.observations[t]
        done = t == ep.observations.shape[0] - 1
        yield {
            "type": "state",
            "tick": t,
            "step_count": t,
            "jaw": float(vec[4]),
            "reward": float(ep.rewards[t - 1]) if t > 0 else -1.0,
            "is_success": bool(ep.success and done),
            "episode_done": done,
            "recording": False,
            "replay": {"episode_id": ep.episode_id, "task": ep.task,
                       "seed": ep.seed},
            "goal": ep.desired_goals[t].tolist(),
            "eef": {"position": vec[:3].tolist(),
                    "orientation": [1.0, 0.0, 0.0, 0.0],
                    "yaw": float(vec[3])},
            "bodies": [{"id": "object", "position": vec[5:8].tolist(),
                        "orientation": [1.0, 0.0, 0.0, 0.0]}],
        }


# ---------------------------------------------------------------------------
# websocket service


async def _client_handler(ws, session: Session, subscribers: set, control_queue):
    queue = asyncio.Queue(maxsize=4)
    greeted = False
    try:
        raw = await ws.recv()
        msg = decode(raw)
        if msg.get("type") != "hello":
            raise ClientProtocolError("HELLO_FIRST", "first message must be hello")
        replies = session.handle_message(msg)   # validates protocol_version
        for r in replies:
            await ws.send(encode(r))
        greeted = True
        subscribers.add(queue)

        async def pump_outgoing():
            while True:
                item = await queue.get()
                await ws.send(item)

        pump = asyncio.create_task(pump_outgoing())
        try:
            async for raw in ws:
                try:
                    msg = decode(raw)
                    if msg.get("type") == "input":
                        # fast path: latest-wins, no queueing
                        session.submit_sample(_sample_from_wire(msg.get("sample", {})))
                    else:
                        await control_queue.put((msg, queue))
                except ClientProtocolError as exc:
                    await ws.send(encode({"type": "error", "code": exc.code,
                                          "msg": str(exc)}))
        finally:
            pump.cancel()
    except ClientProtocolError as exc:
        try:
            await ws.send(encode({"type": "error", "code": exc.code, "msg": str(exc)}))
            await ws.close()
        except Exception:
            pass
    except Exception:
        pass
    finally:
        if greeted:
            subscribers.discard(queue)


async def serve_async(config: SessionConfig, ready_event=None, stop_event=None):
    try:
        import websockets
    except ImportError as exc:
        raise SessionError("the websockets package is required to serve") from exc

    if config.port == 0:
        raise BindError("refusing to bind port 0; configure an explicit port")
    session = Session(config)
    subscribers: set[asyncio.Queue] = set()
    control_queue: asyncio.Queue = asyncio.Queue()

    async def handler(ws):
        await _client_handler(ws, session, subscribers, control_queue)

    try:
        server = await websockets.serve(handler, config.host, config.port)
    except OSError as exc:
        raise BindError(f"cannot bind {config.host}:{config.port}: {exc}") from exc

    tick_period = 1.0 / config.tick_rate
    decimate = max(1, int(round(config.tick_rate / config.broadcast_rate)))
    log.info("session serving ws://%s:%d/session (task=%s)",
             config.host, config.port, config.task)
    if ready_event is not None:
        ready_event.set()

    async def sim_loop():
        loop = asyncio.get_running_loop()
        next_tick = loop.time()
        while True:
            while not control_queue.empty():
                msg, reply_queue = control_queue.get_nowait()
                try:
                    for r in session.handle_message(msg):
                        _offer(reply_queue, encode(r))
                except ClientProtocolError as exc:
                    _offer(reply_queue, encode({"type": "error", "code": exc.code,
                                                "msg": str(exc)}))
            session.tick()
            if session.tick_count % decimate == 0:
                payload = encode(session.state_message())
                for q in list(subscribers):
                    _offer(q, payload)
            next_tick += tick_period
            delay = next_tick - loop.time()
            if delay > 0:
                await asyncio.sleep(delay)
            else:
                next_tick = loop.time()
                await asyncio.sleep(0)

    sim = asyncio.create_task(sim_loop())
    try:
        if stop_event is None:
            await asyncio.Future()
        else:
            await stop_event.wait()
    finally:
        sim.cancel()
        server.close()
        await server.wait_closed()
        session.flush_episode()
        if config.record_path and session.demos.episodes:
            save_demos(session.demos, config.record_path)


def _offer(queue: asyncio.Queue, item):
    """Non-blocking enqueue; drop the oldest when the subscriber lags."""
    try:
        queue.put_nowait(item)
    except asyncio.QueueFull:
        try:
            queue.get_nowait()
        except asyncio.QueueEmpty:
            pass
        try:
            queue.put_nowait(item)
        except asyncio.QueueFull:
            pass


def run_session(config: SessionConfig):
    asyncio.run(serve_async(config))


async def replay_serve_async(demos: DemoSet, episode_id: int, config: SessionConfig,
                             ready_event=None, stop_event=None):
    """Stream one stored episode to connected cockpits, looping forever."""
    try:
        import websockets
    except ImportError as exc:
        raise SessionError("the websockets package is required to serve") from exc
    states = [encode(s) for s in replay_states(demos, episode_id)]
    if config.port == 0:
        raise BindError("refusing to bind port 0; configure an explicit port")

    async def handler(ws):
        try:
            msg = decode(await ws.recv())
            if msg.get("type") != "hello" or msg.get("protocol_version") != PROTOCOL_VERSION:
                await ws.send(encode({"type": "error", "code": "VERSION",
                                      "msg": "bad hello"}))
                return
            await ws.send(encode({"type": "ack", "what": "hello"}))
            period = config.env_step_divisor / config.tick_rate
            for s in states:
                await ws.send(s)
                await asyncio.sleep(period)
        except Exception:
            pass

    try:
        server = await websockets.serve(handler, config.host, config.port)
    except OSError as exc:
        raise BindError(f"cannot bind {config.host}:{config.port}: {exc}") from exc
    if ready_event is not None:
        ready_event.set()
    try:
        if stop_event is None:
            await asyncio.Future()
        else:
            await stop_event.wait()
    finally:
        server.close()
        await server.wait_closed()


def run_replay(demo_path, episode_id: int, config: SessionConfig):
    demos = load_demos(demo_path)
    asyncio.run(replay_serve_async(demos, episode_id, config))
