"""Command-line interface: serve, demo-gen, train, eval, replay.

A plain-text ``key=value`` config file supplies defaults; explicit flags
override it.  Exit codes: 0 success, 2 configuration/usage error, 1
runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np


class ConfigError(ValueError):
    pass


def parse_config_file(path) -> dict:
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                body = line.split("#", 1)[0].strip()
                if not body:
                    continue
                if "=" not in body:
                    raise ConfigError(f"{path}:{lineno}: expected key=value")
                key, value = body.split("=", 1)
                values[key.strip()] = value.strip()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    return values


def _coerce(value: str, to_type):
    if to_type is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected boolean, got {value!r}")
    try:
        return to_type(value)
    except ValueError:
        raise ConfigError(f"expected {to_type.__name__}, got {value!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="surgisim",
        description="Desk-scale surgical robot simulator: teleoperation, "
                    "demonstrations, and demonstration-guided RL.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--task", default=None,
                       choices=["needle_pick", "pick_and_place"])
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("serve", help="run the interactive websocket session")
    add_common(p)
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--tick-rate", type=float, default=None)
    p.add_argument("--record", default=None, help="demo file to append episodes to")
    p.add_argument("--scene", default=None, help="plain-text scene file")

    p = sub.add_parser("demo-gen", help="generate demonstration episodes")
    add_common(p)
    p.add_argument("--policy", choices=["script", "corrective"], default="script")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train DDPG+HER+BC from demonstrations")
    add_common(p)
    p.add_argument("--demos", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--log", default=None, help="training log file (default OUT/train.log)")

    p = sub.add_parser("eval", help="evaluate a trained policy")
    add_common(p)
    p.add_argument("--policy", required=True, help="checkpoint directory")
    p.add_argument("--episodes", type=int, default=100)

    p = sub.add_parser("replay", help="stream a recorded episode to the cockpit")
    add_common(p)
    p.add_argument("--demos", required=True)
    p.add_argument("--episode", type=int, default=0)
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--print", action="store_true", dest="print_states",
                   help="dump the state stream to stdout instead of serving")
    return parser


def _session_config(args, cfg: dict):
    from .session import SessionConfig
    from .teleop import TeleopConfig

    kw = {}
    kw["task"] = args.task or cfg.get("task", "needle_pick")
    kw["seed"] = args.seed if args.seed is not None else _coerce(cfg.get("seed", "0"), int)
    kw["host"] = getattr(args, "host", None) or cfg.get("host", "127.0.0.1")
    port = getattr(args, "port", None)
    kw["port"] = port if port is not None else _coerce(cfg.get("port", "8765"), int)
    tick = getattr(args, "tick_rate", None)
    kw["tick_rate"] = tick if tick is not None else _coerce(cfg.get("tick_rate", "60"), float)
    kw["record_path"] = getattr(args, "record", None) or cfg.get("record") or None
    kw["scene"] = getattr(args, "scene", None) or cfg.get("scene") or None
    if "env_step_divisor" in cfg:
        kw["env_step_divisor"] = _coerce(cfg["env_step_divisor"], int)
    teleop_kw = {}
    if "teleop.scale" in cfg:
        teleop_kw["scale"] = tuple(float(v) for v in cfg["teleop.scale"].split(","))
    if "teleop.jaw_step" in cfg:
        teleop_kw["jaw_step"] = _coerce(cfg["teleop.jaw_step"], float)
    if teleop_kw:
        kw["teleop"] = TeleopConfig(**teleop_kw)
    return SessionConfig(**kw)


_TRAIN_INT_FIELDS = {"batch_size", "epochs", "cycles_per_epoch", "episodes_per_cycle",
                     "updates_per_cycle", "future_k", "bc_pretrain_steps",
                     "buffer_episodes", "eval_episodes"}


def _train_config(args, cfg: dict):
    from .learning import TrainConfig

    kw = {}
    for f in dataclasses.fields(TrainConfig):
        key = f"train.{f.name}"
        if key in cfg:
            if f.name == "hidden":
                kw[f.name] = tuple(int(v) for v in cfg[key].split(","))
            elif f.name in _TRAIN_INT_FIELDS:
                kw[f.name] = _coerce(cfg[key], int)
            else:
                kw[f.name] = _coerce(cfg[key], float)
    if args.epochs is not None:
        kw["epochs"] = args.epochs
    return TrainConfig(**kw)


def cmd_serve(args, cfg):
    from .session import run_session
    run_session(_session_config(args, cfg))
    return 0


def cmd_demo_gen(args, cfg):
    from .demos import generate_demos, make_policy, save_demos
    from .world import make_env

    task = args.task or cfg.get("task", "needle_pick")
    seed = args.seed if args.seed is not None else _coerce(cfg.get("seed", "0"), int)
    env = make_env(task)
    policy = make_policy(args.policy, task)
    demos = generate_demos(env, policy, n=args.n, seed=seed)
    save_demos(demos, args.out)
    print(f"wrote {args.out}")
    print(demos.stats_table())
    return 0


def cmd_train(args, cfg):
    import os

    from .demos import DemoSet, load_demos
    from .learning import DDPGTrainer, save_policy

    task = args.task or cfg.get("task", "needle_pick")
    seed = args.seed if args.seed is not None else _coerce(cfg.get("seed", "0"), int)
    config = _train_config(args, cfg)
    loaded = load_demos(args.demos)
    demos = DemoSet(task=loaded.task,
                    episodes=[e for e in loaded.episodes if e.success])
    if not demos.episodes:
        raise ConfigError("demo file contains no successful episodes")
    os.makedirs(args.out, exist_ok=True)
    log_path = args.log or os.path.join(args.out, "train.log")
    trainer = DDPGTrainer(task, demos, config, seed=seed)
    with open(log_path, "w", encoding="utf-8") as log_fh:
        class _Tee:
            def write(self, text):
                log_fh.write(text)
                sys.stdout.write(text)

            def flush(self):
                log_fh.flush()
                sys.stdout.flush()

        result = trainer.train(log=_Tee())
    save_policy(result, args.out)
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_eval(args, cfg):
    from .learning import evaluate, load_policy
    from .world import make_env

    seed = args.seed if args.seed is not None else _coerce(cfg.get("seed", "0"), int)
    result = load_policy(args.policy)
    task = args.task or result.task
    metrics = evaluate(result.policy(), make_env(task), args.episodes,
                       seed_base=seed)
    print(f"{'episodes':<24}{args.episodes:>10d}")
    print(f"{'success rate':<24}{100.0 * metrics['success_rate']:>9.1f}%")
    print(f"{'steps to complete':<24}{metrics['mean_steps']:>10.1f}")
    print(f"{'economy of motion (cm)':<24}{metrics['economy_of_motion_cm']:>10.2f}")
    return 0


def cmd_replay(args, cfg):
    from .demos import load_demos
    from .session import replay_states, run_replay

    if args.print_states:
        demos = load_demos(args.demos)
        for state in replay_states(demos, args.episode):
            print(json.dumps(state))
        return 0
    run_replay(args.demos, args.episode, _session_config(args, cfg))
    return 0


COMMANDS = {
    "serve": cmd_serve,
    "demo-gen": cmd_demo_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "replay": cmd_replay,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = parse_config_file(args.config) if args.config else {}
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 0
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
