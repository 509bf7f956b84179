from .agent import (
    DDPGTrainer,
    EmptyDemoSet,
    NaNGuard,
    TrainConfig,
    TrainResult,
    actor_loss,
    bc_loss,
    bc_pretrain,
    critic_loss,
    evaluate,
    load_policy,
    make_policy_fn,
    save_policy,
)
from .nets import MLP, Adam, ShapeMismatch, soft_update
from .normalizer import Normalizer
from .replay import BufferError, ReplayBuffer

__all__ = [
    "DDPGTrainer", "EmptyDemoSet", "NaNGuard", "TrainConfig", "TrainResult",
    "actor_loss", "bc_loss", "bc_pretrain", "critic_loss", "evaluate",
    "load_policy", "make_policy_fn", "save_policy",
    "MLP", "Adam", "ShapeMismatch", "soft_update",
    "Normalizer", "BufferError", "ReplayBuffer",
]
