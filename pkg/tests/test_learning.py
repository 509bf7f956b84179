"""Learning-stack tests: gradients vs finite differences, HER relabeling,
buffers, normalization, checkpoints, and a miniature end-to-end run."""

import numpy as np
import pytest

from surgisim.demos import ScriptedPolicy, generate_demos
from surgisim.learning import (
    Adam,
    BufferError,
    DDPGTrainer,
    EmptyDemoSet,
    MLP,
    Normalizer,
    ReplayBuffer,
    ShapeMismatch,
    TrainConfig,
    actor_loss,
    bc_loss,
    bc_pretrain,
    critic_loss,
    evaluate,
    load_policy,
    make_policy_fn,
    save_policy,
    soft_update,
)
from surgisim.learning.agent import TrainResult
from surgisim.world import compute_reward, needle_pick


def numerical_grad(f, theta, eps=1e-5):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += eps
        tm[i] -= eps
        g[i] = (f(tp) - f(tm)) / (2 * eps)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / (np.abs(a) + np.abs(b) + 1e-8))


# --- MLP forward/backward ------------------------------------------------------

def test_mlp_zero_weights_output_is_bias():
    net = MLP([3, 4, 2])
    views = net.params()
    views[-1][:] = [0.5, -0.25]           # output bias
    out = net.forward(np.zeros((5, 3)))
    assert np.allclose(out, [0.5, -0.25])
    squashed = MLP([3, 2], squash=True)
    squashed.params()[-1][:] = [0.5, -0.25]
    assert np.allclose(squashed.forward(np.zeros((1, 3))), np.tanh([0.5, -0.25]))


def test_mlp_single_layer_is_affine():
    net = MLP([2, 2])
    w, b = net.params()
    w[:] = [[1.0, 2.0], [3.0, 4.0]]
    b[:] = [0.1, -0.1]
    out = net.forward(np.array([[1.0, 1.0]]))
    assert np.allclose(out, [[1 + 3 + 0.1, 2 + 4 - 0.1]])


def test_actor_output_squashed():
    rng = np.random.default_rng(5)
    net = MLP([6, 16, 16, 4], rng=rng, squash=True)
    x = rng.normal(scale=10.0, size=(64, 6))
    y = net.forward(x)
    assert np.all(y <= 1.0) and np.all(y >= -1.0)


def test_mlp_shape_mismatch():
    net = MLP([3, 2])
    with pytest.raises(ShapeMismatch):
        net.forward(np.zeros((1, 4)))


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    net = MLP([3, 8, 8, 2], rng=rng)
    x = rng.normal(size=(4, 3))
    target = rng.normal(size=(4, 2))

    def loss_of(theta):
        probe = net.copy()
        probe.theta = theta
        out = probe.forward(x)
        return float(np.mean((out - target) ** 2))

    out, cache = net.forward_cache(x)
    net.zero_grad()
    net.backward(cache, 2.0 * (out - target) / out.size)
    num = numerical_grad(loss_of, net.theta.copy())
    assert rel_err(net.grad, num) < 1e-4


def test_mlp_batch_gradient_is_sum_of_samples():
    rng = np.random.default_rng(3)
    net = MLP([3, 6, 2], rng=rng)
    x = rng.normal(size=(2, 3))
    d = rng.normal(size=(2, 2))
    net.zero_grad()
    _, cache = net.forward_cache(x)
    net.backward(cache, d)
    batch_grad = net.grad.copy()
    total = np.zeros_like(batch_grad)
    for i in range(2):
        net.zero_grad()
        _, cache = net.forward_cache(x[i:i + 1])
        net.backward(cache, d[i:i + 1])
        total += net.grad
    assert np.allclose(batch_grad, total, atol=1e-12)


def test_zero_loss_region_zero_gradient():
    rng = np.random.default_rng(4)
    net = MLP([2, 4, 1], rng=rng)
    x = rng.normal(size=(3, 2))
    out, cache = net.forward_cache(x)
    net.zero_grad()
    net.backward(cache, np.zeros_like(out))
    assert np.all(net.grad == 0)


# --- losses vs finite differences ---------------------------------------------

def _toy_batch(rng, n, obs_dim=5, goal_dim=3, act_dim=2):
    return {
        "obs_n": rng.normal(size=(n, obs_dim)),
        "next_obs_n": rng.normal(size=(n, obs_dim)),
        "goal_n": rng.normal(size=(n, goal_dim)),
        "action": rng.uniform(-1, 1, size=(n, act_dim)),
        "reward": rng.choice([-1.0, 0.0], size=n),
    }


def test_critic_loss_gamma_zero_reduces_to_reward_regression():
    rng = np.random.default_rng(21)
    critic = MLP([10, 8, 1], rng=rng)
    ta = MLP([8, 4, 2], rng=rng, squash=True)
    tc = MLP([10, 8, 1], rng=rng)
    batch = _toy_batch(rng, 6)
    s = np.concatenate([batch["obs_n"], batch["goal_n"]], axis=1)
    q = critic.forward(np.concatenate([s, batch["action"]], axis=1))
    expected = float(np.mean((q.ravel() - batch["reward"]) ** 2))
    got = critic_loss(critic, tc, ta, batch, gamma=1e-12, compute_grads=False)
    assert got == pytest.approx(expected, rel=1e-9)


def test_critic_loss_zero_when_predicting_reward():
    critic = MLP([10, 1])          # zero net: output = bias
    critic.params()[-1][:] = [-1.0]
    ta = MLP([8, 2], squash=True)
    tc = MLP([10, 1])
    rng = np.random.default_rng(2)
    batch = _toy_batch(rng, 5)
    batch["reward"] = np.full(5, -1.0)
    assert critic_loss(critic, tc, ta, batch, gamma=1e-12,
                       compute_grads=False) == pytest.approx(0.0, abs=1e-30)


def test_critic_loss_hand_computed_batch_of_two():
    rng = np.random.default_rng(7)
    critic = MLP([10, 6, 1], rng=rng)
    ta = MLP([8, 6, 2], rng=rng, squash=True)
    tc = MLP([10, 6, 1], rng=rng)
    batch = _toy_batch(rng, 2)
    gamma = 0.9
    # independent recomputation with plain numpy
    s = np.concatenate([batch["obs_n"], batch["goal_n"]], axis=1)
    sn = np.concatenate([batch["next_obs_n"], batch["goal_n"]], axis=1)
    an = ta.forward(sn)
    qn = tc.forward(np.concatenate([sn, an], axis=1)).ravel()
    tgt = np.clip(batch["reward"] + gamma * qn, -1 / (1 - gamma), 0.0)
    q = critic.forward(np.concatenate([s, batch["action"]], axis=1)).ravel()
    expected = float(np.mean((q - tgt) ** 2))
    assert critic_loss(critic, tc, ta, batch, gamma,
                       compute_grads=False) == pytest.approx(expected, rel=1e-12)


def test_critic_gradient_finite_difference():
    rng = np.random.default_rng(13)
    critic = MLP([10, 8, 8, 1], rng=rng)
    ta = MLP([8, 8, 2], rng=rng, squash=True)
    tc = MLP([10, 8, 1], rng=rng)
    batch = _toy_batch(rng, 6)

    def f(theta):
        probe = critic.copy()
        probe.theta = theta
        return critic_loss(probe, tc, ta, batch, 0.95, compute_grads=False)

    critic_loss(critic, tc, ta, batch, 0.95)
    num = numerical_grad(f, critic.theta.copy())
    assert rel_err(critic.grad, num) < 1e-4


def test_actor_loss_perfect_cloning_and_constant_q():
    rng = np.random.default_rng(31)
    actor = MLP([8, 6, 2], rng=rng, squash=True)
    critic = MLP([10, 1])               # zero weights: Q == bias == 0
    agent_batch = _toy_batch(rng, 4)
    demo_batch = _toy_batch(rng, 4)
    s_e = np.concatenate([demo_batch["obs_n"], demo_batch["goal_n"]], axis=1)
    demo_batch["action"] = actor.forward(s_e)      # BC term exactly zero
    loss = actor_loss(actor, critic, agent_batch, demo_batch, bc_weight=1.0,
                      compute_grads=False)
    assert loss == pytest.approx(0.0, abs=1e-12)
    # with constant Q the gradient flows only from the BC term
    demo_batch2 = _toy_batch(rng, 4)
    actor_loss(actor, critic, agent_batch, demo_batch2, bc_weight=1.0)
    g_full = actor.grad.copy()
    s2 = np.concatenate([demo_batch2["obs_n"], demo_batch2["goal_n"]], axis=1)
    a2, cache = actor.forward_cache(s2)
    diff = a2 - demo_batch2["action"]
    norms = np.sqrt((diff ** 2).sum(axis=1, keepdims=True))
    actor.zero_grad()
    actor.backward(cache, diff / (np.maximum(norms, 1e-12) * 4))
    assert np.allclose(g_full, actor.grad, atol=1e-12)


def test_actor_loss_hand_computed():
    rng = np.random.default_rng(37)
    actor = MLP([8, 6, 2], rng=rng, squash=True)
    critic = MLP([10, 6, 1], rng=rng)
    agent_batch = _toy_batch(rng, 3)
    demo_batch = _toy_batch(rng, 3)
    s = np.concatenate([agent_batch["obs_n"], agent_batch["goal_n"]], axis=1)
    q = critic.forward(np.concatenate([s, actor.forward(s)], axis=1))
    s_e = np.concatenate([demo_batch["obs_n"], demo_batch["goal_n"]], axis=1)
    d = actor.forward(s_e) - demo_batch["action"]
    expected = -float(np.mean(q)) + 2.5 * float(np.mean(np.linalg.norm(d, axis=1)))
    got = actor_loss(actor, critic, agent_batch, demo_batch, bc_weight=2.5,
                     compute_grads=False)
    assert got == pytest.approx(expected, rel=1e-12)


def test_actor_gradient_finite_difference():
    rng = np.random.default_rng(41)
    actor = MLP([8, 8, 8, 2], rng=rng, squash=True)
    critic = MLP([10, 8, 1], rng=rng)
    agent_batch = _toy_batch(rng, 5)
    demo_batch = _toy_batch(rng, 5)

    def f(theta):
        probe = actor.copy()
        probe.theta = theta
        return actor_loss(probe, critic, agent_batch, demo_batch, 1.0,
                          compute_grads=False)

    actor_loss(actor, critic, agent_batch, demo_batch, 1.0)
    num = numerical_grad(f, actor.theta.copy())
    assert rel_err(actor.grad, num) < 1e-4


def test_bc_gradient_finite_difference():
    rng = np.random.default_rng(43)
    actor = MLP([8, 8, 2], rng=rng, squash=True)
    batch = _toy_batch(rng, 6)

    def f(theta):
        probe = actor.copy()
        probe.theta = theta
        return bc_loss(probe, batch, compute_grads=False)

    bc_loss(actor, batch)
    num = numerical_grad(f, actor.theta.copy())
    assert rel_err(actor.grad, num) < 1e-4


# --- behavior cloning pretraining ------------------------------------------------

def _buffer_with_single_pair(rng):
    buf = ReplayBuffer(4, role="agent")
    obs = np.tile(rng.normal(size=11), (2, 1))
    ag = np.zeros((2, 3))
    g = np.tile(rng.normal(size=3), (2, 1))
    act = rng.uniform(-0.6, 0.6, size=(1, 5))
    buf.add(obs, ag, g, act)
    return buf, obs[0], g[0], act[0]


def test_bc_pretrain_overfits_single_pair():
    rng = np.random.default_rng(51)
    buf, obs, g, act = _buffer_with_single_pair(rng)
    actor = MLP([14, 32, 32, 5], rng=rng, squash=True)
    on = Normalizer(11)
    gn = Normalizer(3)

    def normalize(batch):
        batch["obs_n"] = on.normalize(batch["obs"])
        batch["goal_n"] = gn.normalize(batch["goal"])

    bc_pretrain(actor, buf, steps=600, lr=1e-3, batch_size=8,
                rng=np.random.default_rng(0), normalize=normalize)
    x = np.concatenate([on.normalize(obs), gn.normalize(g)])
    assert np.max(np.abs(actor.forward(x[None])[0] - act)) < 1e-2


def test_bc_pretrain_zero_steps_no_change():
    rng = np.random.default_rng(52)
    buf, *_ = _buffer_with_single_pair(rng)
    actor = MLP([14, 8, 5], rng=rng, squash=True)
    theta0 = actor.theta.copy()
    losses = bc_pretrain(actor, buf, steps=0, lr=1e-3, batch_size=4,
                         rng=np.random.default_rng(0), normalize=lambda b: (
                             b.update(obs_n=b["obs"], goal_n=b["goal"])))
    assert losses == []
    assert np.array_equal(actor.theta, theta0)


def test_bc_pretrain_loss_decreases_on_fixed_batch():
    rng = np.random.default_rng(53)
    buf, *_ = _buffer_with_single_pair(rng)
    actor = MLP([14, 16, 5], rng=rng, squash=True)

    def normalize(batch):
        batch["obs_n"] = batch["obs"]
        batch["goal_n"] = batch["goal"]

    losses = bc_pretrain(actor, buf, steps=200, lr=1e-4, batch_size=4,
                         rng=np.random.default_rng(1), normalize=normalize)
    assert losses[-1] < losses[0]
    # small-step trend: overwhelmingly non-increasing
    increases = sum(b > a + 1e-12 for a, b in zip(losses, losses[1:]))
    assert increases <= len(losses) // 10


def test_bc_pretrain_requires_demos():
    with pytest.raises(EmptyDemoSet):
        bc_pretrain(MLP([14, 5], squash=True), ReplayBuffer(2), 10, 1e-3, 4,
                    np.random.default_rng(0), lambda b: None)


# --- replay buffer and HER -------------------------------------------------------

def _episode(rng, T=10, switch_goal=False):
    obs = rng.normal(size=(T + 1, 11))
    ag = rng.uniform(-0.05, 0.05, size=(T + 1, 3))
    g = np.tile(rng.uniform(-0.05, 0.05, 3), (T + 1, 1))
    if switch_goal:
        g[T // 2:] = rng.uniform(-0.05, 0.05, 3)
    act = rng.uniform(-1, 1, size=(T, 5))
    obs[:, 5:8] = ag                      # keep object slots consistent
    return obs, ag, g, act


def test_her_sample_rewards_exhaustively_consistent():
    rng = np.random.default_rng(61)
    buf = ReplayBuffer(16, role="agent")
    for _ in range(8):
        buf.add(*_episode(rng, T=int(rng.integers(4, 20))))
    batch = buf.her_sample(512, future_k=4, rng=np.random.default_rng(3),
                           reward_fn=compute_reward)
    recomputed = compute_reward(batch["achieved_next"], batch["goal"])
    assert np.array_equal(recomputed, batch["reward"])
    assert np.all(np.isin(batch["reward"], (-1.0, 0.0)))


def test_her_sample_future_k_zero_never_relabels():
    rng = np.random.default_rng(62)
    buf = ReplayBuffer(4, role="agent")
    obs, ag, g, act = _episode(rng, T=12)
    buf.add(obs, ag, g, act)
    batch = buf.her_sample(256, future_k=0, rng=np.random.default_rng(5),
                           reward_fn=compute_reward)
    assert np.allclose(batch["goal"], g[0])


def test_her_relabeled_with_own_next_achieved_gives_zero_reward():
    rng = np.random.default_rng(63)
    buf = ReplayBuffer(4, role="agent")
    obs, ag, g, act = _episode(rng, T=2)
    buf.add(obs, ag, g, act)
    # T=2, t=1 forces future index = 2 = t+1: goal == own next achieved goal
    batch = buf.her_sample(256, future_k=1000, rng=np.random.default_rng(4),
                           reward_fn=compute_reward)
    t1 = np.isclose(batch["obs"], obs[1]).all(axis=1)
    relabeled = np.isclose(batch["goal"], ag[2]).all(axis=1)
    hits = t1 & relabeled
    assert hits.any()
    assert np.all(batch["reward"][hits] == 0.0)


def test_agent_buffer_evicts_oldest():
    rng = np.random.default_rng(64)
    buf = ReplayBuffer(2, role="agent")
    e1, e2, e3 = (_episode(rng, T=3) for _ in range(3))
    buf.add(*e1)
    buf.add(*e2)
    buf.add(*e3)
    assert len(buf) == 2
    assert np.array_equal(buf.episodes[0]["obs"], e3[0])  # slot 0 overwritten
    assert np.array_equal(buf.episodes[1]["obs"], e2[0])


def test_expert_buffer_immutable():
    env = needle_pick()
    demos = generate_demos(env, ScriptedPolicy(), n=3, seed=1)
    buf = ReplayBuffer.from_demos(demos)
    sig = buf.signature()
    with pytest.raises(BufferError):
        buf.add(*_episode(np.random.default_rng(0)))
    buf.her_sample(64, 4, np.random.default_rng(1), compute_reward)
    assert buf.signature() == sig


# --- normalizer / soft update / config --------------------------------------------

def test_normalizer_tracks_mean_std():
    rng = np.random.default_rng(71)
    n = Normalizer(4, eps=1e-2)
    a = rng.normal(loc=2.0, scale=3.0, size=(500, 4))
    b = rng.normal(loc=-1.0, scale=0.5, size=(300, 4))
    n.update(a)
    n.update(b)
    all_data = np.concatenate([a, b])
    assert np.allclose(n.mean, all_data.mean(axis=0))
    assert np.allclose(n.std, all_data.std(axis=0), rtol=1e-6)
    z = n.normalize(all_data)
    assert abs(float(z.mean())) < 1e-9


def test_normalizer_std_floor_and_clip():
    n = Normalizer(2, eps=0.5, clip_range=2.0)
    n.update(np.ones((100, 2)))
    assert np.all(n.std >= 0.5)
    assert np.all(n.normalize(np.array([1e9, -1e9])) == [2.0, -2.0])


def test_soft_update_exact():
    rng = np.random.default_rng(81)
    src = MLP([4, 8, 2], rng=rng)
    tgt = src.copy()
    tgt.theta = rng.normal(size=tgt.theta.size)
    old = tgt.theta.copy()
    soft_update(tgt, src, tau=0.05)
    assert np.array_equal(tgt.theta, (1 - 0.05) * old + 0.05 * src.theta)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(gamma=0.0)
    with pytest.raises(ValueError):
        TrainConfig(gamma=1.2)
    with pytest.raises(ValueError):
        TrainConfig(tau=0.0)
    TrainConfig(gamma=1.0)   # boundary allowed


# --- checkpoints -------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(91)
    actor = MLP([14, 8, 5], rng=rng, squash=True)
    critic = MLP([19, 8, 1], rng=rng)
    on = Normalizer(11)
    gn = Normalizer(3)
    on.update(rng.normal(size=(50, 11)))
    gn.update(rng.normal(size=(50, 3)))
    res = TrainResult(actor, critic, on, gn, history=[{"epoch": 1}], task="needle_pick")
    save_policy(res, tmp_path / "ckpt")
    loaded = load_policy(tmp_path / "ckpt")
    x = rng.normal(size=(7, 14))
    assert np.array_equal(loaded.actor.forward(x), actor.forward(x))
    assert np.allclose(loaded.obs_norm.mean, on.mean)
    pol = loaded.policy()
    obs = needle_pick().reset(seed=0)
    a = pol(obs)
    assert a.shape == (5,) and np.all(np.abs(a) <= 1.0)


# --- miniature end-to-end run -------------------------------------------------------

def _tiny_config():
    return TrainConfig(epochs=1, cycles_per_epoch=1, episodes_per_cycle=2,
                       updates_per_cycle=3, batch_size=16, bc_pretrain_steps=8,
                       hidden=(24, 24), eval_episodes=2, buffer_episodes=16)


def test_trainer_smoke_and_determinism():
    env = needle_pick()
    demos = generate_demos(env, ScriptedPolicy(), n=3, seed=11)
    histories = []
    for _ in range(2):
        trainer = DDPGTrainer("needle_pick", demos, _tiny_config(), seed=5)
        result = trainer.train()
        histories.append(result.history)
    assert histories[0] == histories[1]
    assert len(histories[0]) == 1
    rec = histories[0][0]
    assert set(rec) >= {"epoch", "success_rate", "mean_steps",
                        "economy_of_motion_cm", "critic_loss", "actor_loss"}
    assert np.isfinite(rec["critic_loss"]) and np.isfinite(rec["actor_loss"])


def test_evaluate_zero_policy():
    env = needle_pick()
    metrics = evaluate(lambda obs: np.zeros(5), env, n_episodes=3, seed_base=7)
    assert metrics["success_rate"] == 0.0
    assert metrics["mean_steps"] == 150.0
    assert metrics["economy_of_motion_cm"] < 0.1


def test_expert_buffer_unchanged_by_training():
    env = needle_pick()
    demos = generate_demos(env, ScriptedPolicy(), n=3, seed=13)
    trainer = DDPGTrainer("needle_pick", demos, _tiny_config(), seed=2)
    sig = trainer.expert.signature()
    trainer.train()
    assert trainer.expert.signature() == sig
