import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridmarl.agent import (ActionSmoother, AgentNet, MessageBoard, RolloutBuffer,
                            RunningMeanStd, TrainConfig, actor_critic_loss, build_targets,
                            compute_gradients, compute_returns, episode_backward,
                            episode_forward, make_optimizer, neighbor_action_matrix,
                            smooth_action, update)
from gridmarl.env import N_ACTIONS, OBS_DIM
from gridmarl.nn import log_softmax, softmax
from gridmarl.topology import hop_distances, load_spec, spatial_weights

CHAIN3 = [[1], [0, 2], [1]]


def make_agents(neighbors, seed=0, **kw):
    rng = np.random.default_rng(seed)
    agents = [AgentNet(len(nb), rng, **kw) for nb in neighbors]
    for ag in agents:
        ag.actor.W[:] = rng.normal(0, 0.3, ag.actor.W.shape)
        ag.critic.W[:] = rng.normal(0, 0.3, ag.critic.W.shape)
        for k, v in ag.params().items():
            if k.endswith(".b"):
                v[:] = rng.normal(0, 0.1, v.shape)
    return agents


def episode(n, T, seed=1):
    rng = np.random.default_rng(seed)
    return (rng.normal(size=(n, T, OBS_DIM)), rng.integers(0, N_ACTIONS, (T, n)),
            rng.normal(size=(T, n)))


# -- architecture -------------------------------------------------------------------

def test_layer_shapes():
    ag = AgentNet(2, np.random.default_rng(0))
    shapes = {k: v.shape for k, v in ag.params().items()}
    assert [shapes[f"enc{k}.W"] for k in range(1, 5)] == [(64, 1), (64, 2), (64, 2), (64, 4)]
    assert shapes["q_o.W"] == (64, 256) and shapes["q_h.W"] == (64, 128)
    assert shapes["lstm.W"] == (256, 192)
    assert shapes["actor.W"] == (N_ACTIONS, 64) and shapes["critic.W"] == (1, 64 + 20)


def test_message_shape_is_checked():
    ag = AgentNet(2, np.random.default_rng(0))
    with pytest.raises(ValueError, match="2 neighbour messages"):
        ag.encode_messages(np.zeros((1, 64)))


def test_first_step_messages_are_zero():
    board = MessageBoard(3)
    assert np.array_equal(board.read([0, 2]), np.zeros((1, 128)))


def test_comm_disabled_replaces_message_branch_with_zeros():
    ag = AgentNet(2, np.random.default_rng(0), comm_enabled=False)
    assert "q_h.W" not in ag.params()
    zh, _ = ag.encode_messages(np.random.default_rng(1).normal(size=(1, 128)))
    assert np.array_equal(zh, np.zeros((1, 64)))


def test_permuting_identical_neighbour_messages_is_invisible():
    ag = make_agents([[0, 2]])[0]
    rng = np.random.default_rng(3)
    board = MessageBoard(3)
    m = rng.normal(size=64)
    board.publish(np.stack([m, rng.normal(size=64), m]))
    obs = rng.normal(size=9)
    z = np.zeros((1, 64))
    h1, _ = ag.comm_forward(obs, z, z, board.read([0, 2]))
    h2, _ = ag.comm_forward(obs, z, z, board.read([2, 0]))
    assert np.array_equal(h1, h2)


def test_zero_actor_head_is_uniform_and_zero_critic_is_zero():
    ag = AgentNet(1, np.random.default_rng(0))
    ag.actor.W[:] = 0.0
    ag.critic.W[:] = 0.0
    h = np.random.default_rng(1).normal(size=(1, 64))
    assert np.allclose(softmax(ag.logits(h)[0]), 0.1)
    assert ag.value(h, [3])[0] == 0.0


def test_critic_input_without_neighbours_is_h():
    ag = AgentNet(0, np.random.default_rng(0))
    h = np.ones((1, 64))
    assert np.array_equal(ag.critic_input(h, np.zeros((1, 0), int)), h)


def test_neighbour_action_one_hot_blocks():
    ag = AgentNet(2, np.random.default_rng(0))
    h = np.zeros((1, 64))
    x = ag.critic_input(h, [[3, 7]])
    assert np.flatnonzero(x[0, 64:]).tolist() == [3, 17]
    y = ag.critic_input(h, [[3, 8]])
    assert np.flatnonzero(x[0] != y[0]).tolist() == [64 + 17, 64 + 18]


def test_message_causality():
    """A neighbour's step-t input cannot reach an agent's step-t hidden state."""
    agents = make_agents(CHAIN3)
    obs, acts, _ = episode(3, 5)
    nbr = neighbor_action_matrix(acts, CHAIN3)
    base = episode_forward(agents, CHAIN3, obs, nbr)
    obs2 = obs.copy()
    obs2[1, 2] += 1.0
    pert = episode_forward(agents, CHAIN3, obs2, nbr)
    assert np.array_equal(base.H[0, :3], pert.H[0, :3])
    assert not np.allclose(base.H[0, 3], pert.H[0, 3])


# -- losses and gradients -------------------------------------------------------------

def test_zero_advantage_leaves_only_entropy_gradient():
    rng = np.random.default_rng(0)
    logits, actions = rng.normal(size=(5, N_ACTIONS)), rng.integers(0, N_ACTIONS, 5)
    values = rng.normal(size=5)
    _, _, dl, _ = actor_critic_loss(logits, values, actions, values.copy(), entropy_coef=0.01)
    p = softmax(logits)
    logp = log_softmax(logits)
    ent = -(p * logp).sum(axis=1, keepdims=True)
    assert np.allclose(dl, 0.01 * p * (logp + ent), atol=1e-15)


def test_positive_advantage_raises_taken_action_probability():
    agents = make_agents([[1], [0]], comm_enabled=True)
    cfg = TrainConfig(entropy_coef=0.0, return_norm="none", reward_clip=10.0)
    obs = np.random.default_rng(0).normal(size=(2, 1, OBS_DIM))
    buf = RolloutBuffer()
    buf.add(obs[:, 0], [4, 6], [0, 0], [0, 0], [0.8, 0.8], True)
    before = episode_forward(agents, [[1], [0]], obs, neighbor_action_matrix(
        np.array([[4, 6]]), [[1], [0]]))
    p0 = [softmax(before.logits[i][0])[a] for i, a in enumerate([4, 6])]
    adv = [0.8 * 2 - before.values[i][0] for i in range(2)]  # alpha = 1: both see the sum
    assert all(a > 0 for a in adv)
    update(agents, [[1], [0]], buf, np.ones((2, 2)), cfg,
           [make_optimizer(cfg) for _ in agents])
    after = episode_forward(agents, [[1], [0]], obs, neighbor_action_matrix(
        np.array([[4, 6]]), [[1], [0]]))
    p1 = [softmax(after.logits[i][0])[a] for i, a in enumerate([4, 6])]
    assert p1[0] > p0[0] and p1[1] > p0[1]


def test_stop_mode_isolates_agents():
    agents = make_agents(CHAIN3)
    obs, acts, targets = episode(3, 6)
    cache = episode_forward(agents, CHAIN3, obs, neighbor_action_matrix(acts, CHAIN3))
    dl = [np.zeros((6, N_ACTIONS)) for _ in range(3)]
    dv = [np.zeros(6) for _ in range(3)]
    dl[1] = np.random.default_rng(0).normal(size=(6, N_ACTIONS))
    stop = episode_backward(agents, CHAIN3, cache, dl, dv, "stop")
    assert all(np.all(g == 0) for i in (0, 2) for g in stop[i].values())
    assert any(np.any(g != 0) for g in stop[1].values())
    flow = episode_backward(agents, CHAIN3, cache, dl, dv, "flow")
    assert any(np.any(g != 0) for g in flow[0].values())


def test_stop_mode_gradient_matches_finite_differences_with_frozen_messages():
    """In stop mode agent i's gradient is exact for its own loss with messages held fixed."""
    from gridmarl.nn import finite_diff_check
    agents = make_agents(CHAIN3, seed=4)
    obs, acts, targets = episode(3, 5, seed=5)
    cfg = TrainConfig(message_gradient="stop")
    nbr = neighbor_action_matrix(acts, CHAIN3)
    base = episode_forward(agents, CHAIN3, obs, nbr)
    frozen = base.H.copy()
    adv = targets[:, 1] - base.values[1]
    grads, _, _ = compute_gradients(agents, CHAIN3, obs, acts, targets, cfg)
    ag = agents[1]

    def loss():
        zo, _ = ag.encode_obs(obs[1])
        h, c = np.zeros((1, 64)), np.zeros((1, 64))
        hs = []
        for t in range(5):
            msg = np.zeros((1, 128)) if t == 0 else frozen[[0, 2], t - 1].reshape(1, -1)
            zh, _ = ag.encode_messages(msg)
            h, c, _ = ag.lstm.step(np.concatenate([zo[t:t + 1], zh], axis=1), h, c)
            hs.append(h[0])
        H = np.array(hs)
        v = ag.value(H, nbr[1])
        return actor_critic_loss(ag.logits(H), v, acts[:, 1], targets[:, 1],
                                 cfg.entropy_coef, cfg.value_coef, advantages=adv)[0]

    rep = finite_diff_check(loss, ag.params(), grads[1], n_samples=200)
    assert rep.passed, str(rep)


def test_ia2c_gradients_have_no_cross_agent_dependence():
    cfg = TrainConfig.ia2c()
    agents = make_agents(CHAIN3, comm_enabled=False, critic_neighbor_actions=False)
    obs, acts, rewards = episode(3, 8)
    w = spatial_weights(np.abs(np.subtract.outer(range(3), range(3))), alpha=cfg.alpha)
    dones = np.zeros(8, bool)
    dones[-1] = True

    def grads_for(o, a, r):
        stats = RunningMeanStd(3)
        targets = build_targets(r, dones, w, cfg, stats)
        return compute_gradients(agents, CHAIN3, o, a, targets, cfg)[0]

    base = grads_for(obs, acts, rewards)
    o2, a2, r2 = obs.copy(), acts.copy(), rewards.copy()
    o2[[0, 2]] += 0.7
    a2[:, [0, 2]] = (a2[:, [0, 2]] + 3) % N_ACTIONS
    r2[:, [0, 2]] -= 0.4
    pert = grads_for(o2, a2, r2)
    for k in base[1]:
        assert np.array_equal(base[1][k], pert[1][k]), k
    assert any(not np.array_equal(base[0][k], pert[0][k]) for k in base[0])


# -- returns ---------------------------------------------------------------------------

def brute_force_returns(r, w, gamma):
    T, N = r.shape
    out = np.zeros((T, N))
    for i in range(N):
        for t in range(T):
            total = 0.0
            for k in range(T - t):
                for j in range(N):
                    total += gamma ** k * w[i, j] * r[t + k, j]
            out[t, i] = total
    return out


def test_returns_brute_force_three_steps():
    r = np.array([[0.1, -0.2], [0.05, 0.3], [-0.4, 0.2]])
    w = np.ones((2, 2))
    assert np.allclose(compute_returns(r, w, 0.99), brute_force_returns(r, w, 0.99),
                       atol=1e-12, rtol=0)


def test_returns_zero_gamma_and_single_step():
    r = np.random.default_rng(0).normal(size=(4, 3))
    w = spatial_weights(hop_distances(load_spec("toy3")), alpha=0.5)
    assert np.allclose(compute_returns(r, w, 0.0), r @ w.T, atol=1e-15)
    assert np.allclose(compute_returns(r[:1], w, 0.99), r[:1] @ w.T, atol=1e-15)


def test_returns_need_complete_episode():
    with pytest.raises(ValueError):
        compute_returns(np.zeros((3, 2)), np.eye(2), 0.9, dones=[False, False, False])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 20), st.floats(0, 1), st.floats(0, 1),
       st.integers(0, 2 ** 31))
def test_returns_property(n, T, alpha, gamma, seed):
    rng = np.random.default_rng(seed)
    d = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    w = spatial_weights(d, alpha=alpha)
    r = rng.uniform(-1, 1, (T, n))
    assert np.allclose(compute_returns(r, w, gamma), brute_force_returns(r, w, gamma),
                       atol=1e-12, rtol=0)


# -- smoothing ---------------------------------------------------------------------------

def test_smoothing_examples():
    assert smooth_action(1.00, 1.14, 0.5, 2) == pytest.approx(1.07)
    assert smooth_action(1.00, 1.14, 0.0, 5) == 1.14
    assert smooth_action(1.00, 1.14, 1.0, 5) == 1.00
    assert smooth_action(1.00, 1.14, 0.9, 1) == 1.14


def test_smoother_window_and_endpoints():
    seq = [np.array([1.00]), np.array([1.14]), np.array([1.02]), np.array([1.10])]
    raw = ActionSmoother(1, 0.0, 2)
    assert [raw(a)[0] for a in seq] == [1.00, 1.14, 1.02, 1.10]
    hold = ActionSmoother(1, 1.0, 2)
    assert [hold(a)[0] for a in seq] == [1.00, 1.00, 1.14, 1.02]
    mid = ActionSmoother(1, 0.5, 2)
    out = [mid(a)[0] for a in seq]
    assert out[1] == pytest.approx(1.07) and out[3] == pytest.approx(1.06)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(1.0, 1.14), min_size=1, max_size=15), st.floats(0, 1),
       st.integers(1, 5))
def test_smoothing_stays_in_window_hull(actions, rho, window):
    sm = ActionSmoother(1, rho, window)
    for t, a in enumerate(actions):
        out = sm(np.array([a]))[0]
        recent = actions[max(0, t - window + 1):t + 1]
        assert min(recent) - 1e-12 <= out <= max(recent) + 1e-12


# -- rollout bookkeeping ---------------------------------------------------------------

def test_rollout_buffer_layout_and_clear():
    buf = RolloutBuffer()
    for t in range(3):
        buf.add(np.full((2, 9), t), [t, t + 1], [0, 0], [0, 0], [t, -t], t == 2)
    obs, acts, rew, dones = buf.arrays()
    assert obs.shape == (2, 3, 9) and acts.shape == (3, 2) and rew.shape == (3, 2)
    assert dones.tolist() == [False, False, True]
    buf.clear()
    assert len(buf) == 0


def test_running_stats_match_batch_statistics():
    rng = np.random.default_rng(0)
    data = rng.normal(3.0, 2.0, (300, 4))
    rs = RunningMeanStd(4)
    for chunk in np.split(data, 15):
        rs.update(chunk)
    assert np.allclose(rs.mean, data.mean(axis=0), atol=1e-12)
    assert np.allclose(rs.var, data.var(axis=0), atol=1e-10)
    back = RunningMeanStd.from_dict(rs.to_dict())
    assert np.array_equal(back.mean, rs.mean) and np.array_equal(back.count, rs.count)
    sub = rs.select([2, None])
    assert sub.mean[0] == rs.mean[2] and sub.count[1] == 0


def test_reward_clip_and_scale_in_targets():
    cfg = TrainConfig(return_norm="none", reward_scale=2.0, gamma=0.0)
    r = np.array([[-10.0, 0.5]])
    R = build_targets(r, np.array([True]), np.eye(2), cfg, None)
    assert np.array_equal(R, np.array([[-1.0, 0.25]]))


def test_td0_targets_bootstrap_from_next_value():
    cfg = TrainConfig(critic_target="td0", return_norm="none", gamma=0.5)
    r = np.array([[0.2], [0.4]])
    R = build_targets(r, np.array([False, True]), np.eye(1), cfg, None,
                      next_values=np.array([[1.0], [0.0]]))
    assert np.allclose(R, [[0.7], [0.4]])


def test_update_runs_in_every_mode():
    for mode, target in [("stop", "mc"), ("flow", "mc"), ("stop", "td0")]:
        cfg = TrainConfig(message_gradient=mode, critic_target=target)
        agents = make_agents(CHAIN3)
        obs, acts, rewards = episode(3, 4)
        buf = RolloutBuffer()
        for t in range(4):
            buf.add(obs[:, t], acts[t], np.zeros(3), np.zeros(3), rewards[t], t == 3)
        before = agents[0].actor.W.copy()
        diag = update(agents, CHAIN3, buf, np.ones((3, 3)), cfg,
                      [make_optimizer(cfg) for _ in agents], RunningMeanStd(3))
        assert np.isfinite(diag["actor_loss"]) and np.isfinite(diag["critic_loss"])
        assert not np.array_equal(before, agents[0].actor.W)


def test_config_presets_and_validation():
    assert TrainConfig.for_grid(6).alpha == 1.0 and TrainConfig.for_grid(20).rho == 0.4
    ia = TrainConfig.ia2c()
    assert (ia.alpha, ia.comm_enabled, ia.critic_neighbor_actions) == (0.0, False, False)
    d = TrainConfig()
    assert (d.gamma, d.batch_size, d.actor_lr, d.critic_lr, d.smoothing_window) == \
        (0.99, 20, 5e-4, 2.5e-4, 2)
    for bad in ({"alpha": 1.5}, {"rho": -0.1}, {"message_gradient": "both"},
                {"critic_target": "gae"}, {"smoothing_window": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
