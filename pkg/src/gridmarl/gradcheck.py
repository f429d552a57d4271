"""Finite-difference verification of every differentiable piece.

Each check builds a small random problem, computes analytic gradients with
the package's backward passes and compares them to central differences.
Biases are jittered away from zero so no ReLU preactivation sits exactly on
its kink, where one-sided and central differences disagree.
"""

from __future__ import annotations

import numpy as np

from .agent import (AgentNet, TrainConfig, actor_critic_loss, compute_gradients,
                    episode_forward, neighbor_action_matrix)
from .env import N_ACTIONS, OBS_DIM
from .nn import Dense, GradCheckReport, LSTMCell, finite_diff_check


def _jitter(params, rng, scale=0.1):
    for k, v in params.items():
        if k.endswith("b"):
            v[:] = rng.normal(0.0, scale, v.shape)


def dense_problem(activation: str, rng):
    layer = Dense(16, 14, activation, rng)
    _jitter(layer.params(), rng)
    x = rng.normal(size=(4, 16))
    proj = rng.normal(size=(4, 14))

    def loss():
        return float(np.sum(layer.forward(x)[0] * proj))

    y, cache = layer.forward(x)
    _, grads = layer.backward(cache, proj)
    return loss, layer.params(), grads


def input_gradient_problem(rng):
    """Dense input gradient, checked by treating the input as a parameter."""
    layer = Dense(12, 4, "tanh", rng)
    x = rng.normal(size=(20, 12))
    proj = rng.normal(size=(20, 4))

    def loss():
        return float(np.sum(layer.forward(x)[0] * proj))

    _, cache = layer.forward(x)
    dx, _ = layer.backward(cache, proj)
    return loss, {"x": x}, {"x": dx}


def lstm_problem(rng, T: int = 6):
    cell = LSTMCell(5, 8, rng)
    _jitter(cell.params(), rng)
    X = rng.normal(size=(T, 5))
    proj = rng.normal(size=(T, 8))
    h0 = rng.normal(size=(1, 8)) * 0.5
    c0 = rng.normal(size=(1, 8)) * 0.5

    def loss():
        return float(np.sum(cell.forward_sequence(X, h0, c0)[0] * proj))

    _, caches = cell.forward_sequence(X, h0, c0)
    dX, grads, _, _ = cell.bptt(caches, proj)
    return loss, {**cell.params(), "X": X}, {**grads, "X": dX}


def head_problem(rng, T: int = 24):
    """Actor-critic loss with respect to logits and values (advantage held fixed)."""
    logits = rng.normal(size=(T, N_ACTIONS))
    values = rng.normal(size=T)
    actions = rng.integers(0, N_ACTIONS, T)
    targets = rng.normal(size=T)
    adv = targets - values

    def loss():
        return actor_critic_loss(logits, values, actions, targets, 0.01, 0.5, advantages=adv)[0]

    _, _, dl, dv = actor_critic_loss(logits, values, actions, targets, 0.01, 0.5)
    return loss, {"logits": logits, "values": values}, {"logits": dl, "values": dv}


def pipeline_problem(rng, config: TrainConfig | None = None, T: int = 6,
                     neighbors=((1,), (0, 2), (1,))):
    """All agents' encoders, messages, LSTM and heads on one short episode.

    With ``message_gradient="flow"`` the summed loss is an exact function of
    all parameters, so it is the composed quantity checked here.
    """
    config = config or TrainConfig(message_gradient="flow")
    neighbors = [list(nb) for nb in neighbors]
    n = len(neighbors)
    agents = [AgentNet(len(nb), rng, config.hidden, config.comm_enabled,
                       config.critic_neighbor_actions) for nb in neighbors]
    for ag in agents:
        # Larger heads than the production init so every block carries signal.
        ag.actor.W[:] = rng.normal(0.0, 0.3, ag.actor.W.shape)
        ag.critic.W[:] = rng.normal(0.0, 0.3, ag.critic.W.shape)
        _jitter(ag.params(), rng)
    obs = rng.normal(size=(n, T, OBS_DIM))
    actions = rng.integers(0, N_ACTIONS, (T, n))
    targets = rng.normal(size=(T, n))
    nbr = neighbor_action_matrix(actions, neighbors)
    base = episode_forward(agents, neighbors, obs, nbr)
    advs = [targets[:, i] - base.values[i] for i in range(n)]

    def loss():
        c = episode_forward(agents, neighbors, obs, nbr)
        return sum(actor_critic_loss(c.logits[i], c.values[i], actions[:, i], targets[:, i],
                                     config.entropy_coef, config.value_coef,
                                     advantages=advs[i])[0] for i in range(n))

    grads, _, _ = compute_gradients(agents, neighbors, obs, actions, targets, config)
    params = {f"agent{i}/{k}": v for i, ag in enumerate(agents) for k, v in ag.params().items()}
    flat = {f"agent{i}/{k}": v for i, g in enumerate(grads) for k, v in g.items()}
    return loss, params, flat


def run_suite(n_samples: int = 200, seed: int = 0, threshold: float = 1e-4):
    """Run every check; returns ``[(name, GradCheckReport)]`` including the negative control."""
    rng = np.random.default_rng(seed)
    problems = {
        "dense_relu": dense_problem("relu", rng),
        "dense_tanh": dense_problem("tanh", rng),
        "dense_linear": dense_problem("linear", rng),
        "dense_input": input_gradient_problem(rng),
        "lstm_bptt": lstm_problem(rng),
        "actor_critic_head": head_problem(rng),
        "pipeline_comm": pipeline_problem(rng),
        "pipeline_independent": pipeline_problem(
            rng, TrainConfig.ia2c(message_gradient="flow")),
    }
    out = []
    for name, (loss, params, grads) in problems.items():
        out.append((name, finite_diff_check(loss, params, grads, n_samples=n_samples, rng=rng,
                                            threshold=threshold)))
    out.append(("negative_control", negative_control(rng, n_samples, threshold)))
    return out


def negative_control(rng, n_samples: int = 200, threshold: float = 1e-4) -> GradCheckReport:
    """Check deliberately corrupted pipeline gradients; ``passed`` means the corruption was caught.

    Every gradient block is scaled by 1.001, a relative error ten times the threshold.
    """
    loss, params, grads = pipeline_problem(rng)
    bad = {k: v * 1.001 for k, v in grads.items()}
    rep = finite_diff_check(loss, params, bad, n_samples=n_samples, rng=rng, threshold=threshold)
    return GradCheckReport(rep.max_rel_error, rep.n_checked, rep.worst, threshold,
                           expect_failure=True)
