"""Per-agent actor-critic networks with learned neighbour communication.

Each agent encodes its four observation groups separately, extracts the
encoded observation and the concatenated neighbour messages (previous-step
hidden states), concatenates the two and feeds them through an LSTM. The
hidden state drives a softmax actor and a critic that also sees the
neighbours' sampled actions (one-hot).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .env import N_ACTIONS, OBS_DIM, OBS_GROUPS
from .nn import Adam, Dense, LSTMCell, OptimizerState, clip_and_update, log_softmax

HIDDEN = 64
MESSAGE_GRADIENT_MODES = ("stop", "flow")
CRITIC_TARGETS = ("mc", "td0")


@dataclass
class TrainConfig:
    alpha: float = 1.0
    distance_threshold: int | None = None
    rho: float = 0.5
    gamma: float = 0.99
    smoothing_window: int = 2
    actor_lr: float = 5e-4
    critic_lr: float = 2.5e-4
    batch_size: int = 20
    episodes: int = 10000
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    comm_enabled: bool = True
    message_gradient: str = "stop"
    critic_neighbor_actions: bool = True
    critic_target: str = "mc"
    reward_clip: float = 1.0
    reward_scale: float = 1.0
    return_norm: str = "running"
    clip_norm: float = 40.0
    hidden: int = HIDDEN

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if self.smoothing_window < 1:
            raise ValueError("smoothing_window must be >= 1")
        if self.message_gradient not in MESSAGE_GRADIENT_MODES:
            raise ValueError(f"message_gradient must be one of {MESSAGE_GRADIENT_MODES}")
        if self.critic_target not in CRITIC_TARGETS:
            raise ValueError(f"critic_target must be one of {CRITIC_TARGETS}")
        if self.return_norm not in ("running", "none"):
            raise ValueError("return_norm must be 'running' or 'none'")

    @classmethod
    def for_grid(cls, n_dg: int, **overrides) -> "TrainConfig":
        """Defaults tuned per grid size: (alpha, rho) = (1.0, 0.5) small, (0.7, 0.4) large."""
        base = {"alpha": 1.0, "rho": 0.5} if n_dg <= 10 else {"alpha": 0.7, "rho": 0.4}
        base.update(overrides)
        return cls(**base)

    @classmethod
    def ia2c(cls, **overrides) -> "TrainConfig":
        """Independent recurrent A2C: no messages, local reward, local critic."""
        base = {"alpha": 0.0, "comm_enabled": False, "critic_neighbor_actions": False}
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        return asdict(self)


class AgentNet:
    """Parameter bundle and forward/backward pieces for one DG agent."""

    def __init__(self, n_neighbors: int, rng: np.random.Generator | None = None,
                 hidden: int = HIDDEN, comm_enabled: bool = True,
                 critic_neighbor_actions: bool = True):
        self.n_neighbors = n_neighbors
        self.hidden = hidden
        self.comm_enabled = comm_enabled
        self.critic_neighbor_actions = critic_neighbor_actions
        H = hidden
        self.encoders = [Dense(len(g), H, "relu", rng) for g in OBS_GROUPS]
        self.q_o = Dense(len(OBS_GROUPS) * H, H, "relu", rng)
        self.q_h = Dense(H * n_neighbors, H, "relu", rng) if self.uses_messages else None
        self.lstm = LSTMCell(2 * H, H, rng)
        self.actor = Dense(H, N_ACTIONS, "linear", rng, scale=0.01)
        self.critic = Dense(H + self.critic_action_width, 1, "linear", rng, scale=0.01)

    @property
    def uses_messages(self) -> bool:
        return self.comm_enabled and self.n_neighbors > 0

    @property
    def critic_action_width(self) -> int:
        return N_ACTIONS * self.n_neighbors if self.critic_neighbor_actions else 0

    def layers(self) -> dict:
        out = {f"enc{k + 1}": enc for k, enc in enumerate(self.encoders)}
        out["q_o"] = self.q_o
        if self.q_h is not None:
            out["q_h"] = self.q_h
        out["lstm"] = self.lstm
        out["actor"] = self.actor
        out["critic"] = self.critic
        return out

    def params(self) -> dict[str, np.ndarray]:
        """Flat view ``{"layer.W": array}``; arrays are shared, not copied."""
        return {f"{name}.{k}": v for name, layer in self.layers().items()
                for k, v in layer.params().items()}

    def n_params(self) -> int:
        return sum(p.size for p in self.params().values())

    # -- forward pieces -----------------------------------------------------

    def encode_obs(self, obs):
        """Encoded observation ``q_o(cat(e1(g1), .., e4(g4)))`` for rows of ``obs``."""
        obs = np.atleast_2d(np.asarray(obs, float))
        outs, caches = [], []
        for enc, g in zip(self.encoders, OBS_GROUPS):
            y, c = enc.forward(obs[:, list(g)])
            outs.append(y)
            caches.append(c)
        zo, co = self.q_o.forward(np.concatenate(outs, axis=1))
        return zo, (caches, co)

    def encode_messages(self, msgs):
        msgs = np.atleast_2d(np.asarray(msgs, float))
        if not self.uses_messages:
            return np.zeros((msgs.shape[0], self.hidden)), None
        if msgs.shape[1] != self.hidden * self.n_neighbors:
            raise ValueError(f"expected {self.n_neighbors} neighbour messages of size "
                             f"{self.hidden}, got a vector of length {msgs.shape[1]}")
        return self.q_h.forward(msgs)

    def comm_forward(self, obs, h_prev, c_prev, msgs):
        """One communication/recurrence step; returns ``(h, c)`` of shape ``(1, H)``."""
        zo, _ = self.encode_obs(obs)
        zh, _ = self.encode_messages(msgs)
        h, c, _ = self.lstm.step(np.concatenate([zo, zh], axis=1), h_prev, c_prev)
        return h, c

    def logits(self, h):
        return self.actor.forward(h)[0]

    def critic_input(self, h, neighbor_actions):
        h = np.atleast_2d(h)
        if not self.critic_neighbor_actions or self.n_neighbors == 0:
            return h
        acts = np.atleast_2d(np.asarray(neighbor_actions, int))
        if acts.shape[1] != self.n_neighbors:
            raise ValueError(f"expected {self.n_neighbors} neighbour actions, got {acts.shape[1]}")
        onehot = np.zeros((acts.shape[0], self.critic_action_width))
        rows = np.arange(acts.shape[0])[:, None]
        onehot[rows, np.arange(self.n_neighbors) * N_ACTIONS + acts] = 1.0
        return np.concatenate([h, onehot], axis=1)

    def value(self, h, neighbor_actions):
        return self.critic.forward(self.critic_input(h, neighbor_actions))[0][:, 0]


def messages_for(h_prev: np.ndarray, neighbors: list[int]) -> np.ndarray:
    """Concatenate the neighbours' previous hidden states in fixed index order."""
    if not neighbors:
        return np.zeros((1, 0))
    return h_prev[neighbors].reshape(1, -1)


class MessageBoard:
    """Previous-step hidden states of all agents, read before any is overwritten.

    ``read`` serves messages from step ``t - 1``; ``publish`` installs the
    step-``t`` states once every agent has read (two-phase step).
    """

    def __init__(self, n_agents: int, hidden: int = HIDDEN):
        self.h = np.zeros((n_agents, hidden))

    def read(self, neighbors: list[int]) -> np.ndarray:
        return messages_for(self.h, neighbors)

    def publish(self, h_new: np.ndarray) -> None:
        if h_new.shape != self.h.shape:
            raise ValueError(f"expected hidden states of shape {self.h.shape}")
        self.h = np.array(h_new, dtype=float)


# -- episode-level forward / backward across all agents ------------------------

@dataclass
class EpisodeCache:
    H: list
    logits: list
    values: list
    enc_caches: list
    msg_caches: list
    lstm_caches: list
    actor_caches: list
    critic_caches: list


def episode_forward(agents: list[AgentNet], neighbors: list[list[int]], obs, nbr_actions):
    """Recompute all agents' outputs over one episode.

    ``obs`` has shape ``(N, T, 9)`` (already standardised); ``nbr_actions[i]`` is
    ``(T, |N_i|)``. Messages at step ``t`` are the neighbours' hidden states
    at ``t - 1`` from this same pass (zeros at ``t = 0``).
    """
    N = len(agents)
    T = obs.shape[1]
    Hd = agents[0].hidden
    enc = [agents[i].encode_obs(obs[i]) for i in range(N)]
    H = np.zeros((N, T, Hd))
    h = np.zeros((N, Hd))
    c = np.zeros((N, Hd))
    msg_caches = [[None] * T for _ in range(N)]
    lstm_caches = [[None] * T for _ in range(N)]
    for t in range(T):
        h_prev = h.copy()
        c_prev = c.copy()
        for i, ag in enumerate(agents):
            zh, mc = ag.encode_messages(messages_for(h_prev, neighbors[i]))
            x = np.concatenate([enc[i][0][t:t + 1], zh], axis=1)
            hi, ci, lc = ag.lstm.step(x, h_prev[i:i + 1], c_prev[i:i + 1])
            h[i], c[i] = hi[0], ci[0]
            msg_caches[i][t] = mc
            lstm_caches[i][t] = lc
        H[:, t] = h
    logits, actor_caches, values, critic_caches = [], [], [], []
    for i, ag in enumerate(agents):
        lg, ac = ag.actor.forward(H[i])
        v, cc = ag.critic.forward(ag.critic_input(H[i], nbr_actions[i]))
        logits.append(lg)
        actor_caches.append(ac)
        values.append(v[:, 0])
        critic_caches.append(cc)
    return EpisodeCache(H, logits, values, [e[1] for e in enc], msg_caches, lstm_caches,
                        actor_caches, critic_caches)


def episode_backward(agents: list[AgentNet], neighbors: list[list[int]], cache: EpisodeCache,
                     dlogits: list, dvalues: list, message_gradient: str = "stop"):
    """Gradients of a loss with the given output gradients, one dict per agent.

    With ``message_gradient="stop"`` received messages are treated as constants,
    so each agent's gradient involves only its own parameters. With ``"flow"``
    the gradient also passes through the messages into the senders' networks.
    """
    N = len(agents)
    T = cache.H.shape[1]
    Hd = agents[0].hidden
    grads = [{k: np.zeros_like(v) for k, v in ag.params().items()} for ag in agents]
    dH = np.zeros((N, T, Hd))
    for i, ag in enumerate(agents):
        dxa, ga = ag.actor.backward(cache.actor_caches[i], dlogits[i])
        dH[i] += dxa
        dxc, gc = ag.critic.backward(cache.critic_caches[i], np.asarray(dvalues[i])[:, None])
        dH[i] += dxc[:, :Hd]
        for k in ("W", "b"):
            grads[i][f"actor.{k}"] += ga[k]
            grads[i][f"critic.{k}"] += gc[k]

    dh_next = np.zeros((N, Hd))   # into h_t from step t+1 (own recurrence + messages)
    dc_next = np.zeros((N, Hd))
    dzo = np.zeros((N, T, Hd))
    lstm_g = [{"W": grads[i]["lstm.W"], "b": grads[i]["lstm.b"]} for i in range(N)]
    for t in reversed(range(T)):
        dh_prev = np.zeros((N, Hd))
        dc_prev = np.zeros((N, Hd))
        for i, ag in enumerate(agents):
            dh = dH[i, t:t + 1] + dh_next[i:i + 1]
            dx, dhp, dcp = ag.lstm.step_backward(cache.lstm_caches[i][t], dh,
                                                 dc_next[i:i + 1], lstm_g[i])
            dh_prev[i] += dhp[0]
            dc_prev[i] = dcp[0]
            dzo[i, t] = dx[0, :Hd]
            if ag.uses_messages:
                dmsg, gq = ag.q_h.backward(cache.msg_caches[i][t], dx[:, Hd:])
                grads[i]["q_h.W"] += gq["W"]
                grads[i]["q_h.b"] += gq["b"]
                if message_gradient == "flow" and t > 0:
                    for k, j in enumerate(neighbors[i]):
                        dh_prev[j] += dmsg[0, k * Hd:(k + 1) * Hd]
        dh_next, dc_next = dh_prev, dc_prev

    for i, ag in enumerate(agents):
        enc_caches, qo_cache = cache.enc_caches[i]
        dcat, gq = ag.q_o.backward(qo_cache, dzo[i])
        grads[i]["q_o.W"] += gq["W"]
        grads[i]["q_o.b"] += gq["b"]
        for k, enc in enumerate(ag.encoders):
            _, ge = enc.backward(enc_caches[k], dcat[:, k * Hd:(k + 1) * Hd])
            grads[i][f"enc{k + 1}.W"] += ge["W"]
            grads[i][f"enc{k + 1}.b"] += ge["b"]
    return grads


# -- losses ----------------------------------------------------------------------

def actor_critic_loss(logits, values, actions, targets, entropy_coef=0.01, value_coef=0.5,
                      advantages=None):
    """Loss and output gradients for one agent over one episode.

    actor: ``-sum_t log pi(a_t) A_t - entropy_coef * sum_t H(pi_t)`` with the
    advantage held constant; critic: ``value_coef * sum_t (target_t - V_t)^2``.
    Returns ``(total, parts, dlogits, dvalues)``.
    """
    logits = np.asarray(logits, float)
    values = np.asarray(values, float)
    actions = np.asarray(actions, int)
    targets = np.asarray(targets, float)
    T = len(actions)
    logp = log_softmax(logits)
    p = np.exp(logp)
    if advantages is None:
        advantages = targets - values
    adv = np.asarray(advantages, float)
    taken = logp[np.arange(T), actions]
    entropy = -(p * logp).sum(axis=1)
    policy_loss = -float(np.sum(taken * adv))
    entropy_loss = -entropy_coef * float(entropy.sum())
    value_loss = value_coef * float(np.sum((targets - values) ** 2))

    onehot = np.zeros_like(p)
    onehot[np.arange(T), actions] = 1.0
    dlogits = -adv[:, None] * (onehot - p)
    dlogits += entropy_coef * p * (logp + entropy[:, None])
    dvalues = -2.0 * value_coef * (targets - values)
    parts = {"policy": policy_loss, "entropy": entropy_loss, "value": value_loss,
             "mean_entropy": float(entropy.mean())}
    return policy_loss + entropy_loss + value_loss, parts, dlogits, dvalues


# -- returns and smoothing ---------------------------------------------------------

def compute_returns(rewards, w, gamma: float, dones=None):
    """Finite-horizon spatially discounted returns ``R[t, i]``.

    ``rewards`` is ``(T, N)``; ``R[t, i] = sum_k gamma^k sum_j w[i, j] r[t+k, j]``
    summed to the end of the episode with no bootstrap.
    """
    rewards = np.asarray(rewards, float)
    if rewards.ndim != 2:
        raise ValueError("rewards must be a (T, N) array")
    if dones is not None and (len(dones) == 0 or not dones[-1]):
        raise ValueError("compute_returns needs a complete episode (last step must be done)")
    weighted = rewards @ np.asarray(w, float).T
    out = np.empty_like(weighted)
    acc = np.zeros(weighted.shape[1])
    for t in reversed(range(weighted.shape[0])):
        acc = weighted[t] + gamma * acc
        out[t] = acc
    return out


def smooth_action(prev_smoothed: float, sampled: float, rho: float, t: int) -> float:
    """Exponential smoothing of setpoints; ``t`` counts from 1."""
    if t <= 1:
        return sampled
    return rho * prev_smoothed + (1.0 - rho) * sampled


class ActionSmoother:
    """Windowed exponential smoothing of sampled setpoints for all agents.

    The executed setpoint is the exponential average rebuilt over the last
    ``window`` sampled setpoints, seeded with the oldest one; older samples
    have no influence.
    """

    def __init__(self, n_agents: int, rho: float, window: int = 2):
        self.n_agents, self.rho, self.window = n_agents, rho, window
        self.reset()

    def reset(self):
        self.history: list[np.ndarray] = []
        self.t = 0

    def __call__(self, sampled) -> np.ndarray:
        sampled = np.asarray(sampled, float)
        self.t += 1
        self.history.append(sampled.copy())
        self.history = self.history[-self.window:]
        out = self.history[0].copy()
        for k, a in enumerate(self.history[1:], start=2):
            out = smooth_action(out, a, self.rho, k)
        return out


# -- rollout storage and the update -------------------------------------------------

@dataclass
class RolloutBuffer:
    obs: list = field(default_factory=list)          # (N, 9) standardised
    actions: list = field(default_factory=list)      # (N,) sampled indices
    log_probs: list = field(default_factory=list)
    values: list = field(default_factory=list)
    rewards: list = field(default_factory=list)      # (N,) raw rewards
    dones: list = field(default_factory=list)
    setpoints: list = field(default_factory=list)
    voltages: list = field(default_factory=list)

    def add(self, obs, actions, log_probs, values, rewards, done, setpoints=None, voltages=None):
        self.obs.append(np.asarray(obs, float))
        self.actions.append(np.asarray(actions, int))
        self.log_probs.append(np.asarray(log_probs, float))
        self.values.append(np.asarray(values, float))
        self.rewards.append(np.asarray(rewards, float))
        self.dones.append(bool(done))
        self.setpoints.append(setpoints)
        self.voltages.append(voltages)

    def __len__(self):
        return len(self.actions)

    def clear(self):
        for f in self.__dataclass_fields__:
            getattr(self, f).clear()

    def arrays(self):
        return (np.stack(self.obs, axis=1), np.stack(self.actions), np.stack(self.rewards),
                np.array(self.dones))


class RunningMeanStd:
    """Streaming per-column mean/variance (parallel Welford merge).

    Batches of shape ``(T, n)`` update ``n`` independent statistics, one per
    agent, so no agent's targets depend on another agent's returns.
    """

    def __init__(self, n: int = 1, min_std: float = 1e-3):
        self.mean = np.zeros(n)
        self.var = np.ones(n)
        self.count = np.zeros(n, dtype=np.int64)
        self.min_std = min_std

    def update(self, x):
        x = np.asarray(x, float).reshape(-1, self.mean.size)
        n = x.shape[0]
        m, v = x.mean(axis=0), x.var(axis=0)
        tot = self.count + n
        delta = m - self.mean
        self.mean = self.mean + delta * n / tot
        self.var = (self.var * self.count + v * n + delta ** 2 * self.count * n / tot) / tot
        self.count = tot

    @property
    def std(self) -> np.ndarray:
        return np.maximum(np.sqrt(self.var), self.min_std)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "var": self.var.tolist(),
                "count": self.count.tolist(), "min_std": self.min_std}

    @classmethod
    def from_dict(cls, d):
        r = cls(len(d["mean"]), d.get("min_std", 1e-3))
        r.mean = np.asarray(d["mean"], float)
        r.var = np.asarray(d["var"], float)
        r.count = np.asarray(d["count"], np.int64)
        return r

    def select(self, index) -> "RunningMeanStd":
        """Statistics for a subset/reordering of columns; ``None`` entries start fresh."""
        out = RunningMeanStd(len(index), self.min_std)
        for k, j in enumerate(index):
            if j is not None:
                out.mean[k], out.var[k], out.count[k] = self.mean[j], self.var[j], self.count[j]
        return out


def make_optimizer(config: TrainConfig) -> OptimizerState:
    return OptimizerState(groups={
        "actor": (Adam(config.actor_lr), lambda k: not k.startswith("critic.")),
        "critic": (Adam(config.critic_lr), lambda k: k.startswith("critic.")),
    }, clip_norm=config.clip_norm)


def neighbor_action_matrix(actions: np.ndarray, neighbors: list[list[int]]):
    """Per agent ``(T, |N_i|)`` array of neighbours' sampled actions."""
    return [actions[:, nb] if nb else np.zeros((actions.shape[0], 0), int) for nb in neighbors]


def build_targets(rewards, dones, w, config: TrainConfig, ret_stats: RunningMeanStd | None,
                  next_values=None):
    """Clipped, spatially weighted rewards turned into critic targets ``(T, N)``."""
    r = np.clip(np.asarray(rewards, float) / config.reward_scale,
                -config.reward_clip, config.reward_clip)
    if config.critic_target == "mc":
        R = compute_returns(r, w, config.gamma, dones)
    else:
        weighted = r @ np.asarray(w, float).T
        boot = np.zeros_like(weighted) if next_values is None else next_values
        R = weighted + config.gamma * boot
    if config.return_norm == "running" and ret_stats is not None:
        ret_stats.update(R)
        R = (R - ret_stats.mean) / ret_stats.std
    return R


def compute_gradients(agents, neighbors, obs, actions, targets, config: TrainConfig):
    """Forward the episode, build losses and backpropagate; returns ``(grads, diag)``."""
    nbr = neighbor_action_matrix(actions, neighbors)
    cache = episode_forward(agents, neighbors, obs, nbr)
    dlogits, dvalues, diag = [], [], []
    for i in range(len(agents)):
        loss, parts, dl, dv = actor_critic_loss(
            cache.logits[i], cache.values[i], actions[:, i], targets[:, i],
            config.entropy_coef, config.value_coef)
        if not np.isfinite(loss):
            raise FloatingPointError(
                f"non-finite loss for agent {i}: {parts}; actions={actions[:, i].tolist()} "
                f"targets={targets[:, i].tolist()}")
        dlogits.append(dl)
        dvalues.append(dv)
        diag.append(parts)
    grads = episode_backward(agents, neighbors, cache, dlogits, dvalues, config.message_gradient)
    return grads, diag, cache


def update(agents, neighbors, buffer: RolloutBuffer, w, config: TrainConfig, optimizers,
           ret_stats: RunningMeanStd | None = None, snapshot_agents=None):
    """One per-episode actor-critic update for every agent (in place)."""
    obs, actions, rewards, dones = buffer.arrays()
    next_values = None
    if config.critic_target == "td0":
        ref = snapshot_agents if snapshot_agents is not None else agents
        nbr = neighbor_action_matrix(actions, neighbors)
        vals = np.stack(episode_forward(ref, neighbors, obs, nbr).values, axis=1)
        if ret_stats is not None and config.return_norm == "running":
            vals = vals * ret_stats.std + ret_stats.mean
        next_values = np.zeros_like(vals)
        next_values[:-1] = vals[1:]
        if not dones[-1]:
            raise ValueError("update needs a complete episode")
    targets = build_targets(rewards, dones, w, config, ret_stats, next_values)
    grads, diag, _ = compute_gradients(agents, neighbors, obs, actions, targets, config)
    norms = []
    for ag, g, opt in zip(agents, grads, optimizers):
        norms.append(clip_and_update(opt, ag.params(), g))
    return {
        "actor_loss": float(np.mean([d["policy"] + d["entropy"] for d in diag])),
        "critic_loss": float(np.mean([d["value"] for d in diag])),
        "entropy": float(np.mean([d["mean_entropy"] for d in diag])),
        "grad_norm": float(np.mean(norms)),
    }
