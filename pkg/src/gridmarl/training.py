"""Training, evaluation and topology adaptation loops."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .agent import (ActionSmoother, AgentNet, MessageBoard, RolloutBuffer, RunningMeanStd,
                    TrainConfig, make_optimizer, update)
from .checkpoint import build_agents, load_params, read_checkpoint, save_checkpoint
from .env import EpisodeConfig, MicrogridEnv, NormalizationStats, decode_action, zone
from .nn import softmax_sample
from .sim import SimConfig
from .topology import MicrogridSpec, SpecError, hop_distances, spatial_weights

log = logging.getLogger(__name__)

# Stream tags for deriving independent generators from one base seed.
_AGENT_INIT, _ACTIONS, _TRAIN_ENV, _EVAL_ENV = 1, 2, 3, 4


def episode_seed(base_seed: int, tag: int, episode: int) -> int:
    return int(np.random.SeedSequence([base_seed, tag, episode]).generate_state(1)[0])


def weight_matrix(spec: MicrogridSpec, config: TrainConfig) -> np.ndarray:
    d = hop_distances(spec)
    if config.distance_threshold is not None:
        return spatial_weights(d, threshold=config.distance_threshold)
    return spatial_weights(d, alpha=config.alpha)


def init_agents(spec: MicrogridSpec, config: TrainConfig, rng: np.random.Generator):
    return [AgentNet(len(nb), rng, config.hidden, config.comm_enabled,
                     config.critic_neighbor_actions) for nb in spec.neighbor_lists()]


def policy_step(agents, neighbors, obs, board: MessageBoard, c, rng=None, greedy=False,
                timings=None):
    """One decentralised decision for every agent.

    Every agent reads its neighbours' step ``t - 1`` messages from ``board``
    before the new hidden states are published. Returns
    ``(c, actions, log_probs)``; ``timings`` (if given) collects per-agent
    wall-clock seconds.
    """
    n = len(agents)
    h_prev = board.h
    h_new, c_new = np.empty_like(h_prev), np.empty_like(c)
    actions = np.empty(n, dtype=int)
    logps = np.empty(n)
    for i, ag in enumerate(agents):
        t0 = time.perf_counter()
        hi, ci = ag.comm_forward(obs[i], h_prev[i:i + 1], c[i:i + 1], board.read(neighbors[i]))
        a, lp, _ = softmax_sample(ag.logits(hi)[0], rng, greedy)
        if timings is not None:
            timings.append(time.perf_counter() - t0)
        h_new[i], c_new[i] = hi[0], ci[0]
        actions[i], logps[i] = a, lp
    board.publish(h_new)
    return c_new, actions, logps


@dataclass
class EpisodeRecord:
    rewards: np.ndarray
    voltages: np.ndarray
    actions: np.ndarray
    setpoints: np.ndarray
    loads: np.ndarray     # load scalars applied at each step
    diverged: bool
    decision_times: list = field(default_factory=list)


def run_episode(env: MicrogridEnv, agents, norm: NormalizationStats, config: TrainConfig,
                seed: int, rng=None, greedy=False, buffer: RolloutBuffer | None = None,
                timings: list | None = None) -> EpisodeRecord:
    neighbors = env.neighbors
    n = env.n_agents
    obs = env.reset(seed=seed)
    board = MessageBoard(n, config.hidden)
    c = np.zeros((n, config.hidden))
    smoother = ActionSmoother(n, config.rho, config.smoothing_window)
    rewards, volts, acts, sps, loads = [], [], [], [], []
    diverged = False
    while not env.done:
        o = norm.apply(obs)
        c, a, lp = policy_step(agents, neighbors, o, board, c, rng, greedy, timings)
        values = None
        if buffer is not None:
            h = board.h
            values = np.array([ag.value(h[i:i + 1], a[nb])[0]
                               for i, (ag, nb) in enumerate(zip(agents, neighbors))])
        setpoints = smoother(decode_action(a))
        res = env.step(setpoints)
        if buffer is not None:
            buffer.add(o, a, lp, values, res.rewards, res.done, setpoints, res.voltages)
        rewards.append(res.rewards)
        volts.append(res.voltages)
        acts.append(a)
        sps.append(setpoints)
        loads.append(np.array(env.load_scalars))
        diverged = diverged or res.diverged
        obs = res.obs
    return EpisodeRecord(np.array(rewards), np.array(volts), np.array(acts), np.array(sps),
                         np.array(loads), diverged)


class Trainer:
    """Runs the per-episode collect/update loop for one grid."""

    def __init__(self, spec: MicrogridSpec, config: TrainConfig, seed: int = 0,
                 norm: NormalizationStats | None = None,
                 episode: EpisodeConfig | None = None, sim_config: SimConfig | None = None,
                 agents: list[AgentNet] | None = None, ret_stats: RunningMeanStd | None = None):
        self.spec = spec
        self.config = config
        self.seed = seed
        self.episode_config = episode or EpisodeConfig()
        if config.batch_size != self.episode_config.horizon:
            raise ValueError("updates run once per episode: batch_size must equal the horizon "
                             f"({config.batch_size} != {self.episode_config.horizon})")
        self.sim_config = sim_config or SimConfig()
        self.env = MicrogridEnv(spec, self.episode_config, self.sim_config)
        self.norm = norm or NormalizationStats.identity()
        self.neighbors = spec.neighbor_lists()
        self.w = weight_matrix(spec, config)
        init_rng = np.random.default_rng(np.random.SeedSequence([seed, _AGENT_INIT]))
        self.agents = agents if agents is not None else init_agents(spec, config, init_rng)
        if len(self.agents) != spec.n_dg:
            raise ValueError("agent count does not match the grid")
        self.optimizers = [make_optimizer(config) for _ in self.agents]
        self.ret_stats = ret_stats if ret_stats is not None else RunningMeanStd(spec.n_dg)
        if self.ret_stats.mean.size != spec.n_dg:
            raise ValueError("return statistics do not match the agent count")
        self.action_rng = np.random.default_rng(np.random.SeedSequence([seed, _ACTIONS]))
        self.episodes_done = 0

    def train_episode(self) -> dict:
        ep = self.episodes_done
        buffer = RolloutBuffer()
        rec = run_episode(self.env, self.agents, self.norm, self.config,
                          episode_seed(self.seed, _TRAIN_ENV, ep), self.action_rng,
                          buffer=buffer)
        diag = update(self.agents, self.neighbors, buffer, self.w, self.config,
                      self.optimizers, self.ret_stats)
        buffer.clear()
        self.episodes_done += 1
        v = rec.voltages[np.isfinite(rec.voltages)]
        return {
            "episode": ep,
            "mean_step_reward": float(rec.rewards.mean()),
            "actor_loss": diag["actor_loss"],
            "critic_loss": diag["critic_loss"],
            "divergence_count": int(rec.diverged),
            "steps": int(rec.rewards.shape[0]),
            "normal_frac": float(np.mean([zone(x) == 0 for x in v])) if v.size else 0.0,
            "entropy": diag["entropy"],
        }

    def checkpoint_meta(self) -> dict:
        spec = self.spec
        buses = [d.bus for d in spec.dgs]
        return {
            "n_agents": spec.n_dg,
            "dg_buses": buses,
            "neighbor_buses": [[buses[j] for j in nb] for nb in self.neighbors],
            "hidden": self.config.hidden,
            "comm_enabled": self.config.comm_enabled,
            "critic_neighbor_actions": self.config.critic_neighbor_actions,
            "spec_digest": spec.digest(),
            "spec_name": spec.name,
            "spec": spec.to_dict(),
            "episode": self.episodes_done,
            "normalization": self.norm.to_dict(),
            "return_stats": self.ret_stats.to_dict(),
            "train_config": self.config.to_dict(),
        }

    def save(self, path) -> Path:
        return save_checkpoint(path, self.agents, self.checkpoint_meta())

    def train(self, n_episodes: int, on_episode: Callable[[dict], None] | None = None,
              checkpoint_dir=None, checkpoint_every: int | None = None,
              stop: Callable[[list], bool] | None = None):
        """Train for ``n_episodes``; returns ``(metrics, checkpoint_paths)``.

        A checkpoint is written every ``checkpoint_every`` episodes and after the
        last one. ``stop(metrics)`` may end training early.
        """
        metrics, ckpts = [], []
        for _ in range(n_episodes):
            row = self.train_episode()
            metrics.append(row)
            if on_episode is not None:
                on_episode(row)
            done = stop is not None and stop(metrics)
            last = done or len(metrics) == n_episodes
            if checkpoint_dir is not None and (
                    last or (checkpoint_every and self.episodes_done % checkpoint_every == 0)):
                path = Path(checkpoint_dir) / f"ckpt_{self.episodes_done:06d}.npz"
                ckpts.append(self.save(path))
            if done:
                break
        return metrics, ckpts


def train(spec: MicrogridSpec, config: TrainConfig, seed: int = 0, norm=None, episode=None,
          sim_config=None, n_episodes: int | None = None, **kwargs):
    trainer = Trainer(spec, config, seed, norm, episode, sim_config)
    metrics, ckpts = trainer.train(config.episodes if n_episodes is None else n_episodes, **kwargs)
    return trainer, metrics, ckpts


# -- evaluation ---------------------------------------------------------------------

def evaluate(agents, spec: MicrogridSpec, n_episodes: int = 20, load_level: float = 0.1,
             seed: int = 0, config: TrainConfig | None = None,
             norm: NormalizationStats | None = None, step_load_level: float = 0.05,
             horizon: int = 20, sim_config: SimConfig | None = None, greedy: bool = True,
             keep_records: bool = False) -> dict:
    """Greedy evaluation over episodes whose disturbances depend only on ``seed``."""
    config = config or TrainConfig()
    norm = norm or NormalizationStats.identity()
    env = MicrogridEnv(spec, EpisodeConfig(horizon, load_level, step_load_level), sim_config)
    rng = np.random.default_rng(np.random.SeedSequence([seed, _ACTIONS]))
    timings: list[float] = []
    records = []
    returns, zones, step_rewards = [], np.zeros(3), []
    for k in range(n_episodes):
        rec = run_episode(env, agents, norm, config, episode_seed(seed, _EVAL_ENV, k), rng,
                          greedy=greedy, timings=timings)
        records.append(rec)
        returns.append(float(rec.rewards.sum(axis=0).mean()))
        step_rewards.append(rec.rewards)
        for t in range(rec.rewards.shape[0]):
            for v in rec.voltages[t]:
                zones[2 if not np.isfinite(v) else zone(v)] += 1
    allr = np.concatenate(step_rewards)
    out = {
        "episodes": n_episodes,
        "load_level": load_level,
        "seed": seed,
        "mean_step_reward": float(allr.mean()),
        "mean_episode_return": float(np.mean(returns)),
        "zone_occupancy": {"normal": float(zones[0] / zones.sum()),
                           "violation": float(zones[1] / zones.sum()),
                           "diverged": float(zones[2] / zones.sum())},
        "divergent_episodes": int(sum(r.diverged for r in records)),
        "decision_time_ms": 1e3 * float(np.mean(timings)),
        "n_agents": spec.n_dg,
    }
    if keep_records:
        out["records"] = records
    return out


# -- adaptation -----------------------------------------------------------------------

MESSAGE_DEPENDENT = ("q_h.", "critic.")


@dataclass
class AdaptResult:
    agents: list[AgentNet]
    norm: NormalizationStats
    ret_stats: RunningMeanStd
    kept: list[int]      # parameters copied unchanged
    partial: list[int]   # neighbour set changed: message extractor and critic reinitialised
    new: list[int]       # DG absent from the checkpoint: fresh agent
    meta: dict

    def summary(self) -> dict:
        return {"kept": self.kept, "partial": self.partial, "new": self.new,
                "base_spec": self.meta.get("spec_name")}


def adapt(checkpoint, new_spec: MicrogridSpec, seed: int = 0,
          config: TrainConfig | None = None) -> AdaptResult:
    """Warm-start agents for a grid with DGs added or removed.

    Agents are matched by DG bus. A surviving agent keeps all its parameters
    when its ordered neighbour buses are unchanged; otherwise its message
    extractor and critic head (whose shapes or meaning depend on the
    neighbours) are reinitialised. New DGs get fresh agents. Observation
    normalisation and return statistics carry over from the checkpoint.
    """
    meta, blocks = read_checkpoint(checkpoint)
    old_buses = meta["dg_buses"]
    new_buses = [d.bus for d in new_spec.dgs]
    kept_buses = [b for b in new_buses if b in old_buses]
    if not kept_buses:
        raise SpecError("new grid shares no DG with the checkpoint; cannot adapt")
    changed = len(set(old_buses) ^ set(new_buses))
    if changed > len(kept_buses):
        raise SpecError(f"new grid differs from the checkpoint in {changed} DGs but keeps only "
                        f"{len(kept_buses)}; grids are unrelated")
    if config is None:
        config = TrainConfig(**meta["train_config"])
    if (config.hidden, config.comm_enabled, config.critic_neighbor_actions) != (
            meta["hidden"], meta["comm_enabled"], meta["critic_neighbor_actions"]):
        raise ValueError("training config is incompatible with the checkpoint's network layout")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _AGENT_INIT]))
    agents = init_agents(new_spec, config, rng)
    neighbors = new_spec.neighbor_lists()
    kept, partial, new, source = [], [], [], []
    for i, bus in enumerate(new_buses):
        if bus not in old_buses:
            new.append(i)
            source.append(None)
            continue
        j = old_buses.index(bus)
        source.append(j)
        if [new_buses[k] for k in neighbors[i]] == meta["neighbor_buses"][j]:
            load_params(agents[i], blocks[j])
            kept.append(i)
        else:
            keep = {k for k in blocks[j] if not k.startswith(MESSAGE_DEPENDENT)}
            load_params(agents[i], blocks[j], only=keep)
            partial.append(i)
    ret_stats = RunningMeanStd.from_dict(meta["return_stats"]).select(source)
    norm = NormalizationStats.from_dict(meta["normalization"])
    return AdaptResult(agents, norm, ret_stats, kept, partial, new, meta)


def load_agents(checkpoint):
    meta, blocks = read_checkpoint(checkpoint)
    return build_agents(meta, blocks), meta
