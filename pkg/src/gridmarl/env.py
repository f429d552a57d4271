"""The secondary-voltage-control task as a partially observable multi-agent environment."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .sim import GridSimulator, PowerflowDiverged, SimConfig, SimState, perturb_loads
from .topology import MicrogridSpec

log = logging.getLogger(__name__)

N_ACTIONS = 10
SETPOINT_MIN = 1.00
SETPOINT_MAX = 1.14
SETPOINT_STEP = (SETPOINT_MAX - SETPOINT_MIN) / (N_ACTIONS - 1)

DIVERGED_REWARD = -10.0
NORMAL_BAND = (0.95, 1.05)
VIOLATION_BAND = (0.8, 1.25)

# Column layout of the per-DG measurement vector and the four unit groups.
OBS_DIM = 9
OBS_GROUPS = ((0,), (1, 2), (7, 8), (3, 4, 5, 6))  # angle | P, Q | v_b dq | i_o dq, i_b dq


def decode_action(index):
    """Map an action index in ``[0, 9]`` to a voltage setpoint in pu."""
    index = np.asarray(index)
    if np.any((index < 0) | (index >= N_ACTIONS)):
        raise ValueError(f"action index out of range: {index}")
    return SETPOINT_MIN + index * SETPOINT_STEP


def reward(v: float) -> float:
    """Three-zone voltage reward. Boundary points 0.95 and 1.05 count as normal."""
    if not np.isfinite(v):
        raise ValueError(f"non-finite voltage {v!r}")
    dev = abs(1.0 - v)
    if NORMAL_BAND[0] <= v <= NORMAL_BAND[1]:
        return 0.05 - dev
    if VIOLATION_BAND[0] <= v <= VIOLATION_BAND[1]:
        return -dev
    return DIVERGED_REWARD


def zone(v: float) -> int:
    """0 = normal, 1 = violation, 2 = diverged."""
    if NORMAL_BAND[0] <= v <= NORMAL_BAND[1]:
        return 0
    if VIOLATION_BAND[0] <= v <= VIOLATION_BAND[1]:
        return 1
    return 2


def team_rewards(r, w):
    """Spatially weighted reward per agent: ``out[i] = sum_j w[i, j] r[j]``."""
    r = np.asarray(r, dtype=float)
    w = np.asarray(w, dtype=float)
    if w.shape != (r.shape[-1], r.shape[-1]):
        raise ValueError(f"weight matrix {w.shape} does not match {r.shape[-1]} agents")
    return r @ w.T


def group_observation(obs):
    """Split raw 9-vectors (last axis) into the four unit groups."""
    obs = np.asarray(obs)
    return tuple(obs[..., list(g)] for g in OBS_GROUPS)


@dataclass(frozen=True)
class EpisodeConfig:
    horizon: int = 20
    episode_load_level: float = 0.2
    step_load_level: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass
class NormalizationStats:
    mean: np.ndarray = field(default_factory=lambda: np.zeros(OBS_DIM))
    std: np.ndarray = field(default_factory=lambda: np.ones(OBS_DIM))

    def apply(self, obs):
        return (np.asarray(obs, float) - self.mean) / self.std

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float))

    @classmethod
    def identity(cls):
        return cls()


@dataclass
class StepResult:
    obs: np.ndarray
    rewards: np.ndarray
    done: bool
    voltages: np.ndarray
    diverged: bool


class MicrogridEnv:
    """One simulator instance plus episode bookkeeping.

    Observations are raw per-DG measurement vectors of shape ``(N, 9)``;
    standardisation is the caller's job (see :class:`NormalizationStats`).
    """

    def __init__(self, spec: MicrogridSpec, episode: EpisodeConfig | None = None,
                 sim_config: SimConfig | None = None):
        self.spec = spec
        self.episode = episode or EpisodeConfig()
        self.sim = GridSimulator(spec, sim_config)
        self.n_agents = spec.n_dg
        self.neighbors = spec.neighbor_lists()
        self.rng = np.random.default_rng(self.episode.seed)
        self.t = 0
        self.state: SimState | None = None
        self.base_scalars = np.ones(len(spec.loads))
        self.load_scalars = self.base_scalars
        self.last_obs = None
        self.done = True

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        ep = self.episode
        self.base_scalars = perturb_loads(self.rng, len(self.spec.loads),
                                          ep.episode_load_level, ep.step_load_level)
        self.load_scalars = self.base_scalars
        try:
            self.state = self.sim.equilibrium(np.ones(self.n_agents), self.base_scalars)
        except PowerflowDiverged as exc:
            raise RuntimeError(f"grid '{self.spec.name}' has no feasible initial "
                               f"operating point: {exc}") from exc
        self.t = 0
        self.done = False
        self.last_obs = self.sim.observe(self.state, self.load_scalars)
        return self.last_obs.copy()

    def voltages(self) -> np.ndarray:
        return self.sim.e_magnitude(self.state)

    def step(self, setpoints) -> StepResult:
        if self.done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        setpoints = np.asarray(setpoints, float)
        if setpoints.shape != (self.n_agents,):
            raise ValueError(f"expected {self.n_agents} setpoints, got shape {setpoints.shape}")
        ep = self.episode
        self.load_scalars = perturb_loads(self.rng, len(self.spec.loads), ep.episode_load_level,
                                          ep.step_load_level, base=self.base_scalars)
        self.t += 1
        try:
            self.state, obs = self.sim.step(self.state, setpoints, self.load_scalars)
        except PowerflowDiverged:
            self.done = True
            r = np.full(self.n_agents, DIVERGED_REWARD)
            return StepResult(self.last_obs.copy(), r, True, np.full(self.n_agents, np.nan), True)
        v = self.voltages()
        r = np.array([reward(x) for x in v])
        self.done = self.t >= ep.horizon
        self.last_obs = obs
        return StepResult(obs.copy(), r, self.done, v, False)


def fit_normalization(spec: MicrogridSpec, n_episodes: int = 200, seed: int = 0,
                      episode: EpisodeConfig | None = None,
                      sim_config: SimConfig | None = None,
                      min_std: float = 1e-6) -> NormalizationStats:
    """Observation mean/std over ``n_episodes`` of uniformly random setpoints."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    env = MicrogridEnv(spec, episode, sim_config)
    seeds = np.random.SeedSequence([seed, 17]).spawn(n_episodes)
    act_rng = np.random.default_rng(np.random.SeedSequence([seed, 18]))
    rows = []
    for ss in seeds:
        obs = env.reset(seed=int(ss.generate_state(1)[0]))
        rows.append(obs)
        while not env.done:
            idx = act_rng.integers(0, N_ACTIONS, size=env.n_agents)
            res = env.step(decode_action(idx))
            if not res.diverged:
                rows.append(res.obs)
    data = np.concatenate(rows, axis=0)
    return stats_from_samples(data, min_std)


def stats_from_samples(data, min_std: float = 1e-6) -> NormalizationStats:
    data = np.asarray(data, float)
    mean = data.mean(axis=0)
    std = data.std(axis=0)
    low = std < min_std
    if low.any():
        log.warning("observation dimensions %s are (nearly) constant; std floored at %g",
                    np.flatnonzero(low).tolist(), min_std)
        std = np.where(low, min_std, std)
    return NormalizationStats(mean, std)
