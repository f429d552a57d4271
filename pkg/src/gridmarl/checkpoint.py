"""Checkpoint persistence for agent parameter sets.

A checkpoint is an uncompressed NumPy ``.npz`` archive (a zip of ``.npy``
files). Entry names:

``__format__``
    0-d unicode array ``"gridmarl-checkpoint/1"``.
``__meta__``
    0-d unicode array holding a JSON object: agent count, DG bus ids, each
    agent's ordered neighbour bus ids, network flags, spec digest, episode
    index, observation normalisation and running return statistics.
``agentNNN/<layer>.<W|b>``
    float64 parameter block of agent ``NNN`` (zero-padded index); the shape
    is carried by the ``.npy`` header.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .agent import AgentNet

FORMAT = "gridmarl-checkpoint/1"


def block_key(agent_index: int, block: str) -> str:
    return f"agent{agent_index:03d}/{block}"


def save_checkpoint(path, agents: list[AgentNet], meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {"__format__": np.array(FORMAT), "__meta__": np.array(json.dumps(meta, sort_keys=True))}
    for i, ag in enumerate(agents):
        for name, arr in ag.params().items():
            arrays[block_key(i, name)] = arr
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    return path


def read_checkpoint(path):
    """Return ``(meta, blocks)`` where ``blocks[i]`` maps block name to array."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        if "__format__" not in data.files or str(data["__format__"]) != FORMAT:
            raise ValueError(f"{path} is not a {FORMAT} checkpoint")
        meta = json.loads(str(data["__meta__"]))
        blocks: list[dict[str, np.ndarray]] = [dict() for _ in range(meta["n_agents"])]
        for key in data.files:
            if key.startswith("agent"):
                head, block = key.split("/", 1)
                blocks[int(head[5:])][block] = data[key].copy()
    return meta, blocks


def build_agents(meta: dict, blocks) -> list[AgentNet]:
    agents = []
    for i, params in enumerate(blocks):
        ag = AgentNet(len(meta["neighbor_buses"][i]), None, meta["hidden"],
                      meta["comm_enabled"], meta["critic_neighbor_actions"])
        load_params(ag, params)
        agents.append(ag)
    return agents


def load_params(agent: AgentNet, params: dict[str, np.ndarray], only=None) -> None:
    """Copy ``params`` into ``agent`` in place; shapes must match exactly."""
    own = agent.params()
    for name, arr in params.items():
        if only is not None and name not in only:
            continue
        if name not in own:
            raise ValueError(f"unexpected parameter block '{name}'")
        if own[name].shape != arr.shape:
            raise ValueError(f"shape mismatch for '{name}': {own[name].shape} vs {arr.shape}")
        own[name][...] = arr
