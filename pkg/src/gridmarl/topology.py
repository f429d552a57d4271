"""Static microgrid descriptions, communication graph distances and spatial weights."""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

FORMAT_VERSION = 1

# Default primary-control constants (configurable per DG in the grid file).
OMEGA_BASE = 2 * np.pi * 60.0
DEFAULT_DROOP_P = 9.4e-5 * OMEGA_BASE
DEFAULT_DROOP_Q = 0.013
DEFAULT_FILTER_CUTOFF = 31.41

LOAD_MODELS = ("constant_power", "constant_impedance")


class SpecError(ValueError):
    """Raised when a grid description is malformed or violates an invariant."""


@dataclass(frozen=True)
class LineSpec:
    from_bus: str
    to_bus: str
    resistance: float
    reactance: float


@dataclass(frozen=True)
class LoadSpec:
    bus: str
    p_nominal: float
    q_nominal: float
    model: str = "constant_power"


@dataclass(frozen=True)
class DGSpec:
    bus: str
    droop_gain_p: float = DEFAULT_DROOP_P
    droop_gain_q: float = DEFAULT_DROOP_Q
    coupling_resistance: float = 0.0
    coupling_reactance: float = 0.1
    filter_cutoff: float = DEFAULT_FILTER_CUTOFF
    frequency_setpoint: float = OMEGA_BASE


@dataclass(frozen=True)
class MicrogridSpec:
    buses: tuple[str, ...]
    lines: tuple[LineSpec, ...]
    loads: tuple[LoadSpec, ...]
    dgs: tuple[DGSpec, ...]
    comm_edges: tuple[tuple[int, int], ...]
    base_power: float = 1.0e5
    base_voltage: float = 380.0
    nominal_frequency: float = OMEGA_BASE
    name: str = "microgrid"
    _bus_index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_bus_index", {b: k for k, b in enumerate(self.buses)})

    @property
    def n_dg(self) -> int:
        return len(self.dgs)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def bus_index(self, bus: str) -> int:
        return self._bus_index[bus]

    @property
    def dg_bus_indices(self) -> np.ndarray:
        return np.array([self._bus_index[d.bus] for d in self.dgs], dtype=int)

    def neighbors(self, i: int) -> list[int]:
        """Communication neighbors of DG ``i`` in ascending index order."""
        out = set()
        for a, b in self.comm_edges:
            if a == i:
                out.add(b)
            elif b == i:
                out.add(a)
        return sorted(out)

    def neighbor_lists(self) -> list[list[int]]:
        return [self.neighbors(i) for i in range(self.n_dg)]

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "name": self.name,
            "base": {
                "power": self.base_power,
                "voltage": self.base_voltage,
                "frequency": self.nominal_frequency,
            },
            "buses": list(self.buses),
            "lines": [
                {"from": ln.from_bus, "to": ln.to_bus, "resistance": ln.resistance,
                 "reactance": ln.reactance}
                for ln in self.lines
            ],
            "loads": [
                {"bus": ld.bus, "p_nominal": ld.p_nominal, "q_nominal": ld.q_nominal,
                 "model": ld.model}
                for ld in self.loads
            ],
            "dgs": [
                {"bus": d.bus, "droop_gain_p": d.droop_gain_p, "droop_gain_q": d.droop_gain_q,
                 "coupling_resistance": d.coupling_resistance,
                 "coupling_reactance": d.coupling_reactance,
                 "filter_cutoff": d.filter_cutoff,
                 "frequency_setpoint": d.frequency_setpoint}
                for d in self.dgs
            ],
            "comm_edges": [list(e) for e in self.comm_edges],
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# -- parsing ---------------------------------------------------------------

def _require(doc: dict, key: str, where: str):
    if not isinstance(doc, dict) or key not in doc:
        raise SpecError(f"{where}: missing required field '{key}'")
    return doc[key]


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SpecError(f"{where}: expected a number, got {value!r}")
    return float(value)


def spec_from_dict(doc: dict) -> MicrogridSpec:
    """Build and validate a MicrogridSpec from a parsed grid document."""
    if not isinstance(doc, dict):
        raise SpecError("grid document must be a mapping")
    version = _require(doc, "format_version", "document")
    if version != FORMAT_VERSION:
        raise SpecError(f"document: unsupported format_version {version!r}")

    base = doc.get("base", {}) or {}
    buses = _require(doc, "buses", "document")
    if not isinstance(buses, list) or not buses:
        raise SpecError("buses: expected a non-empty list")
    buses = tuple(str(b) for b in buses)

    lines = []
    for k, ln in enumerate(_require(doc, "lines", "document") or []):
        where = f"lines[{k}]"
        lines.append(LineSpec(
            from_bus=str(_require(ln, "from", where)),
            to_bus=str(_require(ln, "to", where)),
            resistance=_number(_require(ln, "resistance", where), where + ".resistance"),
            reactance=_number(_require(ln, "reactance", where), where + ".reactance"),
        ))

    loads = []
    for k, ld in enumerate(doc.get("loads", []) or []):
        where = f"loads[{k}]"
        loads.append(LoadSpec(
            bus=str(_require(ld, "bus", where)),
            p_nominal=_number(_require(ld, "p_nominal", where), where + ".p_nominal"),
            q_nominal=_number(ld.get("q_nominal", 0.0), where + ".q_nominal"),
            model=str(ld.get("model", "constant_power")),
        ))

    dgs = []
    for k, dg in enumerate(_require(doc, "dgs", "document") or []):
        where = f"dgs[{k}]"
        kwargs = {"bus": str(_require(dg, "bus", where))}
        for key in ("droop_gain_p", "droop_gain_q", "coupling_resistance",
                    "coupling_reactance", "filter_cutoff", "frequency_setpoint"):
            if key in dg:
                kwargs[key] = _number(dg[key], f"{where}.{key}")
        dgs.append(DGSpec(**kwargs))

    edges = []
    for k, e in enumerate(_require(doc, "comm_edges", "document") or []):
        if not isinstance(e, (list, tuple)) or len(e) != 2:
            raise SpecError(f"comm_edges[{k}]: expected a pair of DG indices")
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in e):
            raise SpecError(f"comm_edges[{k}]: DG indices must be integers")
        a, b = int(e[0]), int(e[1])
        edges.append((min(a, b), max(a, b)))

    spec = MicrogridSpec(
        buses=buses,
        lines=tuple(lines),
        loads=tuple(loads),
        dgs=tuple(dgs),
        comm_edges=tuple(sorted(set(edges))),
        base_power=_number(base.get("power", 1.0e5), "base.power"),
        base_voltage=_number(base.get("voltage", 380.0), "base.voltage"),
        nominal_frequency=_number(base.get("frequency", OMEGA_BASE), "base.frequency"),
        name=str(doc.get("name", "microgrid")),
    )
    validate_spec(spec)
    return spec


def _connected(n: int, edges: Sequence[tuple[int, int]]) -> bool:
    if n == 0:
        return False
    adj = [[] for _ in range(n)]
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    seen = {0}
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return len(seen) == n


def validate_spec(spec: MicrogridSpec) -> None:
    known = set(spec.buses)
    if len(known) != len(spec.buses):
        raise SpecError("buses: duplicate bus identifiers")
    for k, ln in enumerate(spec.lines):
        for end in (ln.from_bus, ln.to_bus):
            if end not in known:
                raise SpecError(f"lines[{k}]: unknown bus '{end}'")
        if ln.from_bus == ln.to_bus:
            raise SpecError(f"lines[{k}]: line connects bus '{ln.from_bus}' to itself")
        if ln.resistance < 0:
            raise SpecError(f"lines[{k}]: negative resistance")
        if ln.reactance <= 0:
            raise SpecError(f"lines[{k}]: reactance must be positive")
    for k, ld in enumerate(spec.loads):
        if ld.bus not in known:
            raise SpecError(f"loads[{k}]: unknown bus '{ld.bus}'")
        if ld.p_nominal < 0:
            raise SpecError(f"loads[{k}]: negative p_nominal")
        if ld.model not in LOAD_MODELS:
            raise SpecError(f"loads[{k}]: unknown load model '{ld.model}'")
    seen_dg_bus = set()
    for k, dg in enumerate(spec.dgs):
        if dg.bus not in known:
            raise SpecError(f"dgs[{k}]: unknown bus '{dg.bus}'")
        if dg.bus in seen_dg_bus:
            raise SpecError(f"dgs[{k}]: bus '{dg.bus}' already hosts a DG")
        seen_dg_bus.add(dg.bus)
        if dg.droop_gain_p <= 0 or dg.droop_gain_q <= 0:
            raise SpecError(f"dgs[{k}]: droop gains must be positive")
        if dg.coupling_reactance <= 0:
            raise SpecError(f"dgs[{k}]: coupling_reactance must be positive")
        if dg.coupling_resistance < 0:
            raise SpecError(f"dgs[{k}]: negative coupling_resistance")
        if dg.filter_cutoff <= 0:
            raise SpecError(f"dgs[{k}]: filter_cutoff must be positive")
    n = spec.n_dg
    if n < 2:
        raise SpecError(f"dgs: at least 2 DGs required, got {n}")
    for a, b in spec.comm_edges:
        if not (0 <= a < n and 0 <= b < n):
            raise SpecError(f"comm_edges: edge ({a}, {b}) references an unknown DG")
        if a == b:
            raise SpecError(f"comm_edges: self-loop on DG {a}")
    if not _connected(n, spec.comm_edges):
        raise SpecError("comm_edges: communication graph is not connected")
    idx = {b: k for k, b in enumerate(spec.buses)}
    elec = [(idx[ln.from_bus], idx[ln.to_bus]) for ln in spec.lines]
    if not _connected(spec.n_bus, elec):
        raise SpecError("lines: electrical graph is not connected")


def load_spec(source: str | Path | dict) -> MicrogridSpec:
    """Load a grid description.

    ``source`` may be a parsed mapping, a path to a YAML/JSON document, or the
    name of a bundled fixture (``toy4``, ``toy3``, ``microgrid6``, ``microgrid20``).
    """
    if isinstance(source, dict):
        return spec_from_dict(source)
    path = Path(source)
    if path.suffix in (".yaml", ".yml", ".json") and path.exists():
        text = path.read_text()
    else:
        name = str(source)
        ref = resources.files("gridmarl.fixtures").joinpath(f"{name}.yaml")
        if not ref.is_file():
            raise SpecError(f"no grid file or bundled fixture named '{source}'")
        text = ref.read_text()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SpecError(f"could not parse grid document: {exc}") from exc
    return spec_from_dict(doc)


def bundled_fixtures() -> list[str]:
    root = resources.files("gridmarl.fixtures")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


# -- graph quantities -------------------------------------------------------

def hop_distances(spec: MicrogridSpec) -> np.ndarray:
    """All-pairs shortest-path hop counts on the communication graph (BFS)."""
    n = spec.n_dg
    adj = spec.neighbor_lists()
    d = np.full((n, n), -1, dtype=int)
    for src in range(n):
        d[src, src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if d[src, v] < 0:
                    d[src, v] = d[src, u] + 1
                    queue.append(v)
    if (d < 0).any():
        raise SpecError("communication graph is disconnected")
    return d


def spatial_weights(d: np.ndarray, alpha: float | None = None,
                    threshold: int | None = None) -> np.ndarray:
    """Spatial discount weights: ``alpha**d`` (power law) or ``1{d <= threshold}``.

    Exactly one of ``alpha`` and ``threshold`` must be given. ``0**0`` is 1, so
    ``alpha=0`` yields the identity (purely local reward).
    """
    d = np.asarray(d)
    if (alpha is None) == (threshold is None):
        raise ValueError("give exactly one of alpha or threshold")
    if threshold is not None:
        if threshold < 0:
            raise ValueError(f"distance threshold must be >= 0, got {threshold}")
        return (d <= threshold).astype(float)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"spatial discount alpha must lie in [0, 1], got {alpha}")
    return np.where(d == 0, 1.0, float(alpha) ** d.astype(float))


def line_admittance_matrix(spec: MicrogridSpec) -> np.ndarray:
    """Bus admittance matrix of the lines only (no loads, no DG couplings)."""
    n = spec.n_bus
    Y = np.zeros((n, n), dtype=complex)
    for ln in spec.lines:
        z = complex(ln.resistance, ln.reactance)
        if z == 0:
            raise SpecError(f"line {ln.from_bus}-{ln.to_bus} has zero impedance")
        y = 1.0 / z
        a, b = spec.bus_index(ln.from_bus), spec.bus_index(ln.to_bus)
        Y[a, a] += y
        Y[b, b] += y
        Y[a, b] -= y
        Y[b, a] -= y
    return Y


def impedance_load_admittance(spec: MicrogridSpec, load_scalars=None) -> np.ndarray:
    """Per-bus shunt admittance of constant-impedance loads at 1 pu voltage."""
    shunt = np.zeros(spec.n_bus, dtype=complex)
    scal = np.ones(len(spec.loads)) if load_scalars is None else np.asarray(load_scalars)
    for k, ld in enumerate(spec.loads):
        if ld.model == "constant_impedance":
            shunt[spec.bus_index(ld.bus)] += scal[k] * complex(ld.p_nominal, -ld.q_nominal)
    return shunt


def admittance_matrix(spec: MicrogridSpec, include_loads: bool = True) -> np.ndarray:
    Y = line_admittance_matrix(spec)
    if include_loads:
        Y[np.diag_indices_from(Y)] += impedance_load_admittance(spec)
    return Y
