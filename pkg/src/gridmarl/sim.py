"""Quasi-stationary phasor simulation of a droop-controlled inverter microgrid.

Each DG is an ideal voltage source ``E_i∠δ_i`` behind its coupling impedance.
Between secondary-control actions the per-DG angle and the first-order filtered
powers are integrated with explicit Euler; the network is solved algebraically
(Newton-Raphson, rectangular coordinates) at every substep.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize

from .topology import MicrogridSpec, line_admittance_matrix

MEASUREMENT_FIELDS = ("delta", "p", "q", "i_od", "i_oq", "i_bd", "i_bq", "v_bd", "v_bq")

V_MIN, V_MAX = 0.01, 10.0


class PowerflowDiverged(RuntimeError):
    """The network equations have no (reachable) solution at this operating point."""


@dataclass(frozen=True)
class SimConfig:
    control_interval: float = 0.05
    substep: float = 1e-3
    nr_tolerance: float = 1e-8
    nr_max_iterations: int = 50
    integration: str = "explicit_euler"

    def __post_init__(self):
        if self.integration != "explicit_euler":
            raise ValueError(f"unsupported integration scheme {self.integration!r}")
        if self.nr_tolerance <= 0:
            raise ValueError("nr_tolerance must be positive")
        if self.substep <= 0 or self.control_interval <= 0:
            raise ValueError("substep and control_interval must be positive")
        n = self.control_interval / self.substep
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValueError("substep must divide control_interval")

    @property
    def n_substeps(self) -> int:
        return int(round(self.control_interval / self.substep))


@dataclass
class SimState:
    """Dynamic state of all DGs plus the last network solution (warm start)."""

    delta: np.ndarray
    p_filtered: np.ndarray
    q_filtered: np.ndarray
    v_setpoint: np.ndarray
    bus_voltage: np.ndarray | None = None

    def copy(self) -> "SimState":
        return SimState(
            self.delta.copy(), self.p_filtered.copy(), self.q_filtered.copy(),
            self.v_setpoint.copy(),
            None if self.bus_voltage is None else self.bus_voltage.copy(),
        )


@dataclass
class PhasorSolution:
    bus_voltage: np.ndarray
    dg_output_current: np.ndarray
    bus_injection_current: np.ndarray
    source_voltage: np.ndarray
    iterations: int = 0

    @property
    def dg_power(self) -> np.ndarray:
        """Complex power delivered by each DG source (P + jQ)."""
        return self.source_voltage * np.conj(self.dg_output_current)


def extract_dq(phasor, frame_angle):
    """Project a phasor onto the d-q frame rotating at ``frame_angle``."""
    rotated = np.asarray(phasor) * np.exp(-1j * np.asarray(frame_angle))
    return rotated.real, rotated.imag


def perturb_loads(rng: np.random.Generator, n_loads: int, episode_level: float,
                  step_level: float, base: np.ndarray | None = None):
    """Draw load scalars.

    With ``base=None`` a fresh episode base is drawn from
    ``U[1 - episode_level, 1 + episode_level]`` and returned without step noise.
    Otherwise ``base + U[-step_level, step_level]`` is returned.
    """
    if episode_level < 0 or step_level < 0:
        raise ValueError("perturbation levels must be non-negative")
    if base is None:
        return 1.0 + rng.uniform(-episode_level, episode_level, size=n_loads)
    return np.asarray(base) + rng.uniform(-step_level, step_level, size=n_loads)


class GridSimulator:
    """Precomputed network matrices and the integration loop for one spec."""

    def __init__(self, spec: MicrogridSpec, config: SimConfig | None = None):
        self.spec = spec
        self.config = config or SimConfig()
        nb, n = spec.n_bus, spec.n_dg
        self.n_bus, self.n_dg = nb, n
        self.dg_bus = spec.dg_bus_indices
        self.y_lines = line_admittance_matrix(spec)
        self.z_coupling = np.array(
            [complex(d.coupling_resistance, d.coupling_reactance) for d in spec.dgs])
        self.y_coupling = 1.0 / self.z_coupling
        self.y_base = self.y_lines.copy()
        self.y_base[self.dg_bus, self.dg_bus] += self.y_coupling

        self.m_p = np.array([d.droop_gain_p for d in spec.dgs])
        self.n_q = np.array([d.droop_gain_q for d in spec.dgs])
        self.omega_c = np.array([d.filter_cutoff for d in spec.dgs])
        self.omega_n = np.array([d.frequency_setpoint for d in spec.dgs])

        n_loads = len(spec.loads)
        self.n_loads = n_loads
        s_nom = np.array([complex(ld.p_nominal, ld.q_nominal) for ld in spec.loads])
        incidence = np.zeros((nb, n_loads))
        for k, ld in enumerate(spec.loads):
            incidence[spec.bus_index(ld.bus), k] = 1.0
        pq_mask = np.array([ld.model == "constant_power" for ld in spec.loads], dtype=float)
        # bus-level load maps: S_bus = map_pq @ scalars, y_shunt = map_z @ scalars
        self._map_pq = incidence * (s_nom * pq_mask)
        self._map_z = incidence * (np.conj(s_nom) * (1.0 - pq_mask))
        self._J = np.empty((2 * nb, 2 * nb))

    # -- algebraic network -------------------------------------------------

    def bus_loads(self, load_scalars):
        scal = np.ones(self.n_loads) if load_scalars is None else np.asarray(load_scalars, float)
        if self.n_loads == 0:
            return np.zeros(self.n_bus, complex), np.zeros(self.n_bus, complex)
        return self._map_pq @ scal, self._map_z @ scal

    def solve(self, e_magnitude, delta, load_scalars=None, v0=None) -> PhasorSolution:
        """Solve the nodal equations for the bus voltages.

        Unknowns are the bus voltages ``V``; the residual per bus is
        ``Y V + conj(S / V) - I_src`` with the DG sources Norton-transformed
        into ``I_src``. Raises PowerflowDiverged on non-convergence or when any
        iterate leaves ``0.01 < |V| < 10``.
        """
        cfg = self.config
        nb = self.n_bus
        s_load, y_shunt = self.bus_loads(load_scalars)
        e = np.asarray(e_magnitude, float) * np.exp(1j * np.asarray(delta, float))
        i_src = np.zeros(nb, complex)
        i_src[self.dg_bus] = e * self.y_coupling
        A = self.y_base.copy()
        A[np.diag_indices(nb)] += y_shunt
        v = np.ones(nb, complex) if v0 is None else np.array(v0, dtype=complex)
        J = self._J
        s_conj = np.conj(s_load)
        diag = np.diag_indices(nb)
        for it in range(cfg.nr_max_iterations + 1):
            mismatch = A @ v + s_conj / np.conj(v) - i_src
            if np.max(np.abs(mismatch)) < cfg.nr_tolerance:
                break
            if it == cfg.nr_max_iterations:
                raise PowerflowDiverged(
                    f"Newton-Raphson did not converge in {cfg.nr_max_iterations} iterations")
            d = -s_conj / np.conj(v) ** 2
            ApD = A.copy()
            ApD[diag] += d
            AmD = A.copy()
            AmD[diag] -= d
            J[:nb, :nb] = ApD.real
            J[:nb, nb:] = -AmD.imag
            J[nb:, :nb] = ApD.imag
            J[nb:, nb:] = AmD.real
            rhs = np.concatenate((mismatch.real, mismatch.imag))
            try:
                step = np.linalg.solve(J, -rhs)
            except np.linalg.LinAlgError as exc:
                raise PowerflowDiverged("singular power-flow Jacobian") from exc
            v = v + step[:nb] + 1j * step[nb:]
            mag = np.abs(v)
            if not np.all(np.isfinite(mag)) or mag.min() <= V_MIN or mag.max() >= V_MAX:
                raise PowerflowDiverged("bus voltage magnitude left the admissible band")
        i_o = (e - v[self.dg_bus]) * self.y_coupling
        i_b = (self.y_lines @ v)[self.dg_bus]
        return PhasorSolution(v, i_o, i_b, e, it)

    # -- dynamics ----------------------------------------------------------

    def e_magnitude(self, state: SimState) -> np.ndarray:
        return state.v_setpoint - self.n_q * state.q_filtered

    def step(self, state: SimState, v_setpoints, load_scalars=None):
        """Advance one control interval; returns ``(new_state, measurements)``."""
        cfg = self.config
        dt = cfg.substep
        delta = state.delta.copy()
        p = state.p_filtered.copy()
        q = state.q_filtered.copy()
        vn = np.asarray(v_setpoints, float).copy()
        v_bus = state.bus_voltage
        for _ in range(cfg.n_substeps):
            e = vn - self.n_q * q
            sol = self.solve(e, delta, load_scalars, v_bus)
            v_bus = sol.bus_voltage
            s = sol.dg_power
            omega = self.omega_n - self.m_p * p
            delta = delta + dt * (omega - omega[0])
            p = p + dt * self.omega_c * (s.real - p)
            q = q + dt * self.omega_c * (s.imag - q)
        new_state = SimState(delta, p, q, vn, v_bus)
        sol = self.solve(vn - self.n_q * q, delta, load_scalars, v_bus)
        new_state.bus_voltage = sol.bus_voltage
        return new_state, self.measurements(new_state, sol)

    def measurements(self, state: SimState, sol: PhasorSolution) -> np.ndarray:
        """Per-DG 9-vector ``(δ, P, Q, i_od, i_oq, i_bd, i_bq, v_bd, v_bq)``."""
        frame = state.delta
        i_od, i_oq = extract_dq(sol.dg_output_current, frame)
        i_bd, i_bq = extract_dq(sol.bus_injection_current, frame)
        v_bd, v_bq = extract_dq(sol.bus_voltage[self.dg_bus], frame)
        return np.column_stack([state.delta, state.p_filtered, state.q_filtered,
                                i_od, i_oq, i_bd, i_bq, v_bd, v_bq])

    def observe(self, state: SimState, load_scalars=None) -> np.ndarray:
        sol = self.solve(self.e_magnitude(state), state.delta, load_scalars, state.bus_voltage)
        return self.measurements(state, sol)

    def equilibrium(self, v_setpoints=None, load_scalars=None, tol: float = 1e-11) -> SimState:
        """Steady state of the droop dynamics for fixed setpoints and loads.

        Solves for the angles (DG 1 is the reference) and reactive powers such
        that every filter is settled and all droop frequencies coincide.
        """
        n = self.n_dg
        vn = np.ones(n) if v_setpoints is None else np.asarray(v_setpoints, float)

        def unpack(z):
            delta = np.concatenate(([0.0], z[: n - 1]))
            return delta, z[n - 1:]

        def residual(z):
            delta, q = unpack(z)
            # Always solve from the flat start: warm-starting from the previous
            # call makes the residual path dependent at round-off level, which
            # spoils the finite-difference Jacobian of the outer solver.
            s = self.solve(vn - self.n_q * q, delta, load_scalars).dg_power
            freq = self.m_p * s.real
            return np.concatenate((freq[1:] - freq[0], s.imag - q))

        z0 = np.zeros(2 * n - 1)
        try:
            res = optimize.root(residual, z0, method="hybr", tol=tol)
        except PowerflowDiverged as exc:
            raise PowerflowDiverged(f"equilibrium search diverged: {exc}") from exc
        if not res.success or np.max(np.abs(res.fun)) > 1e-8:
            raise PowerflowDiverged(f"equilibrium search failed: {res.message}")
        delta, q = unpack(res.x)
        sol = self.solve(vn - self.n_q * q, delta, load_scalars)
        p = sol.dg_power.real
        return SimState(delta, p.copy(), sol.dg_power.imag.copy(), vn.copy(), sol.bus_voltage)

    def initial_state(self, v_setpoints=None) -> SimState:
        n = self.n_dg
        vn = np.ones(n) if v_setpoints is None else np.asarray(v_setpoints, float)
        return SimState(np.zeros(n), np.zeros(n), np.zeros(n), vn.copy(), None)


# Functional entry points --------------------------------------------------

def solve_network(spec: MicrogridSpec, state: SimState, load_scalars=None,
                  config: SimConfig | None = None) -> PhasorSolution:
    sim = GridSimulator(spec, config)
    return sim.solve(sim.e_magnitude(state), state.delta, load_scalars, state.bus_voltage)


def step_control_interval(spec: MicrogridSpec, state: SimState, v_setpoints,
                          load_scalars=None, config: SimConfig | None = None):
    return GridSimulator(spec, config).step(state, v_setpoints, load_scalars)


def with_setpoints(state: SimState, v_setpoints) -> SimState:
    return replace(state.copy(), v_setpoint=np.asarray(v_setpoints, float).copy())
