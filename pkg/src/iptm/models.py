"""Lumped battery, cabin and state-of-charge models.

All rate functions accept scalars or numpy arrays so the same code serves the
plant simulation and the vectorised transcription.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


class DiscriminantNegative(ValueError):
    """Requested battery power exceeds what the equivalent circuit can deliver."""


@dataclass(frozen=True)
class BatteryParams:
    open_circuit_voltage: float  # V
    internal_resistance: float  # ohm
    charge_capacity: float  # C
    thermal_mass: float  # kg
    specific_heat: float  # J/(kg K)
    ambient_exchange_coeff: float  # W/K

    def __post_init__(self):
        for name in ("open_circuit_voltage", "internal_resistance", "charge_capacity",
                     "thermal_mass", "specific_heat", "ambient_exchange_coeff"):
            if not getattr(self, name) > 0:
                raise ValueError(f"battery.{name} must be strictly positive")

    @property
    def heat_capacity(self) -> float:
        """Lumped heat capacity in J/K."""
        return self.thermal_mass * self.specific_heat

    @property
    def max_power(self) -> float:
        """Largest discharge power with a real current, U_oc^2 / (4 R)."""
        return self.open_circuit_voltage**2 / (4.0 * self.internal_resistance)


@dataclass(frozen=True)
class CabinParams:
    thermal_mass: float  # kg
    specific_heat: float  # J/(kg K)
    convection_conductance: float  # W/K
    solar_load: float = 0.0  # W
    ventilation_load: float = 0.0  # W
    metabolic_load_per_occupant: float = 0.0  # W
    occupant_count: int = 0

    def __post_init__(self):
        for name in ("thermal_mass", "specific_heat", "convection_conductance"):
            if not getattr(self, name) > 0:
                raise ValueError(f"cabin.{name} must be strictly positive")
        for name in ("solar_load", "ventilation_load", "metabolic_load_per_occupant"):
            if getattr(self, name) < 0:
                raise ValueError(f"cabin.{name} must be nonnegative")
        if self.occupant_count < 0:
            raise ValueError("cabin.occupant_count must be nonnegative")

    @property
    def heat_capacity(self) -> float:
        return self.thermal_mass * self.specific_heat

    def metabolic_load(self, occupied: bool = True) -> float:
        return self.occupant_count * self.metabolic_load_per_occupant if occupied else 0.0


@dataclass(frozen=True)
class CoolingParams:
    cop: float
    q_total_max: float  # W
    q_bat_max: float | None = None
    q_cab_max: float | None = None

    def __post_init__(self):
        # default split: each circuit may take 83 % of the shared capacity
        if self.q_bat_max is None:
            object.__setattr__(self, "q_bat_max", 0.83 * self.q_total_max)
        if self.q_cab_max is None:
            object.__setattr__(self, "q_cab_max", 0.83 * self.q_total_max)
        if not self.cop > 0:
            raise ValueError("cooling.cop must be strictly positive")
        if not 0 < self.q_bat_max <= self.q_total_max:
            raise ValueError("cooling.q_bat_max must lie in (0, q_total_max]")
        if not 0 < self.q_cab_max <= self.q_total_max:
            raise ValueError("cooling.q_cab_max must lie in (0, q_total_max]")


@dataclass(frozen=True)
class LongitudinalParams:
    mass: float = 2500.0  # kg
    drag_area: float = 2.0  # C_d * A, m^2
    air_density: float = 1.2  # kg/m^3
    rolling_coeff: float = 0.01
    drivetrain_efficiency: float = 0.9
    gravity: float = 9.81


@dataclass(frozen=True)
class VehicleParams:
    battery: BatteryParams
    cabin: CabinParams
    cooling: CoolingParams
    longitudinal: LongitudinalParams = field(default_factory=LongitudinalParams)

    def with_cooling(self, **changes) -> "VehicleParams":
        return replace(self, cooling=replace(self.cooling, **changes))


@dataclass(frozen=True)
class VehicleState:
    soc: float
    t_bat: float  # degC
    t_cab: float  # degC
    clock: float = 0.0  # s

    def __post_init__(self):
        if not 0.0 <= self.soc <= 1.0:
            raise ValueError(f"soc={self.soc} outside [0, 1]")
        if not (np.isfinite(self.t_bat) and np.isfinite(self.t_cab)):
            raise ValueError("temperatures must be finite")
        if self.clock < 0:
            raise ValueError("clock must be nonnegative")

    def as_array(self) -> np.ndarray:
        return np.array([self.soc, self.t_bat, self.t_cab])


@dataclass(frozen=True)
class PowerInputs:
    q_bat_cool: float = 0.0
    q_cab_cool: float = 0.0
    p_charge: float = 0.0
    p_traction: float = 0.0
    p_aux_base: float = 0.0

    def __post_init__(self):
        for name in ("q_bat_cool", "q_cab_cool", "p_charge"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def check_cooling_split(self, cooling: CoolingParams, tol: float = 1e-6) -> None:
        if self.q_bat_cool + self.q_cab_cool > cooling.q_total_max * (1.0 + tol):
            raise ValueError("q_bat_cool + q_cab_cool exceeds q_total_max")


def aux_power(inputs: PowerInputs, cooling: CoolingParams) -> float:
    """Auxiliary load: fixed base plus the electrical draw of both coolers."""
    return inputs.p_aux_base + (inputs.q_bat_cool + inputs.q_cab_cool) / cooling.cop


def battery_power(inputs: PowerInputs, cooling: CoolingParams, charging: bool) -> float:
    """Net battery power; positive discharges, negative charges."""
    if charging:
        return -inputs.p_charge + aux_power(inputs, cooling)
    return inputs.p_traction + aux_power(inputs, cooling)


def _discriminant(p_bat, bp: BatteryParams):
    disc = bp.open_circuit_voltage**2 - 4.0 * bp.internal_resistance * np.asarray(p_bat, dtype=float)
    if np.any(disc < 0):
        raise DiscriminantNegative(
            f"battery power {np.max(p_bat):.6g} W exceeds deliverable limit {bp.max_power:.6g} W"
        )
    return disc


def battery_current(p_bat, bp: BatteryParams):
    """Terminal current from the internal-resistance circuit, amperes."""
    disc = _discriminant(p_bat, bp)
    current = (bp.open_circuit_voltage - np.sqrt(disc)) / (2.0 * bp.internal_resistance)
    return current if np.ndim(current) else float(current)


def soc_rate(p_bat, bp: BatteryParams):
    return -battery_current(p_bat, bp) / bp.charge_capacity


def battery_heat_gen(i_bat, bp: BatteryParams):
    return np.square(i_bat) * bp.internal_resistance


def battery_ambient_exchange(t_bat, t_amb, bp: BatteryParams):
    """Heat flowing from ambient into the pack, W."""
    return bp.ambient_exchange_coeff * (np.subtract(t_amb, t_bat))


def battery_temp_rate(t_bat, q_gen, q_amb, q_cool, bp: BatteryParams):
    # q_amb is an inflow, hence the plus sign
    return (np.add(q_gen, q_amb) - q_cool) / bp.heat_capacity


def cabin_temp_rate(t_cab, t_amb, q_cool, cp: CabinParams, occupied: bool = True):
    q_cov = cp.convection_conductance * np.subtract(t_amb, t_cab)
    load = cp.solar_load + q_cov + cp.ventilation_load + cp.metabolic_load(occupied)
    rate = (load - np.asarray(q_cool, dtype=float)) / cp.heat_capacity
    return rate if np.ndim(rate) else float(rate)


def state_rates(state: VehicleState, inputs: PowerInputs, params: VehicleParams,
                t_amb: float, charging: bool = False) -> tuple[float, float, float]:
    """(dSOC/dt, dT_bat/dt, dT_cab/dt) at the given state and inputs."""
    bp = params.battery
    p_bat = battery_power(inputs, params.cooling, charging)
    i_bat = battery_current(p_bat, bp)
    d_soc = -i_bat / bp.charge_capacity
    d_bat = battery_temp_rate(
        state.t_bat,
        battery_heat_gen(i_bat, bp),
        battery_ambient_exchange(state.t_bat, t_amb, bp),
        inputs.q_bat_cool,
        bp,
    )
    # occupants leave the vehicle while it charges
    d_cab = cabin_temp_rate(state.t_cab, t_amb, inputs.q_cab_cool, params.cabin, occupied=not charging)
    return float(d_soc), float(d_bat), float(d_cab)


def euler_step(state: VehicleState, inputs: PowerInputs, dt: float, params: VehicleParams,
               t_amb: float, charging: bool = False) -> VehicleState:
    """One forward-Euler step of all three states; the clock advances by ``dt``."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    d_soc, d_bat, d_cab = state_rates(state, inputs, params, t_amb, charging)
    soc = min(max(state.soc + d_soc * dt, 0.0), 1.0)
    return VehicleState(
        soc=soc,
        t_bat=state.t_bat + d_bat * dt,
        t_cab=state.t_cab + d_cab * dt,
        clock=state.clock + dt,
    )
