"""Scenario files, drive cycles, case presets and alpha calibration."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
try:
    import tomllib as tomli
except ModuleNotFoundError:  # Python < 3.11
    import tomli
import tomli_w

from .models import (BatteryParams, CabinParams, CoolingParams, LongitudinalParams, VehicleParams,
                     VehicleState)
from .mpc import (ClosedLoopResult, MpcConfig, PreviewKind, PreviewModel, ScheduleKind,
                  WeightSchedule, run_closed_loop)
from .solver import SolverOptions
from .transcription import Limits, ProblemParams

SCHEMA_VERSION = 1
DATA_DIR = Path(__file__).parent / "data"
NOMINAL_SCENARIO = DATA_DIR / "nominal.toml"


class ParseError(ValueError):
    """A scenario or drive-cycle file could not be parsed."""


class ValidationError(ValueError):
    """A parsed scenario breaks an invariant; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class BracketFailure(RuntimeError):
    """No alpha in the search bracket reaches the requested charging time."""


# ----------------------------------------------------------------- traction
def traction_power(speed, accel, vp: LongitudinalParams):
    """Wheel power demand drawn from the battery; braking is clipped to zero."""
    speed = np.asarray(speed, dtype=float)
    if np.any(speed < 0):
        raise ValueError("speed must be nonnegative")
    force = (0.5 * vp.air_density * vp.drag_area * speed**2
             + vp.rolling_coeff * vp.mass * vp.gravity + vp.mass * np.asarray(accel, dtype=float))
    power = np.maximum(0.0, force * speed / vp.drivetrain_efficiency)
    return power if power.ndim else float(power)


@dataclass(frozen=True)
class DriveCycle:
    time: tuple[float, ...] = ()
    speed: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "time", tuple(float(t) for t in self.time))
        object.__setattr__(self, "speed", tuple(float(v) for v in self.speed))
        if len(self.time) != len(self.speed):
            raise ValidationError("route.drive_cycle", "time and speed columns differ in length")
        if len(self.time) == 1:
            raise ValidationError("route.drive_cycle", "a drive cycle needs at least two points")
        if np.any(np.diff(self.time) <= 0):
            raise ValidationError("route.drive_cycle", "time must be strictly increasing")
        if any(v < 0 for v in self.speed):
            raise ValidationError("route.drive_cycle", "speed must be nonnegative")

    @property
    def duration(self) -> float:
        return self.time[-1] - self.time[0] if self.time else 0.0

    @classmethod
    def from_csv(cls, path) -> "DriveCycle":
        """Read a ``time_s, speed_mps`` CSV (header required)."""
        try:
            with open(path, newline="") as fh:
                rows = list(csv.reader(fh))
        except OSError as exc:
            raise ParseError(f"cannot read drive cycle {path}: {exc}") from exc
        if not rows or [c.strip() for c in rows[0]] != ["time_s", "speed_mps"]:
            raise ParseError(f"{path}: header must be 'time_s,speed_mps'")
        try:
            data = [(float(r[0]), float(r[1])) for r in rows[1:] if r]
        except (ValueError, IndexError) as exc:
            raise ParseError(f"{path}: {exc}") from exc
        return cls(tuple(t for t, _ in data), tuple(v for _, v in data))

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        buf.write("time_s,speed_mps\n")
        for t, v in zip(self.time, self.speed):
            buf.write(f"{t!r},{v!r}\n")
        if path is not None:
            Path(path).write_text(buf.getvalue())
        return buf.getvalue()


class TractionProfile:
    """Piecewise-constant traction power built from a drive cycle.

    On each cycle interval the power uses the mean speed and the constant
    acceleration of that interval; outside the cycle it is zero.
    """

    def __init__(self, cycle: DriveCycle, vp: LongitudinalParams, offset: float = 0.0):
        t = np.asarray(cycle.time, dtype=float)
        v = np.asarray(cycle.speed, dtype=float)
        if t.size:
            self.edges = t - t[0] + offset
            accel = np.diff(v) / np.diff(t)
            self.power = np.asarray(traction_power(0.5 * (v[1:] + v[:-1]), accel, vp))
        else:
            self.edges = np.array([offset])
            self.power = np.zeros(0)
        self._cum = np.r_[0.0, np.cumsum(self.power * np.diff(self.edges))]

    @property
    def end(self) -> float:
        return float(self.edges[-1])

    def power_at(self, clock: float) -> float:
        k = np.searchsorted(self.edges, clock, side="right") - 1
        if k < 0 or k >= self.power.size:
            return 0.0
        return float(self.power[k])

    def _energy_to(self, t: float) -> float:
        t = min(max(t, self.edges[0]), self.edges[-1])
        k = min(np.searchsorted(self.edges, t, side="right") - 1, self.power.size - 1)
        if k < 0:
            return 0.0
        return float(self._cum[k] + self.power[k] * (t - self.edges[k]))

    def mean(self, t0: float, t1: float) -> float:
        if not t1 > t0:
            return 0.0
        return (self._energy_to(t1) - self._energy_to(t0)) / (t1 - t0)


def synthetic_urban_cycle(duration: float = 900.0, peak: float = 16.0, dt: float = 1.0) -> DriveCycle:
    """Repeated accelerate-cruise-brake-stop blocks of 150 s each."""
    accel_t, cruise_t, brake_t, stop_t = 30.0, 60.0, 40.0, 20.0
    block = accel_t + cruise_t + brake_t + stop_t
    t = np.arange(0.0, duration + 0.5 * dt, dt)
    tau = np.mod(t, block)
    v = np.where(tau < accel_t, peak * tau / accel_t,
        np.where(tau < accel_t + cruise_t, peak,
        np.where(tau < accel_t + cruise_t + brake_t, peak * (1 - (tau - accel_t - cruise_t) / brake_t), 0.0)))
    # finish at rest
    v[-1] = 0.0
    return DriveCycle(tuple(np.round(t, 9)), tuple(np.round(v, 9)))


# ----------------------------------------------------------------- presets
CASE_IDS = ("I", "IIa", "IIb", "IIc", "III")


@dataclass(frozen=True)
class CasePreset:
    case_id: str
    preview: PreviewKind
    schedule: WeightSchedule
    hard_budget: bool = False


def case_preset(case_id: str, soc_anchor: float = 0.3, soc_targ: float = 0.6) -> CasePreset:
    """The weight/preview pairing of one case study."""
    if case_id == "I":
        return CasePreset("I", PreviewKind.ACCURATE,
                          WeightSchedule(ScheduleKind.CONSTANT, beta1=1e11, beta2_const=1e10),
                          hard_budget=True)
    beta2 = {"IIa": 1e10, "IIb": 1e5, "IIc": 1e3}
    if case_id in beta2:
        return CasePreset(case_id, PreviewKind.NO_CHARGE,
                          WeightSchedule(ScheduleKind.CONSTANT, beta1=1e11, beta2_const=beta2[case_id]))
    if case_id == "III":
        return CasePreset("III", PreviewKind.NO_CHARGE,
                          WeightSchedule(ScheduleKind.SOC_AWARE, beta1=1e11, beta2_const=1e10,
                                         beta0=10.0, b=10.0, soc_min=soc_anchor, soc_targ=soc_targ))
    raise ValueError(f"unknown case {case_id!r}; expected one of {', '.join(CASE_IDS)}")


# ----------------------------------------------------------------- scenario
@dataclass(frozen=True)
class ControllerSettings:
    dt1: float = 30.0
    n2: int = 20
    dt2_max: float = 180.0
    control_period_drive: float = 30.0
    control_period_charge: float = 10.0
    plant_dt: float = 1.0
    safety_horizon: float = 4 * 3600.0
    t_bat_backoff: float = 0.05
    t_cab_backoff: float = 0.2
    kkt_tol: float = 1e-4
    feas_tol: float = 1e-5
    max_outer_iters: int = 40
    max_inner_iters: int = 200


@dataclass(frozen=True)
class Scenario:
    vehicle: VehicleParams
    initial: VehicleState
    name: str = "scenario"
    case: str = "I"
    ambient_temp: float = 38.0
    p_aux_base: float = 500.0
    soc_targ: float = 0.6
    budget_t_chg: float = 1800.0
    alpha: float = 1e-2
    limits: Limits = field(default_factory=Limits)
    drive_cycle: DriveCycle = field(default_factory=DriveCycle)
    drive_cycle_file: str | None = None
    waiting_time: float = 0.0
    controller: ControllerSettings = field(default_factory=ControllerSettings)

    def __post_init__(self):
        validate(self)

    @property
    def drive_end(self) -> float:
        return self.drive_cycle.duration

    @property
    def arrival_time(self) -> float:
        return self.drive_end + self.waiting_time

    def problem_params(self) -> ProblemParams:
        return ProblemParams(self.vehicle, t_amb=self.ambient_temp, p_aux_base=self.p_aux_base,
                             limits=self.limits)

    def preset(self, case_id: str | None = None) -> CasePreset:
        return case_preset(case_id or self.case, soc_anchor=self.initial.soc, soc_targ=self.soc_targ)

    def preview(self, case_id: str | None = None) -> PreviewModel:
        traction = TractionProfile(self.drive_cycle, self.vehicle.longitudinal)
        return PreviewModel(self.preset(case_id).preview, self.arrival_time, traction, self.drive_end)

    def mpc_config(self, case_id: str | None = None, *, hard_budget: bool | None = None,
                   alpha: float | None = None, plant_dt: float | None = None, trace=None) -> MpcConfig:
        c = self.controller
        preset = self.preset(case_id)
        use_budget = preset.hard_budget if hard_budget is None else hard_budget
        return MpcConfig(
            problem=self.problem_params(),
            alpha=self.alpha if alpha is None else alpha,
            soc_targ=self.soc_targ,
            budget_t_chg=self.budget_t_chg if use_budget else None,
            dt1=c.dt1, n2=c.n2, dt2_max=c.dt2_max,
            control_period_drive=c.control_period_drive, control_period_charge=c.control_period_charge,
            plant_dt=c.plant_dt if plant_dt is None else plant_dt,
            safety_horizon=c.safety_horizon, t_bat_backoff=c.t_bat_backoff, t_cab_backoff=c.t_cab_backoff,
            solver=SolverOptions(kkt_tol=c.kkt_tol, feas_tol=c.feas_tol, max_outer_iters=c.max_outer_iters,
                                 max_inner_iters=c.max_inner_iters, trace=trace),
        )


def validate(sc: Scenario) -> None:
    lim = sc.limits
    for lo, hi, name in ((lim.soc_min, lim.soc_max, "limits.soc"),
                         (lim.t_bat_min, lim.t_bat_max, "limits.t_bat"),
                         (lim.t_cab_min, lim.t_cab_max, "limits.t_cab")):
        if not lo < hi:
            raise ValidationError(f"{name}_min/{name}_max", f"lower bound {lo} must be below upper bound {hi}")
    if not lim.p_chg_max > 0:
        raise ValidationError("limits.p_chg_max_w", "must be positive")
    if not lim.soc_min <= sc.soc_targ <= lim.soc_max:
        raise ValidationError("targets.soc_targ", "must lie within [soc_min, soc_max]")
    if not sc.initial.soc < sc.soc_targ:
        raise ValidationError("initial.soc", "must be below the target SOC for a charging scenario")
    if not sc.budget_t_chg > 0:
        raise ValidationError("targets.budget_t_chg_s", "must be positive")
    if sc.alpha < 0:
        raise ValidationError("targets.alpha", "must be nonnegative")
    if sc.waiting_time < 0:
        raise ValidationError("route.waiting_time_s", "must be nonnegative")
    if sc.p_aux_base < 0:
        raise ValidationError("environment.p_aux_base_w", "must be nonnegative")
    if sc.case not in CASE_IDS:
        raise ValidationError("case", f"unknown case {sc.case!r}")
    c = sc.controller
    for name in ("dt1", "dt2_max", "control_period_drive", "control_period_charge", "plant_dt",
                 "safety_horizon", "kkt_tol", "feas_tol"):
        if not getattr(c, name) > 0:
            raise ValidationError(f"controller.{name}", "must be positive")
    if c.n2 < 1:
        raise ValidationError("controller.n2", "must be at least 1")
    p_peak = lim.p_chg_max + sc.vehicle.cooling.q_total_max / sc.vehicle.cooling.cop
    if sc.vehicle.battery.max_power < p_peak:
        raise ValidationError("battery", "U_oc^2/(4 R_int) is below the configured power envelope")


# TOML table name -> (dataclass, {toml key: attribute})
_PARAM_TABLES = {
    "battery": (BatteryParams, {
        "open_circuit_voltage_v": "open_circuit_voltage", "internal_resistance_ohm": "internal_resistance",
        "charge_capacity_c": "charge_capacity", "thermal_mass_kg": "thermal_mass",
        "specific_heat_j_per_kg_k": "specific_heat", "ambient_exchange_w_per_k": "ambient_exchange_coeff"}),
    "cabin": (CabinParams, {
        "thermal_mass_kg": "thermal_mass", "specific_heat_j_per_kg_k": "specific_heat",
        "convection_conductance_w_per_k": "convection_conductance", "solar_load_w": "solar_load",
        "ventilation_load_w": "ventilation_load", "metabolic_load_per_occupant_w": "metabolic_load_per_occupant",
        "occupant_count": "occupant_count"}),
    "cooling": (CoolingParams, {
        "cop": "cop", "q_total_max_w": "q_total_max", "q_bat_max_w": "q_bat_max", "q_cab_max_w": "q_cab_max"}),
    "longitudinal": (LongitudinalParams, {
        "mass_kg": "mass", "drag_area_m2": "drag_area", "air_density_kg_m3": "air_density",
        "rolling_coeff": "rolling_coeff", "drivetrain_efficiency": "drivetrain_efficiency",
        "gravity_m_s2": "gravity"}),
}
_LIMIT_KEYS = {"soc_min": "soc_min", "soc_max": "soc_max", "t_bat_min_c": "t_bat_min",
               "t_bat_max_c": "t_bat_max", "t_cab_min_c": "t_cab_min", "t_cab_max_c": "t_cab_max",
               "p_chg_max_w": "p_chg_max"}
_CONTROLLER_KEYS = {f"{f.name}": f.name for f in fields(ControllerSettings)}


def _table(doc: dict, name: str, required: bool = True) -> dict:
    tab = doc.get(name)
    if tab is None:
        if required:
            raise ValidationError(name, "missing table")
        return {}
    if not isinstance(tab, dict):
        raise ValidationError(name, "must be a table")
    return tab


def _number(tab: dict, key: str, where: str, default=None, integer: bool = False):
    if key not in tab:
        if default is None:
            raise ValidationError(f"{where}.{key}", "missing value")
        return default
    val = tab[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ValidationError(f"{where}.{key}", f"expected a number, got {val!r}")
    if integer:
        if int(val) != val:
            raise ValidationError(f"{where}.{key}", "expected an integer")
        return int(val)
    if not math.isfinite(val):
        raise ValidationError(f"{where}.{key}", "must be finite")
    return float(val)


def _unknown(tab: dict, known, where: str) -> None:
    extra = sorted(set(tab) - set(known))
    if extra:
        raise ValidationError(f"{where}.{extra[0]}", "unknown key")


def _params_from(doc: dict, name: str):
    cls, keys = _PARAM_TABLES[name]
    tab = _table(doc, name, required=name != "longitudinal")
    _unknown(tab, keys, name)
    kwargs = {}
    for key, attr in keys.items():
        if key in tab:
            kwargs[attr] = _number(tab, key, name, integer=(attr == "occupant_count"))
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValidationError(name, f"missing parameter ({exc})") from exc
    except ValueError as exc:
        raise ValidationError(name, str(exc)) from exc


def scenario_from_dict(doc: dict, base_dir: Path | None = None) -> Scenario:
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValidationError("schema_version", f"expected {SCHEMA_VERSION}, got {version!r}")
    _unknown(doc, {"schema_version", "name", "case", "environment", "initial", "targets", "limits",
                   "route", "controller", *_PARAM_TABLES}, "scenario")
    veh = VehicleParams(*(_params_from(doc, n) for n in ("battery", "cabin", "cooling", "longitudinal")))

    env = _table(doc, "environment")
    _unknown(env, {"ambient_temp_c", "p_aux_base_w"}, "environment")
    init = _table(doc, "initial")
    _unknown(init, {"soc", "t_bat_c", "t_cab_c"}, "initial")
    try:
        initial = VehicleState(_number(init, "soc", "initial"), _number(init, "t_bat_c", "initial"),
                               _number(init, "t_cab_c", "initial"))
    except ValueError as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError("initial", str(exc)) from exc
    tg = _table(doc, "targets")
    _unknown(tg, {"soc_targ", "budget_t_chg_s", "alpha"}, "targets")
    lim_tab = _table(doc, "limits", required=False)
    _unknown(lim_tab, _LIMIT_KEYS, "limits")
    limits = Limits(**{attr: _number(lim_tab, key, "limits", default=getattr(Limits(), attr))
                       for key, attr in _LIMIT_KEYS.items()})

    route = _table(doc, "route", required=False)
    _unknown(route, {"drive_cycle", "time_s", "speed_mps", "waiting_time_s"}, "route")
    cycle_file = route.get("drive_cycle")
    if cycle_file is not None:
        path = Path(cycle_file)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        cycle = DriveCycle.from_csv(path)
        cycle_file = str(path.resolve())
    else:
        cycle = DriveCycle(tuple(route.get("time_s", ())), tuple(route.get("speed_mps", ())))

    ctl_tab = _table(doc, "controller", required=False)
    _unknown(ctl_tab, _CONTROLLER_KEYS, "controller")
    defaults = ControllerSettings()
    ctl = ControllerSettings(**{
        name: _number(ctl_tab, name, "controller", default=getattr(defaults, name),
                      integer=isinstance(getattr(defaults, name), int))
        for name in _CONTROLLER_KEYS})

    return Scenario(
        vehicle=veh, initial=initial,
        name=str(doc.get("name", "scenario")), case=str(doc.get("case", "I")),
        ambient_temp=_number(env, "ambient_temp_c", "environment", default=38.0),
        p_aux_base=_number(env, "p_aux_base_w", "environment", default=500.0),
        soc_targ=_number(tg, "soc_targ", "targets", default=0.6),
        budget_t_chg=_number(tg, "budget_t_chg_s", "targets", default=1800.0),
        alpha=_number(tg, "alpha", "targets", default=1e-2),
        limits=limits, drive_cycle=cycle, drive_cycle_file=cycle_file,
        waiting_time=_number(route, "waiting_time_s", "route", default=0.0),
        controller=ctl,
    )


def load_scenario(path) -> Scenario:
    """Parse and validate a scenario TOML file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read scenario {path}: {exc}") from exc
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return scenario_from_dict(doc, base_dir=path.parent)


def scenario_to_dict(sc: Scenario, drive_cycle_ref: str | None = None) -> dict:
    doc: dict = {"schema_version": SCHEMA_VERSION, "name": sc.name, "case": sc.case,
                 "environment": {"ambient_temp_c": sc.ambient_temp, "p_aux_base_w": sc.p_aux_base},
                 "initial": {"soc": sc.initial.soc, "t_bat_c": sc.initial.t_bat, "t_cab_c": sc.initial.t_cab},
                 "targets": {"soc_targ": sc.soc_targ, "budget_t_chg_s": sc.budget_t_chg, "alpha": sc.alpha},
                 "limits": {key: getattr(sc.limits, attr) for key, attr in _LIMIT_KEYS.items()}}
    route: dict = {"waiting_time_s": sc.waiting_time}
    if drive_cycle_ref is not None:
        route["drive_cycle"] = drive_cycle_ref
    else:
        route["time_s"] = list(sc.drive_cycle.time)
        route["speed_mps"] = list(sc.drive_cycle.speed)
    doc["route"] = route
    doc["controller"] = {name: getattr(sc.controller, name) for name in _CONTROLLER_KEYS}
    for name, (_, keys) in _PARAM_TABLES.items():
        obj = getattr(sc.vehicle, name)
        doc[name] = {key: getattr(obj, attr) for key, attr in keys.items()}
    return doc


def save_scenario(sc: Scenario, path) -> None:
    """Write ``sc`` as TOML; a file-backed drive cycle is referenced relative to ``path``."""
    path = Path(path)
    ref = None
    if sc.drive_cycle_file is not None:
        src = Path(sc.drive_cycle_file)
        if src.is_absolute() and src.exists():
            ref = os.path.relpath(src, path.parent)
    with open(path, "wb") as fh:
        tomli_w.dump(scenario_to_dict(sc, ref), fh)


def load_nominal() -> Scenario:
    return load_scenario(NOMINAL_SCENARIO)


# ----------------------------------------------------------------- running
def run_case(sc: Scenario, case_id: str | None = None, **overrides) -> ClosedLoopResult:
    """Closed-loop run of one case preset on ``sc``."""
    preset = sc.preset(case_id)
    cfg = sc.mpc_config(case_id, **overrides)
    return run_closed_loop(sc.initial, sc.preview(case_id), preset.schedule, cfg)


def calibrate_alpha(sc: Scenario, target_t_chg: float, *, bracket: tuple[float, float] = (1e4, 1e6),
                    rtol: float = 0.01, max_iter: int = 30, case_id: str = "I",
                    hard_budget: bool = False, history: list | None = None) -> float:
    """Log-space bisection on alpha until the closed-loop charging time is within ``rtol``.

    The charging time shrinks as alpha grows.  The hard budget is off by
    default so that only alpha shapes the result.
    """
    lo, hi = (math.log10(b) for b in bracket)
    if not lo < hi:
        raise ValueError("bracket must be increasing")

    def t_chg(log_alpha: float) -> float:
        res = run_case(sc, case_id, alpha=10.0**log_alpha, hard_budget=hard_budget)
        val = math.inf if res.metrics.t_chg is None else res.metrics.t_chg * 60.0
        if history is not None:
            history.append((10.0**log_alpha, val))
        return val

    def close(t: float) -> bool:
        return abs(t - target_t_chg) <= rtol * target_t_chg

    mid = 0.5 * (lo + hi)
    t_mid = t_chg(mid)
    if close(t_mid):
        return 10.0**mid
    t_hi = t_chg(hi)
    if close(t_hi):
        return 10.0**hi
    if t_hi > target_t_chg:
        raise BracketFailure(f"even alpha={10.0**hi:g} gives t_chg={t_hi:.1f} s > {target_t_chg:.1f} s")
    if t_mid < target_t_chg:
        t_lo = t_chg(lo)
        if close(t_lo):
            return 10.0**lo
        if t_lo < target_t_chg:
            raise BracketFailure(f"even alpha={10.0**lo:g} gives t_chg={t_lo:.1f} s < {target_t_chg:.1f} s")
        hi = mid
    else:
        lo = mid
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        t = t_chg(mid)
        if close(t):
            return 10.0**mid
        if t > target_t_chg:
            lo = mid
        else:
            hi = mid
    raise BracketFailure(f"no alpha within {max_iter} bisection steps met the target")


def persist_alpha(path, alpha: float) -> None:
    """Rewrite the ``targets.alpha`` entry of a scenario file in place."""
    path = Path(path)
    doc = tomli.loads(path.read_text())
    doc["targets"]["alpha"] = float(alpha)
    scenario_from_dict(doc, base_dir=path.parent)
    with open(path, "wb") as fh:
        tomli_w.dump(doc, fh)
