"""Shrinking-horizon MPC with non-uniform sampling and closed-loop simulation.

Each re-plan transcribes the remaining driving time on a fixed ``dt1`` grid
and, when the charging event is previewed, ``n2`` charging samples of free
length.  The first control of the solution is held on the plant for one
control period, then the problem is rebuilt and warm started.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Protocol

import numpy as np

from .models import PowerInputs, VehicleParams, VehicleState
from .plant import LogSample, Metrics, TrajectoryLog, compute_metrics, simulate_interval
from .solver import (DimensionMismatch, Solution, SolverOptions, Status, shift_multipliers,
                     shifted_start, solve)
from .transcription import HorizonSpec, Limits, NlpProblem, ProblemParams, Weights, build_nlp, initial_guess

log = logging.getLogger(__name__)


class WrongScheduleKind(ValueError):
    """An SOC-dependent weight was requested from a constant schedule."""


class PlanningError(RuntimeError):
    """The optimizer failed in a way the closed loop cannot recover from."""


class TractionSource(Protocol):
    def power_at(self, clock: float) -> float: ...

    def mean(self, t0: float, t1: float) -> float: ...


class _NoTraction:
    def power_at(self, clock: float) -> float:
        return 0.0

    def mean(self, t0: float, t1: float) -> float:
        return 0.0


class PreviewKind(str, enum.Enum):
    ACCURATE = "accurate"
    NO_CHARGE = "no_charge"


@dataclass(frozen=True)
class PreviewModel:
    """What the controller knows about the route ahead.

    ``drive_end`` is when the vehicle reaches the charger; it then waits with
    zero traction until ``arrival_time``, when charging can begin.
    """

    kind: PreviewKind
    arrival_time: float
    traction: TractionSource = field(default_factory=_NoTraction)
    drive_end: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", PreviewKind(self.kind))
        if self.arrival_time < 0:
            raise ValueError("arrival_time must be nonnegative")
        if self.drive_end is None:
            object.__setattr__(self, "drive_end", self.arrival_time)
        if not 0 <= self.drive_end <= self.arrival_time:
            raise ValueError("drive_end must lie in [0, arrival_time]")

    def phase_at(self, clock: float) -> str:
        if clock < self.drive_end:
            return "driving"
        if clock < self.arrival_time:
            return "waiting"
        return "charging"

    def traction_at(self, clock: float) -> float:
        return self.traction.power_at(clock) if clock < self.drive_end else 0.0


class ScheduleKind(str, enum.Enum):
    CONSTANT = "constant"
    SOC_AWARE = "soc_aware"


@dataclass(frozen=True)
class WeightSchedule:
    kind: ScheduleKind = ScheduleKind.CONSTANT
    beta1: float = 1e11
    beta2_const: float = 1e10
    beta0: float = 10.0
    b: float = 10.0
    soc_min: float = 0.3
    soc_targ: float = 0.6

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if self.beta1 < 0 or self.beta2_const < 0:
            raise ValueError("weights must be nonnegative")
        if self.kind is ScheduleKind.SOC_AWARE:
            if not self.beta0 > 0:
                raise ValueError("beta0 must be positive")
            if not self.soc_targ > self.soc_min:
                raise ValueError("soc_targ must exceed soc_min")

    def beta2(self, soc: float, charging: bool) -> float:
        """Cabin slack weight in force at the given SOC.

        The SOC-aware law only acts once charging has begun; before that the
        constant weight applies.
        """
        if self.kind is ScheduleKind.SOC_AWARE and charging:
            return beta2_of_soc(soc, self)
        return self.beta2_const


def beta2_of_soc(soc: float, ws: WeightSchedule) -> float:
    """``beta0 * 10**(b * s)`` with ``s`` the clamped progress from soc_min to soc_targ."""
    if ws.kind is not ScheduleKind.SOC_AWARE:
        raise WrongScheduleKind("beta2_of_soc needs an SOC-aware schedule")
    soc = min(max(soc, ws.soc_min), ws.soc_targ)
    return ws.beta0 * 10.0 ** (ws.b * (soc - ws.soc_min) / (ws.soc_targ - ws.soc_min))


@dataclass(frozen=True)
class MpcConfig:
    problem: ProblemParams
    alpha: float = 1e-2
    soc_targ: float = 0.6
    budget_t_chg: float | None = None  # hard bound on the charging time, s
    dt1: float = 30.0
    n2: int = 20
    dt2_max: float = 180.0
    control_period_drive: float = 30.0
    control_period_charge: float = 10.0
    plant_dt: float = 1.0
    safety_horizon: float = 4 * 3600.0
    t_bat_backoff: float = 0.05
    t_cab_backoff: float = 0.05
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        for name in ("dt1", "dt2_max", "control_period_drive", "control_period_charge",
                     "plant_dt", "safety_horizon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.n2 < 1:
            raise ValueError("n2 must be at least 1")
        if self.t_bat_backoff < 0 or self.t_cab_backoff < 0:
            raise ValueError("back-off margins must be nonnegative")

    @property
    def vehicle(self) -> VehicleParams:
        return self.problem.vehicle

    def controller_params(self) -> ProblemParams:
        """Problem parameters with the temperature ceilings tightened by the back-offs."""
        lim = self.problem.limits
        return replace(self.problem, limits=replace(
            lim, t_bat_max=lim.t_bat_max - self.t_bat_backoff,
            t_cab_max=lim.t_cab_max - self.t_cab_backoff))


def make_horizon(clock: float, preview: PreviewModel, cfg: MpcConfig) -> HorizonSpec:
    """Horizon for a re-plan at ``clock``.

    Before arrival the driving phase covers the remaining time on the ``dt1``
    grid (waiting contributes zero traction); from arrival on only the
    charging phase remains.
    """
    remaining = preview.arrival_time - clock
    if remaining > 0:
        n1 = math.ceil(remaining / cfg.dt1 - 1e-9)
        edges = clock + cfg.dt1 * np.arange(n1 + 1)
        ends = np.minimum(edges, preview.drive_end)
        trac = []
        for a, b in zip(ends[:-1], ends[1:]):
            trac.append(preview.traction.mean(a, b) * (b - a) / cfg.dt1 if b > a else 0.0)
        charging = preview.kind is PreviewKind.ACCURATE
    else:
        n1, trac, charging = 0, [], True
    return HorizonSpec(n1=n1, dt1=cfg.dt1, n2=cfg.n2, dt2_max=cfg.dt2_max,
                       traction_preview=tuple(trac), soc_targ=cfg.soc_targ,
                       charging_in_horizon=charging)


class Plan(NamedTuple):
    inputs: PowerInputs
    predicted_t_chg: float | None
    solution: Solution
    nlp: NlpProblem
    clock: float


def _cold_guess(nlp: NlpProblem, state: VehicleState, cfg: MpcConfig, budget: float | None) -> np.ndarray:
    if not nlp.spec.n_charge:
        return initial_guess(nlp)
    if budget is None:
        bp = cfg.vehicle.battery
        energy = max(cfg.soc_targ - state.soc, 0.0) * bp.charge_capacity * bp.open_circuit_voltage
        budget = energy / (0.5 * cfg.problem.limits.p_chg_max)
    total = float(np.clip(budget, 1.0, 0.9 * nlp.spec.n2 * nlp.spec.dt2_max))
    return initial_guess(nlp, total)


def _weights(state: VehicleState, clock: float, preview: PreviewModel, schedule: WeightSchedule,
             cfg: MpcConfig, spec: HorizonSpec) -> Weights:
    charging_now = clock >= preview.arrival_time
    budget = None
    if cfg.budget_t_chg is not None and spec.n_charge:
        # whatever part of the budget is still unused
        used = max(0.0, clock - preview.arrival_time)
        budget = cfg.budget_t_chg - used
        if budget < 0.5 * cfg.plant_dt:
            budget = None
    return Weights(alpha=cfg.alpha, beta1=schedule.beta1,
                   beta2=schedule.beta2(state.soc, charging_now), budget_t_chg=budget)


def _dispense(nlp: NlpProblem, z: np.ndarray, cfg: MpcConfig) -> PowerInputs:
    """First-sample controls, projected onto the actuator limits."""
    cool = cfg.vehicle.cooling
    qb = float(np.clip(nlp.part(z, "q_bat")[0], 0.0, cool.q_bat_max))
    qc = float(np.clip(nlp.part(z, "q_cab")[0], 0.0, cool.q_cab_max))
    total = qb + qc
    if total > cool.q_total_max:
        qb, qc = qb * cool.q_total_max / total, qc * cool.q_total_max / total
    p_chg, p_trac = 0.0, 0.0
    if nlp.spec.n1 == 0 and nlp.spec.n_charge:
        p_chg = float(np.clip(nlp.part(z, "p_chg")[0], 0.0, cfg.problem.limits.p_chg_max))
    elif nlp.spec.n1:
        p_trac = nlp.spec.traction_preview[0]
    return PowerInputs(q_bat_cool=qb, q_cab_cool=qc, p_charge=p_chg, p_traction=p_trac,
                       p_aux_base=cfg.problem.p_aux_base)


def plan(state: VehicleState, clock: float, preview: PreviewModel, schedule: WeightSchedule,
         cfg: MpcConfig, warm: Plan | None = None) -> Plan:
    """Solve one horizon from ``state`` and return its first-step controls."""
    spec = make_horizon(clock, preview, cfg)
    weights = _weights(state, clock, preview, schedule, cfg, spec)
    x0 = replace(state, clock=clock)
    nlp = build_nlp(spec, x0, cfg.controller_params(), weights)

    multipliers = None
    if spec.n_charge and state.soc >= cfg.soc_targ:
        z0 = nlp.rollout(np.where(np.isfinite(nlp.lower), nlp.lower, 0.0))
        sol = solve(nlp, z0, replace(cfg.solver, max_outer_iters=1))
        return Plan(_dispense(nlp, z0, cfg), 0.0, sol, nlp, clock)
    z0 = None
    if warm is not None:
        try:
            z0, sample_map = shifted_start(warm.solution, warm.nlp, nlp, clock - warm.clock)
            multipliers = shift_multipliers(warm.solution, warm.nlp, nlp, sample_map)
        except (DimensionMismatch, ValueError) as exc:
            log.debug("warm start skipped at t=%.1f: %s", clock, exc)
            z0 = None
    if z0 is None:
        z0 = _cold_guess(nlp, state, cfg, weights.budget_t_chg)
    sol = solve(nlp, z0, cfg.solver, multipliers=multipliers,
                warm=warm.solution if (warm is not None and multipliers is not None) else None)
    if sol.status in (Status.INFEASIBLE, Status.EVALUATION_ERROR) and warm is not None:
        log.info("retrying t=%.1f from a cold start after %s", clock, sol.status.value)
        sol = solve(nlp, _cold_guess(nlp, state, cfg, weights.budget_t_chg), cfg.solver)
    if sol.status is Status.EVALUATION_ERROR:
        raise PlanningError(f"model evaluation failed at t={clock:.1f} s: {sol.message}")
    if sol.status is Status.INFEASIBLE:
        raise PlanningError(f"no feasible plan at t={clock:.1f} s (SOC {state.soc:.4f}): {sol.message}")
    if sol.status is not Status.CONVERGED:
        log.info("t=%.1f: solver stopped with %s (%s)", clock, sol.status.value, sol.kkt.as_dict())
    return Plan(_dispense(nlp, sol.z_star, cfg), nlp.predicted_t_chg(sol.z_star), sol, nlp, clock)


@dataclass
class ClosedLoopResult:
    log: TrajectoryLog
    metrics: Metrics
    plans: list[dict] = field(default_factory=list)


def run_closed_loop(initial: VehicleState, preview: PreviewModel, schedule: WeightSchedule,
                    cfg: MpcConfig, *, on_plan: Callable[[dict], None] | None = None) -> ClosedLoopResult:
    """Alternate re-plans and plant intervals until the SOC target is reached.

    Stops when the plant SOC reaches ``cfg.soc_targ`` during charging or when
    ``cfg.safety_horizon`` has elapsed.
    """
    params = cfg.vehicle
    t_amb = cfg.problem.t_amb
    limits: Limits = cfg.problem.limits
    state = initial
    clock = initial.clock
    trajectory = TrajectoryLog()
    plans: list[dict] = []
    warm: Plan | None = None
    t_stop = clock + cfg.safety_horizon
    while clock < t_stop - 1e-9:
        phase = preview.phase_at(clock)
        charging = phase == "charging"
        if charging and state.soc >= cfg.soc_targ:
            break
        p = plan(state, clock, preview, schedule, cfg, warm)
        warm = p
        record = {"clock": clock, "phase": phase, "status": p.solution.status.value,
                  "outer": p.solution.outer_iters, "inner": p.solution.inner_iters,
                  "predicted_t_chg": p.predicted_t_chg, "beta2": p.nlp.weights.beta2}
        plans.append(record)
        if on_plan is not None:
            on_plan(record)
        period = cfg.control_period_charge if charging else cfg.control_period_drive
        if not charging:
            # re-plan exactly at the phase switches
            nxt = preview.drive_end if clock < preview.drive_end else preview.arrival_time
            period = min(period, nxt - clock)
        period = min(period, t_stop - clock)
        state, seg = simulate_interval(
            replace(state, clock=clock), p.inputs, period, min(cfg.plant_dt, period), params,
            t_amb=t_amb, charging=charging, phase=phase,
            beta1=p.nlp.weights.beta1, beta2=p.nlp.weights.beta2,
            traction=preview.traction_at if not charging else None,
            stop_soc=cfg.soc_targ if charging else None,
        )
        trajectory.extend(seg)
        clock = state.clock
    last = trajectory.samples[-1] if len(trajectory) else None
    trajectory.append(LogSample(
        clock, state.soc, state.t_bat, state.t_cab,
        beta1=last.beta1 if last else schedule.beta1,
        beta2=last.beta2 if last else schedule.beta2_const, phase="done",
    ))
    trajectory.end_clock = clock
    metrics = compute_metrics(trajectory, cfg.soc_targ, limits.t_cab_max, params.cooling.cop)
    return ClosedLoopResult(trajectory, metrics, plans)
