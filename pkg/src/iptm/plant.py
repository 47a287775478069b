"""Fine-step plant simulation between controller updates, logging and metrics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from .models import PowerInputs, VehicleParams, VehicleState, euler_step

PHASES = ("driving", "waiting", "charging", "done")
CSV_COLUMNS = ("clock_s", "soc", "t_bat_c", "t_cab_c", "q_bat_w", "q_cab_w", "p_chg_w",
               "p_trac_w", "beta1", "beta2", "phase")


class TargetNotReached(RuntimeError):
    """The run ended before the state of charge reached its target."""


class PhaseOrderError(ValueError):
    """A sample would break the driving -> waiting -> charging -> done ordering."""


@dataclass(frozen=True)
class LogSample:
    clock: float
    soc: float
    t_bat: float
    t_cab: float
    q_bat: float = 0.0
    q_cab: float = 0.0
    p_chg: float = 0.0
    p_trac: float = 0.0
    beta1: float = 0.0
    beta2: float = 0.0
    phase: str = "driving"

    def row(self) -> tuple:
        return (self.clock, self.soc, self.t_bat, self.t_cab, self.q_bat, self.q_cab,
                self.p_chg, self.p_trac, self.beta1, self.beta2, self.phase)


@dataclass
class TrajectoryLog:
    """Time-ordered closed-loop record.

    Sample ``k`` holds the state at ``clock[k]`` and the inputs applied over
    ``[clock[k], clock[k+1])``; the last sample's interval ends at
    ``end_clock`` (equal to its own clock for a finished run).
    """

    samples: list[LogSample] = field(default_factory=list)
    end_clock: float | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def append(self, sample: LogSample) -> None:
        if sample.phase not in PHASES:
            raise PhaseOrderError(f"unknown phase {sample.phase!r}")
        if self.samples:
            last = self.samples[-1]
            if not sample.clock > last.clock:
                raise ValueError(f"clock must increase: {sample.clock} after {last.clock}")
            if PHASES.index(sample.phase) < PHASES.index(last.phase):
                raise PhaseOrderError(f"phase {sample.phase!r} after {last.phase!r}")
        self.samples.append(sample)
        self.end_clock = None

    def extend(self, other: "TrajectoryLog | Iterable[LogSample]") -> None:
        for s in other:
            self.append(s)
        if isinstance(other, TrajectoryLog):
            self.end_clock = other.end_clock

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.samples], dtype=float)

    @property
    def phases(self) -> list[str]:
        return [s.phase for s in self.samples]

    def durations(self) -> np.ndarray:
        """Length of the interval each sample represents, seconds."""
        clock = self.column("clock")
        if clock.size == 0:
            return clock
        end = clock[-1] if self.end_clock is None else self.end_clock
        return np.diff(np.r_[clock, end])

    def phase_mask(self, phase: str) -> np.ndarray:
        return np.array([s.phase == phase for s in self.samples], dtype=bool)

    # ------------------------------------------------------------ serialization
    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for s in self.samples:
            writer.writerow([repr(float(v)) if not isinstance(v, str) else v for v in s.row()])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, source) -> "TrajectoryLog":
        """Read a log written by :meth:`to_csv` (path or text)."""
        if isinstance(source, str) and "\n" in source:
            text = source
        else:
            with open(source, newline="") as fh:
                text = fh.read()
        reader = csv.reader(io.StringIO(text))
        header = tuple(next(reader))
        if header != CSV_COLUMNS:
            raise ValueError(f"unexpected trajectory header {header}")
        log = cls()
        for row in reader:
            vals = [float(v) for v in row[:-1]]
            log.append(LogSample(*vals, phase=row[-1]))
        if log.samples:
            log.end_clock = log.samples[-1].clock
        return log

    def to_json(self, path=None) -> str:
        """JSON form: ``{"columns": [...], "rows": [[...], ...], "end_clock": float}``."""
        doc = {"columns": list(CSV_COLUMNS), "rows": [list(s.row()) for s in self.samples],
               "end_clock": self.end_clock}
        text = json.dumps(doc)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_json(cls, text: str) -> "TrajectoryLog":
        doc = json.loads(text)
        log = cls()
        for row in doc["rows"]:
            log.append(LogSample(*row))
        log.end_clock = doc.get("end_clock")
        return log


@dataclass(frozen=True)
class Metrics:
    t_chg: float | None  # minutes
    cv_cabin: float  # degC s
    t_cab_final: float  # degC
    cooling_energy: float  # J
    peak_t_bat: float  # degC
    status: str = "converged"

    def as_dict(self) -> dict:
        return asdict(self)


def simulate_interval(state: VehicleState, inputs: PowerInputs, duration: float, plant_dt: float,
                      params: VehicleParams, *, t_amb: float, charging: bool = False,
                      phase: str | None = None, beta1: float = 0.0, beta2: float = 0.0,
                      traction: Callable[[float], float] | None = None,
                      stop_soc: float | None = None) -> tuple[VehicleState, TrajectoryLog]:
    """Hold ``inputs`` for ``duration`` seconds and integrate at ``plant_dt``.

    ``traction`` optionally replaces the held traction power with a function
    of the clock, evaluated at the start of each step.  With ``stop_soc`` the
    integration ends early once the state of charge reaches that value.
    """
    if not duration > 0:
        raise ValueError(f"duration must be positive, got {duration}")
    if not plant_dt > 0:
        raise ValueError(f"plant_dt must be positive, got {plant_dt}")
    if plant_dt > duration:
        raise ValueError(f"plant_dt={plant_dt} exceeds duration={duration}")
    phase = phase or ("charging" if charging else "driving")
    n_steps = max(1, math.ceil(duration / plant_dt - 1e-9))
    start = state.clock
    log = TrajectoryLog()
    for k in range(n_steps):
        step_inputs = inputs
        if traction is not None:
            step_inputs = replace(inputs, p_traction=float(traction(state.clock)))
        log.append(LogSample(
            state.clock, state.soc, state.t_bat, state.t_cab,
            step_inputs.q_bat_cool, step_inputs.q_cab_cool,
            step_inputs.p_charge if charging else 0.0,
            0.0 if charging else step_inputs.p_traction,
            beta1, beta2, phase,
        ))
        t_next = start + min((k + 1) * plant_dt, duration)
        state = euler_step(state, step_inputs, t_next - state.clock, params, t_amb, charging)
        state = replace(state, clock=t_next)
        if stop_soc is not None and state.soc >= stop_soc:
            break
    log.end_clock = state.clock
    return state, log


def accumulate_cv(log: TrajectoryLog, t_cab_max: float) -> float:
    """Rectangle-rule integral of the cabin excess over ``t_cab_max``, degC s."""
    if not len(log):
        raise ValueError("empty log")
    excess = np.maximum(0.0, log.column("t_cab") - t_cab_max)
    return float(np.sum(excess * log.durations()))


def charging_time(log: TrajectoryLog, soc_targ: float) -> float:
    """Minutes from the first charging sample until SOC first reaches ``soc_targ``."""
    charging = np.flatnonzero(log.phase_mask("charging"))
    if charging.size == 0:
        # target already met when charging would have started
        done = np.flatnonzero(log.phase_mask("done"))
        if done.size and log.samples[done[0]].soc >= soc_targ:
            return 0.0
        raise ValueError("log has no charging phase")
    k0 = int(charging[0])
    soc = log.column("soc")[k0:]
    hit = np.flatnonzero(soc >= soc_targ)
    if hit.size == 0:
        raise TargetNotReached(f"final SOC {soc[-1]:.6f} below target {soc_targ}")
    clock = log.column("clock")
    return float(clock[k0 + hit[0]] - clock[k0]) / 60.0


def cooling_energy(log: TrajectoryLog, cop: float) -> float:
    q = log.column("q_bat") + log.column("q_cab")
    return float(np.sum(q / cop * log.durations()))


def compute_metrics(log: TrajectoryLog, soc_targ: float, t_cab_max: float, cop: float) -> Metrics:
    try:
        t_chg, status = charging_time(log, soc_targ), "converged"
    except (TargetNotReached, ValueError):
        t_chg, status = None, "target_not_reached"
    return Metrics(
        t_chg=t_chg,
        cv_cabin=accumulate_cv(log, t_cab_max),
        t_cab_final=float(log.samples[-1].t_cab),
        cooling_energy=cooling_energy(log, cop),
        peak_t_bat=float(np.max(log.column("t_bat"))),
        status=status,
    )
