from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iptm.models import VehicleState
from iptm.mpc import (PreviewKind, PreviewModel, ScheduleKind, WeightSchedule, WrongScheduleKind,
                      _dispense, _weights, beta2_of_soc, make_horizon, plan, run_closed_loop)
from iptm.scenario import case_preset
from iptm.transcription import HorizonSpec, Weights, build_nlp, dump_json, initial_guess

SOC_AWARE = WeightSchedule(ScheduleKind.SOC_AWARE, beta0=10.0, b=10.0, soc_min=0.3, soc_targ=0.6)


class Flat:
    """Constant traction power until ``end``."""

    def __init__(self, power, end):
        self.p, self.end = power, end

    def power_at(self, clock):
        return self.p if clock < self.end else 0.0

    def mean(self, t0, t1):
        return self.p * max(0.0, min(t1, self.end) - t0) / (t1 - t0) if t1 > t0 else 0.0


@pytest.fixture
def cfg(nominal):
    return nominal.mpc_config("I")


def test_beta2_endpoints():
    assert beta2_of_soc(0.3, SOC_AWARE) == 10.0
    assert beta2_of_soc(0.6, SOC_AWARE) == 1e11


def test_beta2_midpoint():
    assert beta2_of_soc(0.45, SOC_AWARE) == pytest.approx(1e6, rel=1e-12)


def test_beta2_clamped():
    assert beta2_of_soc(0.1, SOC_AWARE) == 10.0
    assert beta2_of_soc(0.9, SOC_AWARE) == 1e11


def test_beta2_needs_soc_aware_schedule():
    with pytest.raises(WrongScheduleKind):
        beta2_of_soc(0.4, WeightSchedule())


def test_schedule_invariants():
    with pytest.raises(ValueError):
        WeightSchedule(ScheduleKind.SOC_AWARE, soc_min=0.6, soc_targ=0.6)
    with pytest.raises(ValueError):
        WeightSchedule(ScheduleKind.SOC_AWARE, beta0=0.0)


@settings(max_examples=100)
@given(st.floats(0.3, 0.6), st.floats(0.3, 0.6))
def test_beta2_monotone(a, b):
    lo, hi = sorted((a, b))
    assert beta2_of_soc(lo, SOC_AWARE) <= beta2_of_soc(hi, SOC_AWARE)


def test_horizon_at_arrival(cfg):
    preview = PreviewModel(PreviewKind.ACCURATE, arrival_time=900.0)
    spec = make_horizon(900.0, preview, cfg)
    assert spec.n1 == 0 and spec.charging_in_horizon


def test_horizon_ceiling(cfg):
    preview = PreviewModel(PreviewKind.ACCURATE, arrival_time=900.0)
    assert make_horizon(600.0, preview, cfg).n1 == 10
    assert make_horizon(610.0, preview, cfg).n1 == 10
    assert make_horizon(590.0, preview, cfg).n1 == 11


def test_no_charge_preview_hides_charging(cfg):
    preview = PreviewModel(PreviewKind.NO_CHARGE, arrival_time=900.0)
    assert not make_horizon(0.0, preview, cfg).charging_in_horizon
    assert make_horizon(900.0, preview, cfg).charging_in_horizon


def test_accurate_preview_grid(cfg):
    preview = PreviewModel(PreviewKind.ACCURATE, arrival_time=1000.0)
    spec = make_horizon(0.0, preview, cfg)
    assert spec.charging_in_horizon
    assert spec.n1 * cfg.dt1 == 1020.0


def test_waiting_samples_have_zero_traction(cfg):
    preview = PreviewModel(PreviewKind.ACCURATE, arrival_time=300.0, traction=Flat(10e3, 150.0),
                           drive_end=150.0)
    spec = make_horizon(0.0, preview, cfg)
    assert spec.traction_preview == (10e3,) * 5 + (0.0,) * 5


def test_plan_at_target(cfg):
    preview = PreviewModel(PreviewKind.ACCURATE, arrival_time=0.0)
    p = plan(VehicleState(0.6, 30.0, 24.0), 0.0, preview, WeightSchedule(), cfg)
    assert p.predicted_t_chg == 0.0
    assert p.inputs.p_charge == 0.0


def test_plan_no_charge_preview_driving(cfg):
    preview = PreviewModel(PreviewKind.NO_CHARGE, arrival_time=120.0, traction=Flat(8e3, 120.0))
    p = plan(VehicleState(0.4, 30.0, 24.5), 0.0, preview, WeightSchedule(), cfg)
    assert p.predicted_t_chg is None
    assert p.inputs.p_charge == 0.0
    assert p.inputs.p_traction == 8e3
    assert p.solution.converged


def test_plan_charging_respects_budget(nominal):
    cfg = nominal.mpc_config("I")
    preview = PreviewModel(PreviewKind.ACCURATE, arrival_time=0.0)
    p = plan(VehicleState(0.3, 28.0, 24.0), 0.0, preview, case_preset("I").schedule, cfg)
    assert p.solution.converged
    assert p.predicted_t_chg <= cfg.budget_t_chg + cfg.solver.feas_tol * nominal.controller.dt2_max
    assert 0.0 < p.inputs.p_charge <= cfg.problem.limits.p_chg_max


def test_case_iii_reduces_to_constant_at_anchor(nominal):
    """First charging solve of the SOC-aware case equals the constant case with beta2 = beta0."""
    cfg = nominal.mpc_config("III")
    soc_aware = nominal.preset("III").schedule
    constant = replace(case_preset("IIa").schedule, beta2_const=soc_aware.beta0)
    preview = nominal.preview("III")
    state = VehicleState(soc_aware.soc_min, 30.0, 24.0)
    clock = preview.arrival_time
    spec = make_horizon(clock, preview, cfg)
    nlps = []
    for schedule in (soc_aware, constant):
        w = _weights(state, clock, preview, schedule, cfg, spec)
        nlps.append(build_nlp(spec, replace(state, clock=clock), cfg.controller_params(), w))
    z = initial_guess(nlps[0], 900.0)
    assert nlps[0].weights == nlps[1].weights
    assert dump_json(nlps[0], z) == dump_json(nlps[1], z)
    assert nlps[0].objective(z) == nlps[1].objective(z)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e4, 1e5), min_size=4, max_size=4))
def test_dispensed_controls_within_limits(raw):
    from iptm.scenario import load_nominal

    cfg = load_nominal().mpc_config("I")
    spec = HorizonSpec(n1=0, dt1=30.0, n2=2, dt2_max=180.0)
    nlp = build_nlp(spec, VehicleState(0.4, 30.0, 24.0), cfg.problem, Weights())
    z = np.zeros(nlp.n)
    z[nlp.layout["q_bat"].start] = raw[0]
    z[nlp.layout["q_cab"].start] = raw[1]
    z[nlp.layout["p_chg"].start] = raw[2]
    u = _dispense(nlp, z, cfg)
    cool = cfg.vehicle.cooling
    assert 0.0 <= u.q_bat_cool <= cool.q_bat_max
    assert 0.0 <= u.q_cab_cool <= cool.q_cab_max
    assert u.q_bat_cool + u.q_cab_cool <= cool.q_total_max * (1 + 1e-12)
    assert 0.0 <= u.p_charge <= cfg.problem.limits.p_chg_max


def test_immediate_termination_at_target(cfg):
    preview = PreviewModel(PreviewKind.ACCURATE, arrival_time=0.0)
    res = run_closed_loop(VehicleState(0.6, 30.0, 24.0), preview, WeightSchedule(), cfg)
    assert res.metrics.t_chg == 0.0
    assert res.metrics.status == "converged"
    assert res.log.phases == ["done"]


def test_closed_loop_quick_case_i(quick):
    res = run_closed_loop(quick.initial, quick.preview("I"), quick.preset("I").schedule,
                          quick.mpc_config("I"))
    assert res.metrics.status == "converged"
    assert res.log.samples[-1].soc >= quick.soc_targ
    phases = res.log.phases
    order = [p for k, p in enumerate(phases) if k == 0 or p != phases[k - 1]]
    assert order == ["driving", "waiting", "charging", "done"]
    # charging-phase re-plans only shorten the remaining plan
    charging = [r["predicted_t_chg"] for r in res.plans if r["phase"] == "charging"]
    assert all(b <= a + 1.0 for a, b in zip(charging, charging[1:]))
