from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest
import tomli_w
from hypothesis import given
from hypothesis import strategies as st

from iptm import scenario as scn
from iptm.models import LongitudinalParams
from iptm.mpc import PreviewKind, ScheduleKind
from iptm.scenario import (CASE_IDS, BracketFailure, DriveCycle, ParseError, ValidationError,
                           calibrate_alpha, case_preset, load_scenario, persist_alpha, save_scenario,
                           scenario_to_dict, synthetic_urban_cycle, traction_power)

VP = LongitudinalParams(mass=2500.0, drag_area=2.0, air_density=1.2, rolling_coeff=0.01,
                        drivetrain_efficiency=0.9)


def test_nominal_defaults(nominal):
    assert nominal.ambient_temp == 38.0
    assert (nominal.initial.soc, nominal.soc_targ) == (0.3, 0.6)
    assert nominal.limits.p_chg_max == 80e3
    assert (nominal.limits.t_bat_min, nominal.limits.t_bat_max) == (15.0, 35.0)
    assert (nominal.limits.t_cab_min, nominal.limits.t_cab_max) == (23.0, 25.0)
    assert nominal.budget_t_chg == 1800.0
    assert nominal.drive_end == 900.0


def test_traction_power_examples():
    assert traction_power(0.0, 0.0, VP) == 0.0
    assert traction_power(15.0, 0.0, VP) == pytest.approx((270.0 + 245.25) * 15.0 / 0.9)
    assert traction_power(15.0, -3.0, VP) == 0.0


@given(st.floats(0.0, 60.0), st.floats(0.0, 60.0))
def test_traction_power_monotone_in_speed(a, b):
    lo, hi = sorted((a, b))
    assert traction_power(lo, 0.0, VP) <= traction_power(hi, 0.0, VP)


def test_synthetic_cycle_shape():
    cyc = synthetic_urban_cycle()
    assert cyc.duration == 900.0
    assert max(cyc.speed) == 16.0
    assert cyc.speed[0] == cyc.speed[-1] == 0.0


def test_shipped_cycle_matches_generator(nominal):
    assert nominal.drive_cycle == synthetic_urban_cycle()


def test_drive_cycle_csv(tmp_path):
    cyc = DriveCycle((0.0, 1.0, 2.5), (0.0, 3.0, 1.0))
    path = tmp_path / "c.csv"
    cyc.to_csv(path)
    assert DriveCycle.from_csv(path) == cyc
    (tmp_path / "bad.csv").write_text("t,v\n0,0\n")
    with pytest.raises(ParseError):
        DriveCycle.from_csv(tmp_path / "bad.csv")


def test_drive_cycle_time_must_increase():
    with pytest.raises(ValidationError):
        DriveCycle((0.0, 1.0, 1.0), (0.0, 1.0, 2.0))


@pytest.mark.parametrize("case_id", CASE_IDS)
def test_presets(case_id):
    p = case_preset(case_id)
    assert p.schedule.beta1 == 1e11
    if case_id == "I":
        assert p.preview is PreviewKind.ACCURATE
        assert p.schedule.kind is ScheduleKind.CONSTANT and p.schedule.beta2_const == 1e10
    elif case_id == "III":
        assert p.preview is PreviewKind.NO_CHARGE
        assert p.schedule.kind is ScheduleKind.SOC_AWARE
        assert (p.schedule.beta0, p.schedule.b) == (10.0, 10.0)
    else:
        assert p.preview is PreviewKind.NO_CHARGE
        assert p.schedule.beta2_const == {"IIa": 1e10, "IIb": 1e5, "IIc": 1e3}[case_id]


def test_unknown_case():
    with pytest.raises(ValueError):
        case_preset("IV")


def _write(tmp_path, doc):
    path = tmp_path / "s.toml"
    with open(path, "wb") as fh:
        tomli_w.dump(doc, fh)
    return path


def test_round_trip(nominal, tmp_path):
    path = tmp_path / "copy.toml"
    save_scenario(nominal, path)
    again = load_scenario(path)
    assert again == nominal
    inline = replace(nominal, drive_cycle_file=None)
    save_scenario(inline, tmp_path / "inline.toml")
    assert load_scenario(tmp_path / "inline.toml").drive_cycle == nominal.drive_cycle


def test_soc_bounds_reversed(nominal, tmp_path):
    doc = scenario_to_dict(nominal)
    doc["limits"]["soc_min"], doc["limits"]["soc_max"] = 0.9, 0.2
    with pytest.raises(ValidationError) as info:
        load_scenario(_write(tmp_path, doc))
    assert "soc" in info.value.field


def test_charging_only_scenario_is_valid(nominal, tmp_path):
    doc = scenario_to_dict(nominal)
    doc["route"] = {"time_s": [], "speed_mps": [], "waiting_time_s": 0.0}
    sc = load_scenario(_write(tmp_path, doc))
    assert sc.arrival_time == 0.0
    from iptm.mpc import make_horizon

    assert make_horizon(0.0, sc.preview("I"), sc.mpc_config("I")).n1 == 0


def test_initial_soc_must_be_below_target(nominal, tmp_path):
    doc = scenario_to_dict(nominal)
    doc["initial"]["soc"] = 0.7
    with pytest.raises(ValidationError) as info:
        load_scenario(_write(tmp_path, doc))
    assert info.value.field.startswith("initial")


def test_wrong_type_names_field(nominal, tmp_path):
    doc = scenario_to_dict(nominal)
    doc["battery"]["internal_resistance_ohm"] = "high"
    with pytest.raises(ValidationError) as info:
        load_scenario(_write(tmp_path, doc))
    assert info.value.field == "battery.internal_resistance_ohm"


def test_unknown_key_rejected(nominal, tmp_path):
    doc = scenario_to_dict(nominal)
    doc["cabin"]["colour"] = 1.0
    with pytest.raises(ValidationError) as info:
        load_scenario(_write(tmp_path, doc))
    assert info.value.field == "cabin.colour"


def test_malformed_toml(tmp_path):
    path = tmp_path / "broken.toml"
    path.write_text("schema_version = [1,\n")
    with pytest.raises(ParseError):
        load_scenario(path)


def test_missing_file(tmp_path):
    with pytest.raises(ParseError) as info:
        load_scenario(tmp_path / "nope.toml")
    assert "nope.toml" in str(info.value)


def test_persist_alpha(nominal, tmp_path):
    path = tmp_path / "s.toml"
    save_scenario(nominal, path)
    persist_alpha(path, 1234.5)
    assert load_scenario(path).alpha == 1234.5


def _fake_runs(monkeypatch, t_chg_of_alpha):
    calls = []

    def fake(sc, case_id=None, **kw):
        calls.append(kw["alpha"])
        t = t_chg_of_alpha(kw["alpha"])
        return SimpleNamespace(metrics=SimpleNamespace(t_chg=t / 60.0))

    monkeypatch.setattr(scn, "run_case", fake)
    return calls


def test_calibration_early_exit(nominal, monkeypatch):
    calls = _fake_runs(monkeypatch, lambda a: 1800.0)
    alpha = calibrate_alpha(nominal, 1800.0, bracket=(1e-2, 1e6))
    assert alpha == pytest.approx(1e2)
    assert len(calls) == 1


def test_calibration_bisects(nominal, monkeypatch):
    # smooth decreasing response with 1800 s reached at alpha = 3e4
    calls = _fake_runs(monkeypatch, lambda a: 1800.0 * (3e4 / a) ** 0.1)
    history = []
    alpha = calibrate_alpha(nominal, 1800.0, history=history)
    assert abs(1800.0 * (3e4 / alpha) ** 0.1 - 1800.0) <= 18.0
    assert len(history) == len(calls)


def test_calibration_infeasible_target(quick):
    with pytest.raises(BracketFailure):
        calibrate_alpha(quick, 10.0)


def test_preview_and_config(nominal):
    assert nominal.arrival_time == nominal.drive_end + nominal.waiting_time
    cfg = nominal.mpc_config("I")
    assert cfg.budget_t_chg == nominal.budget_t_chg
    assert nominal.mpc_config("IIa").budget_t_chg is None
    assert nominal.preview("IIa").kind is PreviewKind.NO_CHARGE
    profile = nominal.preview("I").traction
    assert profile.mean(0.0, 900.0) > 0.0
    assert profile.power_at(950.0) == 0.0
    # the mean over the whole cycle is the exact time average of the steps
    edges = profile.edges
    avg = np.sum(profile.power * np.diff(edges)) / (edges[-1] - edges[0])
    assert profile.mean(0.0, 900.0) == pytest.approx(avg, rel=1e-12)
