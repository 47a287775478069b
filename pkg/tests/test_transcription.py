import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iptm.cli import gradient_check
from iptm.models import BatteryParams, CabinParams, CoolingParams, VehicleParams, VehicleState
from iptm.transcription import (HorizonSpec, InfeasibleBounds, Limits, ProblemParams, Weights, build_nlp,
                                dump_json, eval_constraints, eval_gradients, eval_objective, initial_guess)

X0 = VehicleState(0.3, 30.0, 24.0)


@pytest.fixture
def params(small_vehicle):
    return ProblemParams(small_vehicle, t_amb=38.0, p_aux_base=500.0)


def _mixed(params, weights=Weights(alpha=1e3, beta1=1e11, beta2=1e10, budget_t_chg=1800.0)):
    spec = HorizonSpec(n1=3, dt1=30.0, n2=4, dt2_max=180.0, traction_preview=(5e3, 12e3, 0.0))
    return build_nlp(spec, X0, params, weights)


def test_charging_only_layout(params):
    nlp = build_nlp(HorizonSpec(n1=0, dt1=30.0, n2=1, dt2_max=180.0), X0, params, Weights())
    assert nlp.n == 12
    assert list(nlp.layout) == ["q_bat", "q_cab", "p_chg", "dt2", "soc", "t_bat", "t_cab", "eps1", "eps2"]


def test_driving_only_layout_has_no_charging_slices(params):
    spec = HorizonSpec(n1=5, dt1=30.0, n2=20, dt2_max=180.0, traction_preview=(1e3,) * 5,
                       charging_in_horizon=False)
    nlp = build_nlp(spec, X0, params, Weights())
    assert "p_chg" not in nlp.layout and "dt2" not in nlp.layout
    z = initial_guess(nlp)
    eq, _ = eval_constraints(nlp, z)
    assert eq.size == 3 * 5  # defects only, no terminal row


def test_layout_partitions_decision_vector(params):
    nlp = _mixed(params)
    covered = np.zeros(nlp.n, dtype=int)
    for sl in nlp.layout.values():
        covered[sl] += 1
    assert np.all(covered == 1)
    assert nlp.lower.shape == nlp.upper.shape == (nlp.n,)


def test_zero_weights_zero_cost(params):
    nlp = _mixed(params, Weights(alpha=0.0, beta1=0.0, beta2=0.0))
    z = initial_guess(nlp)
    for name in ("q_bat", "q_cab"):
        z[nlp.layout[name]] = 0.0
    z[nlp.layout["eps1"]] = z[nlp.layout["eps2"]] = 1.0
    assert eval_objective(nlp, z) == 0.0


def test_objective_single_charging_sample(params):
    nlp = build_nlp(HorizonSpec(n1=0, dt1=30.0, n2=1, dt2_max=180.0), X0, params,
                    Weights(alpha=0.01, beta1=0.0, beta2=0.0))
    z = np.zeros(nlp.n)
    z[nlp.layout["q_bat"]] = 1000.0
    z[nlp.layout["dt2"]] = 60.0
    assert eval_objective(nlp, z) == pytest.approx(3.0e7 + 36.0, rel=1e-14)


def test_objective_cabin_slack_term(params):
    nlp = build_nlp(HorizonSpec(n1=0, dt1=30.0, n2=1, dt2_max=180.0), X0, params,
                    Weights(alpha=0.0, beta1=0.0, beta2=1e5))
    z = np.zeros(nlp.n)
    z[nlp.layout["eps2"]] = 2.0
    assert eval_objective(nlp, z) == pytest.approx(4e5)


def test_rollout_has_zero_defects(params):
    nlp = _mixed(params)
    eq, _ = eval_constraints(nlp, initial_guess(nlp, 600.0))
    assert np.max(np.abs(eq[:-1])) <= 1e-12


def test_terminal_residual(params):
    nlp = _mixed(params)
    z = initial_guess(nlp, 600.0)
    z[nlp.layout["soc"].stop - 1] = 0.6
    eq, _ = eval_constraints(nlp, z)
    assert eq[-1] == 0.0


def test_cooling_split_residual(params):
    nlp = _mixed(params)
    z = initial_guess(nlp, 600.0)
    q_max = params.vehicle.cooling.q_total_max
    z[nlp.layout["q_bat"].start] = 0.5 * q_max + 100.0
    z[nlp.layout["q_cab"].start] = 0.5 * q_max
    _, g = eval_constraints(nlp, z)
    N = nlp.spec.n_samples
    assert g[2 * N] == pytest.approx(100.0)


def test_defect_jacobian_wrt_dt2_is_minus_rate(params):
    nlp = _mixed(params)
    z = initial_guess(nlp, 600.0)
    _, J, _ = eval_gradients(nlp, z)
    J = J.toarray()
    N, n1 = nlp.spec.n_samples, nlp.spec.n1
    soc = z[nlp.layout["soc"]]
    tb = z[nlp.layout["t_bat"]]
    dt2 = z[nlp.layout["dt2"]]
    for i in range(nlp.spec.n2):
        k = n1 + i
        col = nlp.layout["dt2"].start + i
        # with rolled-out states the Euler rate is (x[k+1] - x[k]) / dt
        assert J[k, col] == pytest.approx(-(soc[k + 1] - soc[k]) / dt2[i], rel=1e-9)
        assert J[N + k, col] == pytest.approx(-(tb[k + 1] - tb[k]) / dt2[i], rel=1e-9)


def test_zero_gradient_at_origin(params):
    nlp = _mixed(params, Weights(alpha=0.0, beta1=0.0, beta2=0.0))
    g, _, _ = eval_gradients(nlp, np.zeros(nlp.n))
    assert not np.any(g)


def test_gradients_match_finite_differences():
    worst, where = gradient_check(n_points=10, seed=3)
    assert worst < 1e-5, where


def test_budget_row_only_with_budget(params):
    with_budget = _mixed(params)
    without = _mixed(params, Weights(alpha=1e3))
    assert with_budget.n_ineq == without.n_ineq + 1


def test_build_is_deterministic(params):
    a, b = _mixed(params), _mixed(params)
    z = initial_guess(a, 600.0)
    assert dump_json(a, z) == dump_json(b, z)


def test_predicted_charging_time(params):
    nlp = _mixed(params)
    z = initial_guess(nlp, 600.0)
    assert nlp.predicted_t_chg(z) == float(np.sum(z[nlp.layout["dt2"]]))
    assert nlp.predicted_t_chg(z) == pytest.approx(600.0)


def test_empty_bounds_rejected(small_vehicle):
    bad = ProblemParams(small_vehicle, limits=Limits(soc_min=0.9, soc_max=0.2))
    with pytest.raises(InfeasibleBounds):
        build_nlp(HorizonSpec(n1=0, dt1=30.0, n2=2, dt2_max=180.0), X0, bad, Weights())


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.0, 30e3), min_size=3, max_size=3), st.floats(100.0, 3000.0))
def test_rollout_consistency_property(trac, budget):
    veh = VehicleParams(BatteryParams(360.0, 0.1, 180000.0, 100.0, 1000.0, 5.0),
                        CabinParams(40.0, 1000.0, 50.0, 300.0, 100.0, 100.0, 1), CoolingParams(2.0, 12e3))
    spec = HorizonSpec(n1=3, dt1=30.0, n2=4, dt2_max=180.0, traction_preview=tuple(trac))
    nlp = build_nlp(spec, X0, ProblemParams(veh), Weights())
    eq, _ = eval_constraints(nlp, initial_guess(nlp, budget))
    assert np.max(np.abs(eq[:-1])) <= 1e-12
