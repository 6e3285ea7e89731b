import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import ofoflex.controller as ctl
from ofoflex.controller import (
    CONGESTION,
    FROZEN,
    TRACKING,
    ControllerConfig,
    ControllerState,
    ObjectiveSpec,
    QpFailure,
    controller_step,
    count_violations,
    evaluate_gradient,
    momentum_combine,
)
from ofoflex.fixtures import cigre_mv_fixture
from ofoflex.powerflow import OutputSpec, compute_sensitivities, solve_power_flow
from ofoflex.qp import (
    INFEASIBLE,
    CompositeGradient,
    ConstraintSpec,
    ParameterError,
    QpSolution,
    build_projection_qp,
    kkt_residuals,
    solve_qp,
)


def unbounded(m, n):
    return ConstraintSpec(
        np.full(m, -np.inf), np.full(m, np.inf), np.full(n, -np.inf), np.full(n, np.inf)
    )


# -- gradient ----------------------------------------------------------------


def test_congestion_gradient_zero_at_nominal():
    obj = ObjectiveSpec.congestion(np.array([0.4, 1.2]))
    g = evaluate_gradient(obj, np.array([0.4, 1.2, 0.0, 0.0]), np.zeros(3))
    np.testing.assert_array_equal(g.u, 0.0)
    np.testing.assert_array_equal(g.y, 0.0)


def test_congestion_gradient_values():
    obj = ObjectiveSpec.congestion(np.array([0.0]), a_weight=1.0, b_weight=0.1)
    g = evaluate_gradient(obj, np.array([0.1, 0.5]), np.zeros(1))
    assert g.u[0] == pytest.approx(0.2)
    assert g.u[1] == pytest.approx(0.1)


def test_tracking_gradient():
    obj = ObjectiveSpec.tracking(10.0, 3.0)
    y = np.array([1.0, 1.0, 10.0, 3.0])
    g = evaluate_gradient(obj, np.zeros(4), y)
    np.testing.assert_array_equal(g.y, 0.0)
    np.testing.assert_array_equal(g.u, 0.0)
    g = evaluate_gradient(obj, np.zeros(4), np.array([1.0, 1.0, 11.0, 2.5]))
    np.testing.assert_allclose(g.y, [0.0, 0.0, 2.0, -1.0])


def test_objective_value_matches_gradient():
    rng = np.random.default_rng(1)
    M = rng.normal(size=(3, 3))
    obj = ObjectiveSpec(kind=CONGESTION, A=M @ M.T, B=0.1 * np.eye(3), p_nominal=rng.normal(size=3))
    u = rng.normal(size=6)
    g = evaluate_gradient(obj, u, np.zeros(0)).u
    h = 1e-6
    fd = [(obj.value(u + h * e, None) - obj.value(u - h * e, None)) / (2 * h) for e in np.eye(6)]
    np.testing.assert_allclose(g, fd, atol=1e-7)


def test_weights_must_be_psd():
    with pytest.raises(ValueError):
        ObjectiveSpec(kind=CONGESTION, A=-np.eye(2), B=np.eye(2), p_nominal=np.zeros(2))
    with pytest.raises(ValueError):
        ObjectiveSpec(kind=CONGESTION, A=np.array([[1.0, 1.0], [0.0, 1.0]]), B=np.eye(2), p_nominal=np.zeros(2))
    with pytest.raises(ValueError):
        ObjectiveSpec(kind="other")


# -- momentum ----------------------------------------------------------------


def test_momentum_beta_one_returns_current():
    cur = np.array([0.3, -0.7])
    np.testing.assert_array_equal(momentum_combine(cur, np.array([5.0, 5.0]), 1.0), cur)


def test_momentum_convex_combination():
    np.testing.assert_allclose(
        momentum_combine(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 0.5), [0.5, 0.5]
    )


def test_momentum_first_step_unchanged():
    cur = np.array([1.0, 2.0])
    np.testing.assert_array_equal(momentum_combine(cur, None, 0.4), cur)


@pytest.mark.parametrize("beta", [0.0, -0.2, 1.01])
def test_momentum_beta_range(beta):
    with pytest.raises(ParameterError):
        momentum_combine(np.zeros(1), np.zeros(1), beta)


@pytest.mark.parametrize("alpha,beta", [(0.0, 0.5), (1.2, 0.5), (0.5, 0.0), (0.5, 1.5)])
def test_config_ranges(alpha, beta):
    with pytest.raises(ParameterError):
        ControllerConfig(alpha, beta, ObjectiveSpec.tracking(0, 0), unbounded(1, 2))


# -- step --------------------------------------------------------------------


def _fixture_step_inputs(load_scale=1.0):
    net = cigre_mv_fixture().scaled_loads(load_scale)
    outputs = OutputSpec(vm_buses=tuple(range(1, 12)))
    u = net.nominal_inputs()
    sol = solve_power_flow(net, u)
    sens = compute_sensitivities(net, sol, outputs)
    lo, hi = net.input_bounds()
    y_lo, y_hi = outputs.bounds(net)
    limits = ConstraintSpec(lo, hi, y_lo, y_hi)
    obj = ObjectiveSpec.congestion(np.array([a.p_nominal for a in net.actuators]))
    return net, outputs, u, sol, sens, limits, obj


def test_zero_gradient_slack_is_fixed_point():
    net, outputs, u, sol, sens, limits, obj = _fixture_step_inputs()
    cfg = ControllerConfig(0.8, 0.9, obj, limits)
    state, rec = controller_step(ControllerState(u), outputs.measure(sol), sens, cfg)
    np.testing.assert_array_equal(state.u, u)
    assert rec.sigma_norm == 0.0
    assert rec.qp_status == "optimal"


def test_undervoltage_corrected_in_linearisation():
    net, outputs, u, sol, sens, limits, obj = _fixture_step_inputs(load_scale=1.45)
    y = outputs.measure(sol)
    assert y.min() < 0.95
    cfg = ControllerConfig(0.8, 0.9, obj, limits)
    state, rec = controller_step(ControllerState(u), y, sens, cfg)
    assert rec.violations > 0
    assert rec.y_predicted.min() >= 0.95 - 1e-9
    # the plant lands close to the prediction
    y_next = outputs.measure(solve_power_flow(net, state.u))
    assert np.max(np.abs(y_next - rec.y_predicted)) < 5e-3


def test_raw_gradient_is_stored():
    net, outputs, u, sol, sens, limits, obj = _fixture_step_inputs()
    cfg = ControllerConfig(0.5, 0.6, obj, limits)
    u0 = u.copy()
    u0[0] -= 0.2
    s1, r1 = controller_step(ControllerState(u0), outputs.measure(sol), sens, cfg)
    s2, r2 = controller_step(s1, outputs.measure(sol), sens, cfg)
    np.testing.assert_array_equal(s1.prev_gradient, r1.gradient)
    np.testing.assert_array_equal(s2.prev_gradient, r2.gradient)
    assert s2.k == 2


def test_beta_one_equals_plain_pgd_bitwise():
    net, outputs, u, sol, sens, limits, obj = _fixture_step_inputs(load_scale=1.45)
    y = outputs.measure(sol)
    a = ControllerConfig(0.8, 1.0, obj, limits)
    b = ControllerConfig(0.8, 1.0, obj, limits, use_momentum=False)
    sa = sb = ControllerState(u)
    for _ in range(4):
        sa, ra = controller_step(sa, y, sens, a)
        sb, rb = controller_step(sb, y, sens, b)
        assert sa.u.tobytes() == sb.u.tobytes()


def test_sigma_zero_iff_stationary():
    net, outputs, u, sol, sens, limits, obj = _fixture_step_inputs(load_scale=1.45)
    cfg = ControllerConfig(0.8, 1.0, obj, limits)
    state = ControllerState(u)
    v = sol.v
    for _ in range(150):
        s = solve_power_flow(net, state.u, start=v)
        v = s.v
        sens = compute_sensitivities(net, s, outputs)
        state, rec = controller_step(state, outputs.measure(s), sens, cfg)
    # converged: sigma vanishes and the projected gradient is stationary
    assert rec.sigma_norm < 1e-8
    prob = build_projection_qp(
        CompositeGradient(rec.gradient, np.zeros(rec.y.size)), sens, rec.u, rec.y, limits, 0.8
    )
    res = kkt_residuals(prob, np.zeros(rec.u.size), solve_qp(prob).multipliers)
    assert res["stationarity"] < 1e-8
    # away from the optimum the step is nonzero
    _, first = controller_step(ControllerState(u), outputs.measure(sol), compute_sensitivities(net, sol, outputs), cfg)
    assert first.sigma_norm > 1e-3


def test_linearisation_gap_shrinks_quadratically():
    net, outputs, u, sol, sens, limits, obj = _fixture_step_inputs()
    u0 = u.copy()
    n = net.n_actuators
    lo, hi = net.input_bounds()
    # reactive output away from the optimum, inside every box, no band active
    u0[n:] = np.clip(0.1, lo[n:], hi[n:])
    s0 = solve_power_flow(net, u0)
    sens = compute_sensitivities(net, s0, outputs)
    y0 = outputs.measure(s0)
    gaps = []
    for alpha in (0.4, 0.2, 0.1):
        cfg = ControllerConfig(alpha, 1.0, obj, limits)
        state, rec = controller_step(ControllerState(u0), y0, sens, cfg)
        y1 = outputs.measure(solve_power_flow(net, state.u, start=s0.v, tol=1e-11))
        gaps.append(np.max(np.abs(y1 - rec.y_predicted)))
    assert 3.5 < gaps[0] / gaps[1] < 4.5
    assert 3.5 < gaps[1] / gaps[2] < 4.5


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_descent_on_linear_plant(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(2, 8))
    S = rng.normal(size=(2, m))
    c = rng.normal(size=2)
    obj = ObjectiveSpec.tracking(*rng.normal(size=2), pcc_rows=(0, 1))
    lo, hi = -np.ones(m), np.ones(m)
    limits = ConstraintSpec(lo, hi, np.full(2, -np.inf), np.full(2, np.inf))
    L = 2 * np.linalg.norm(S, 2) ** 2
    cfg = ControllerConfig(min(1.0, 0.9 / L), 1.0, obj, limits)
    state = ControllerState(rng.uniform(-1, 1, m))
    phi = np.inf
    for _ in range(15):
        y = S @ state.u + c
        cur = obj.value(state.u, y)
        assert cur <= phi + 1e-12
        phi = cur
        state, _ = controller_step(state, y, S, cfg)
        assert np.all(state.u >= lo - 1e-12) and np.all(state.u <= hi + 1e-12)


def test_softening_fallback_flags_record():
    S = np.array([[1.0], [0.0], [0.0]])
    limits = ConstraintSpec(
        np.array([-0.1]), np.array([0.1]), np.array([0.95, -np.inf, -np.inf]), np.array([1.05, np.inf, np.inf])
    )
    cfg = ControllerConfig(1.0, 1.0, ObjectiveSpec.tracking(0.0, 0.0), limits)
    state, rec = controller_step(ControllerState(np.zeros(1)), np.array([1.5, 0.0, 0.0]), S, cfg)
    assert rec.softened
    assert rec.qp_status == "optimal_softened"
    assert state.u[0] == pytest.approx(-0.1)


def test_qp_failure_when_softening_fails(monkeypatch):
    def always_infeasible(problem, max_iter=None):
        return QpSolution(np.zeros(problem.n_vars), (), np.inf, INFEASIBLE, np.zeros(problem.n_rows))

    monkeypatch.setattr(ctl, "solve_qp", always_infeasible)
    cfg = ControllerConfig(0.5, 1.0, ObjectiveSpec.tracking(0, 0, pcc_rows=(0, 1)), unbounded(1, 2))
    with pytest.raises(QpFailure):
        controller_step(ControllerState(np.zeros(1)), np.zeros(2), np.ones((2, 1)), cfg)


def test_count_violations_tolerance():
    limits = ConstraintSpec(np.zeros(0), np.zeros(0), np.array([0.95, 0.95]), np.array([1.05, 1.05]))
    assert count_violations(np.array([0.94999, 1.05]), limits) == 0
    assert count_violations(np.array([0.9498, 1.06]), limits) == 2


def test_frozen_policy_accepted():
    cfg = ControllerConfig(0.5, 1.0, ObjectiveSpec.tracking(0, 0), unbounded(1, 2), sensitivity_policy=FROZEN)
    assert cfg.sensitivity_policy == FROZEN
    with pytest.raises(ParameterError):
        ControllerConfig(0.5, 1.0, ObjectiveSpec.tracking(0, 0), unbounded(1, 2), sensitivity_policy="x")
    assert ObjectiveSpec.tracking(1, 2).kind == TRACKING
