import numpy as np
import pytest

from src.core.config import ControllerConfig, NavigationConfig, SafetyIndexParams
from src.core.errors import SingularGeometryError
from src.navigation.ssa_ctrl import (
    ControlBounds,
    SafeController,
    SsaConstraint,
    build_constraints,
    control_bounds,
    reference_control,
    safe_control,
    safety_index,
)
from src.navigation.world_sim import RobotModel, RobotState, frozen_array, step_robot

PARAMS = SafetyIndexParams(d_min=0.15, k_grad=1.0, eta=0.5)
GAINS = ControllerConfig()


def di_robot(position=(0.0, 0.0), velocity=(0.0, 0.0)):
    velocity = np.asarray(velocity, dtype=float)
    speed = float(np.hypot(*velocity))
    heading = float(np.arctan2(velocity[1], velocity[0])) if speed > 0 else 0.0
    return RobotState(position=frozen_array(position), heading=heading, linear_speed=speed)


def unicycle(position=(0.0, 0.0), heading=0.0, speed=0.0, omega=0.0):
    return RobotState(position=frozen_array(position), heading=heading, linear_speed=speed,
                      angular_speed=omega, model=RobotModel.SECOND_ORDER_UNICYCLE)


def polar(bearing, distance):
    return distance * np.array([np.cos(bearing), np.sin(bearing)])


def halfspace(lg, lf, phi=0.0, eta=0.5, agent_id=0):
    """lf + lg·u ≤ −η·φ"""
    return SsaConstraint(agent_id, phi, lf, np.asarray(lg, dtype=float), eta)


# ========================================
# Safety index
# ========================================

def test_phi_approaching_agent_is_unsafe():
    phi, _, _ = safety_index(di_robot(velocity=(0.1, 0.0)), (0.2, 0.0), (0.0, 0.0), PARAMS)
    assert phi == pytest.approx(0.0825)


def test_phi_separating_far_agent_is_safe():
    phi, _, _ = safety_index(di_robot(velocity=(-0.1, 0.0)), (0.5, 0.0), (0.0, 0.0), PARAMS)
    assert phi == pytest.approx(0.0225 - 0.25 - 0.1)
    assert phi < 0


def test_phi_static_pair_reduces_to_distance_term():
    phi, lf, lg = safety_index(di_robot(), (0.3, 0.4), (0.0, 0.0), PARAMS)
    assert phi == pytest.approx(0.15**2 - 0.25)
    assert lf == pytest.approx(0.0)
    np.testing.assert_allclose(lg, -np.array([-0.3, -0.4]) / 0.5)


def test_coincident_centres_raise():
    with pytest.raises(SingularGeometryError):
        safety_index(di_robot(position=(0.1, 0.1)), (0.1, 0.1), (0.0, 0.0), PARAMS)


def test_d_min_is_required():
    with pytest.raises(ValueError):
        safety_index(di_robot(), (0.3, 0.0), (0.0, 0.0), SafetyIndexParams())


def _central_difference(make_state, agent_position, agent_velocity, h=1e-5):
    """φ 沿系統軌跡的時間導數（中央差分）"""
    agent_position = np.asarray(agent_position, dtype=float)
    agent_velocity = np.asarray(agent_velocity, dtype=float)
    forward = safety_index(make_state(h), agent_position + h * agent_velocity, agent_velocity, PARAMS)[0]
    backward = safety_index(make_state(-h), agent_position - h * agent_velocity, agent_velocity, PARAMS)[0]
    return (forward - backward) / (2 * h)


def test_double_integrator_lie_derivatives_match_finite_difference(rng):
    for _ in range(50):
        p = rng.uniform(-0.2, 0.2, size=2)
        v = rng.uniform(-0.01, 0.01, size=2)
        o = p + polar(rng.uniform(-np.pi, np.pi), rng.uniform(0.05, 0.15))
        w = rng.uniform(-0.01, 0.01, size=2)
        u = rng.uniform(-2e-3, 2e-3, size=2)

        phi, lf, lg = safety_index(di_robot(p, v), o, w, PARAMS)
        numeric = _central_difference(lambda h: di_robot(p + h * v, v + h * u), o, w)
        assert numeric == pytest.approx(lf + lg @ u, abs=1e-9)


def test_unicycle_lie_derivatives_match_finite_difference(rng):
    for _ in range(50):
        p = rng.uniform(-0.2, 0.2, size=2)
        theta = rng.uniform(-np.pi, np.pi)
        speed = rng.uniform(0.005, 0.015)
        omega = rng.uniform(-0.1, 0.1)
        o = p + polar(rng.uniform(-np.pi, np.pi), rng.uniform(0.05, 0.15))
        w = rng.uniform(-0.01, 0.01, size=2)
        u = np.array([rng.uniform(-2e-3, 2e-3), rng.uniform(-0.05, 0.05)])

        def state(h):
            heading = np.array([np.cos(theta), np.sin(theta)])
            return unicycle(p + h * speed * heading, theta + h * omega, speed + h * u[0], omega + h * u[1])

        phi, lf, lg = safety_index(unicycle(p, theta, speed, omega), o, w, PARAMS)
        assert lg[1] == 0.0
        numeric = _central_difference(state, o, w)
        assert numeric == pytest.approx(lf + lg @ u, abs=1e-9)


def test_build_constraints_emits_only_nonnegative_phi(make_estimate):
    estimates = [make_estimate(0, (0.1, 0.0)), make_estimate(1, (0.5, 0.0)), make_estimate(2, (0.0, 0.15))]
    constraints, phis = build_constraints(di_robot(), estimates, PARAMS)
    assert len(phis) == 3
    # d = d_min 時 φ = 0，仍要加入約束
    assert phis[2] == pytest.approx(0.0, abs=1e-15)
    assert [c.agent_id for c in constraints] == [0, 2]
    assert all(c.eta == 0.5 for c in constraints)


# ========================================
# 參考控制器
# ========================================

def test_reference_control_at_rest_on_waypoint_is_zero():
    np.testing.assert_array_equal(reference_control(di_robot((0.1, 0.1)), (0.1, 0.1), GAINS), (0.0, 0.0))


def test_reference_control_points_toward_waypoint():
    u = reference_control(di_robot(), (0.1, 0.0), GAINS, saturate=False)
    np.testing.assert_allclose(u, (0.03, 0.0))
    saturated = reference_control(di_robot(), (0.1, 0.0), GAINS)
    np.testing.assert_allclose(saturated, (2e-3, 0.0))


def test_reference_control_damps_velocity():
    u = reference_control(di_robot(velocity=(0.02, 0.0)), (0.1, 0.0), GAINS, saturate=False)
    np.testing.assert_allclose(u, (0.3 * 0.1 - 0.8 * 0.02, 0.0))


def test_unicycle_reference_control_aligned():
    u = reference_control(unicycle(), (0.1, 0.0), GAINS)
    np.testing.assert_allclose(u, (2e-3, 0.0))


def test_unicycle_reference_control_turns_toward_waypoint():
    u = reference_control(unicycle(), (0.0, 0.1), GAINS, saturate=False)
    assert u[0] == pytest.approx(0.0)
    assert u[1] == pytest.approx(GAINS.k_heading * np.pi / 2)


def test_control_bounds_per_model():
    di = control_bounds(RobotModel.DOUBLE_INTEGRATOR, GAINS)
    np.testing.assert_allclose(di.upper, (2e-3, 2e-3))
    uni = control_bounds(RobotModel.SECOND_ORDER_UNICYCLE, GAINS)
    np.testing.assert_allclose(uni.upper, (2e-3, 0.05))
    np.testing.assert_allclose(uni.lower, -uni.upper)


# ========================================
# 安全控制 QP
# ========================================

def test_no_constraints_returns_reference():
    result = safe_control((1.0, 2.0), [])
    np.testing.assert_array_equal(result.u, (1.0, 2.0))
    assert result.status == "reference"
    assert not result.fallback


def test_halfspace_projection():
    result = safe_control((1.0, 0.0), [halfspace((1.0, 0.0), lf=0.5)])
    np.testing.assert_allclose(result.u, (-0.5, 0.0), atol=1e-10)
    assert result.status == "optimal"
    assert not result.fallback


def test_out_of_bounds_reference_is_clipped():
    bounds = ControlBounds(np.array([-2e-3, -2e-3]), np.array([2e-3, 2e-3]))
    result = safe_control((0.01, 0.0), [], bounds)
    np.testing.assert_allclose(result.u, (2e-3, 0.0), atol=1e-12)


def test_contradictory_constraints_fall_back():
    # u_x ≤ −1 且 u_x ≥ 2：最小化最大違反量得 u_x = 0.5
    constraints = [halfspace((1.0, 0.0), lf=1.0), halfspace((-1.0, 0.0), lf=2.0)]
    result = safe_control((0.0, 0.0), constraints)
    assert result.fallback
    assert result.status == "fallback"
    np.testing.assert_allclose(result.u, (0.5, 0.0), atol=1e-6)


def test_fallback_respects_bounds():
    bounds = ControlBounds(np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
    constraints = [halfspace((1.0, 0.0), lf=3.0)]
    result = safe_control((0.0, 0.0), constraints, bounds)
    assert result.fallback
    assert bounds.contains(result.u)
    assert result.u[0] == pytest.approx(-1.0, abs=1e-6)


def test_satisfied_reference_is_returned_exactly(rng):
    for _ in range(100):
        u_ref = rng.normal(size=2)
        constraints = []
        for _ in range(3):
            lg = rng.normal(size=2)
            constraints.append(halfspace(lg, lf=float(-lg @ u_ref - rng.uniform(0.0, 1.0))))
        result = safe_control(u_ref, constraints)
        assert result.u is not u_ref
        np.testing.assert_array_equal(result.u, u_ref)


def test_single_constraint_matches_closed_form_projection(rng):
    for _ in range(100):
        u_ref = rng.normal(size=2)
        lg = rng.normal(size=2)
        lf = float(-lg @ u_ref + rng.uniform(0.1, 1.0))
        constraint = halfspace(lg, lf=lf, phi=rng.uniform(0.0, 0.1))
        excess = lf + lg @ u_ref - constraint.rhs
        expected = u_ref - max(excess, 0.0) / (lg @ lg) * lg
        result = safe_control(u_ref, [constraint])
        np.testing.assert_allclose(result.u, expected, atol=1e-9)
        assert constraint.satisfied_by(result.u, tol=1e-9)


def test_feasible_multi_constraint_solution_satisfies_all(rng):
    for _ in range(100):
        u_ref = rng.normal(size=2)
        anchor = rng.normal(size=2)
        constraints = []
        for _ in range(int(rng.integers(1, 5))):
            lg = rng.normal(size=2)
            constraints.append(halfspace(lg, lf=float(-lg @ anchor - rng.uniform(0.0, 0.5))))
        result = safe_control(u_ref, constraints)
        assert not result.fallback
        assert all(c.satisfied_by(result.u, tol=1e-8) for c in constraints)
        # anchor 可行，投影不會比 anchor 更遠
        assert np.linalg.norm(result.u - u_ref) <= np.linalg.norm(anchor - u_ref) + 1e-9


def test_safe_controller_telemetry(make_estimate):
    config = NavigationConfig()
    controller = SafeController(config)
    robot = di_robot(velocity=(0.02, 0.0))
    estimates = [make_estimate(0, (0.09, 0.0)), make_estimate(1, (0.0, 0.19))]
    u_ref = np.array([2e-3, 0.0])
    u, telemetry = controller.filter(robot, estimates, u_ref)
    assert len(telemetry.phi_values) == 2
    assert telemetry.constraint_count == 1
    assert telemetry.deviation == pytest.approx(np.linalg.norm(u - u_ref))
    assert control_bounds(robot.model, config.controller).contains(u, tol=1e-12)
    assert u[0] < u_ref[0]


# ========================================
# 閉迴路：φ 的實際下降量
# ========================================

def _approaching_state(model, rng):
    """d 接近 d_min、徑向速度小的機器人與 agent（agent 在原點）"""
    bearing = rng.uniform(-np.pi, np.pi)
    radial = polar(bearing, 1.0)
    tangential = np.array([-radial[1], radial[0]])
    relative_velocity = rng.uniform(-3e-3, 1e-3) * radial + rng.uniform(-5e-3, 5e-3) * tangential

    theta = rng.uniform(-np.pi, np.pi)
    speed = rng.uniform(0.005, 0.015)
    omega = rng.uniform(-0.1, 0.1) if model is RobotModel.SECOND_ORDER_UNICYCLE else 0.0
    robot = RobotState(position=frozen_array(polar(bearing, rng.uniform(0.145, 0.155))), heading=theta,
                       linear_speed=speed, angular_speed=omega, model=model)
    return robot, robot.velocity - relative_velocity


@pytest.mark.parametrize("model", list(RobotModel))
def test_realized_phi_decrease_satisfies_constraint(model, make_estimate, rng):
    dt = 0.05
    bounds = control_bounds(model, GAINS)
    checked = 0
    for _ in range(600):
        robot, agent_velocity = _approaching_state(model, rng)
        constraints, _ = build_constraints(robot, [make_estimate(0, (0.0, 0.0), agent_velocity)], PARAMS)
        if not constraints:
            continue
        result = safe_control(rng.uniform(bounds.lower, bounds.upper), constraints, bounds)
        if result.fallback:
            continue

        phi = constraints[0].phi
        after = step_robot(robot, result.u, dt=dt, v_max=1.0, omega_max=1.0)
        phi_after, _, _ = safety_index(after, agent_velocity * dt, agent_velocity, PARAMS)
        assert phi_after - phi <= -PARAMS.eta * phi * dt + 1e-4
        checked += 1
    assert checked > 30
