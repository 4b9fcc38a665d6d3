import numpy as np
import pytest
from scipy.stats import chi2

from src.core.config import ConfidenceParams
from src.core.errors import NumericDomainError
from src.navigation.estimation import AgentEstimate, AgentPrediction, predict
from src.navigation.uncertainty import (
    build_schedule,
    build_schedules,
    chi2_bound,
    combine_replan_step,
    margin,
    zero_schedule,
)
from src.navigation.world_sim import frozen_array


def prediction_with(covariances, agent_id=0):
    covariances = np.asarray(covariances, dtype=float)
    horizon = len(covariances)
    return AgentPrediction(
        agent_id=agent_id,
        origin=frozen_array((0.0, 0.0)),
        origin_covariance=frozen_array(np.zeros((2, 2))),
        positions=frozen_array(np.zeros((horizon, 2))),
        covariances=frozen_array(covariances),
    )


# ========================================
# chi2_bound
# ========================================

def test_chi2_bound_closed_form_values():
    assert chi2_bound(0.01) == pytest.approx(9.21034, abs=1e-5)
    assert chi2_bound(0.05) == pytest.approx(5.99146, abs=1e-5)


@pytest.mark.parametrize("epsilon", [1e-6, 1e-3, 0.01, 0.05, 0.2, 0.5, 0.9])
def test_chi2_bound_matches_scipy(epsilon):
    assert chi2_bound(epsilon) == pytest.approx(chi2.ppf(1 - epsilon, 2), abs=1e-9)


@pytest.mark.parametrize("epsilon", [0.001, 0.01, 0.05, 0.1])
def test_chi2_bound_two_dof_is_exact(epsilon):
    assert abs(chi2_bound(epsilon) - (-2.0 * np.log(epsilon))) < 1e-12


def test_chi2_bound_other_dof_uses_scipy():
    assert chi2_bound(0.05, dof=4) == pytest.approx(chi2.ppf(0.95, 4))


def test_chi2_bound_near_one_is_tiny():
    assert 0.0 < chi2_bound(1 - 1e-12) < 1e-10


@pytest.mark.parametrize("epsilon", [0.0, 1.0, -0.1, 1.5])
def test_chi2_bound_rejects_out_of_range(epsilon):
    with pytest.raises(NumericDomainError):
        chi2_bound(epsilon)


# ========================================
# margin
# ========================================

def test_margin_isotropic():
    assert margin(np.eye(2) * 0.01**2, chi2_bound(0.01)) == pytest.approx(0.02 * np.sqrt(-2 * np.log(0.01)), rel=1e-12)
    assert margin(np.eye(2) * 0.01**2, chi2_bound(0.01)) == pytest.approx(0.060701, abs=1e-5)


def test_margin_anisotropic():
    assert margin(np.diag([4e-4, 1e-4]), chi2_bound(0.01)) == pytest.approx(0.091051, abs=1e-5)


def test_margin_zero_covariance():
    assert margin(np.zeros((2, 2)), chi2_bound(0.01)) == 0.0


def test_margin_rejects_negative_eigenvalue():
    with pytest.raises(NumericDomainError):
        margin(np.diag([1e-4, -1e-4]), 9.2)


def test_margin_rejects_wrong_shape():
    with pytest.raises(NumericDomainError):
        margin(np.eye(3), 9.2)


def test_margin_rotation_invariant_and_scales_with_sqrt(rng):
    k = chi2_bound(0.01)
    for _ in range(20):
        M = rng.normal(size=(2, 2))
        sigma = M @ M.T * 1e-4
        theta = rng.uniform(-np.pi, np.pi)
        R = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        assert margin(R @ sigma @ R.T, k) == pytest.approx(margin(sigma, k), rel=1e-9)
        assert margin(4.0 * sigma, k) == pytest.approx(2.0 * margin(sigma, k), rel=1e-9)


# ========================================
# 排程
# ========================================

def test_schedule_without_uncertainty():
    schedule = build_schedule(prediction_with(np.zeros((20, 2, 2))), ConfidenceParams(), r_ins=0.06)
    np.testing.assert_allclose(schedule.d_safe, 0.06)
    assert schedule.replan_step == 20
    assert not schedule.capped


def test_schedule_caps_at_first_crossing():
    params = ConfidenceParams(epsilon=0.01)
    k = chi2_bound(0.01)
    steps = np.arange(1, 21)
    # r^i = 0.009·i：第 7 步首次達到 r_ins = 0.06
    sigma = (0.009 * steps / (2.0 * np.sqrt(k))) ** 2
    schedule = build_schedule(prediction_with([s * np.eye(2) for s in sigma]), params, r_ins=0.06)

    assert schedule.replan_step == 7
    assert schedule.capped
    np.testing.assert_allclose(schedule.margins, 0.009 * steps, rtol=1e-9)
    np.testing.assert_allclose(schedule.d_safe[6:], 0.12)
    np.testing.assert_allclose(schedule.d_safe[:6], 0.06 + 0.009 * steps[:6], rtol=1e-9)
    assert np.all(np.diff(schedule.d_safe) >= 0)


def test_schedule_explicit_cap():
    sigma = [np.eye(2) * 1e-2] * 5
    schedule = build_schedule(prediction_with(sigma), ConfidenceParams(d_safe_max=0.3), r_ins=0.06)
    assert schedule.d_safe.max() == pytest.approx(0.3)
    assert schedule.replan_step == 1


def test_fresh_track_replans_every_step(make_estimate):
    # 預設量測雜訊下，剛建立的 track 第一步就觸及上限
    estimate = make_estimate(0, (0.1, 0.0), position_var=1e-4, velocity_var=4e-4)
    schedule = build_schedule(predict(estimate, 20), ConfidenceParams(), r_ins=0.06)
    assert schedule.replan_step == 1


def test_d_safe_at_clamps_index():
    schedule = zero_schedule(5, 0.06)
    assert schedule.d_safe_at(0) == 0.06
    assert schedule.d_safe_at(99) == 0.06


def test_combine_replan_step_takes_earliest(make_estimate):
    slow = make_estimate(0, (0.1, 0.0), position_var=1e-6, velocity_var=1e-8)
    fast = make_estimate(1, (0.0, 0.1), position_var=1e-4, velocity_var=4e-4)
    schedules = build_schedules([predict(slow, 20), predict(fast, 20)], ConfidenceParams(), r_ins=0.06)
    assert set(schedules) == {0, 1}
    assert combine_replan_step(schedules, 20) == min(s.replan_step for s in schedules.values())
    assert combine_replan_step({}, 20) == 20


def test_margin_covers_propagated_error():
    rng = np.random.default_rng(5)
    P0 = np.diag([1e-4, 4e-4, 1e-6, 4e-6])
    estimate = AgentEstimate(0, frozen_array(np.zeros(4)), frozen_array(P0), 0)
    prediction = predict(estimate, 20)
    k = chi2_bound(0.01)
    errors = rng.multivariate_normal(np.zeros(4), P0, size=10_000)
    for i in range(1, 21):
        position_error = errors[:, :2] + i * errors[:, 2:]
        bound = margin(prediction.covariance_at(i), k)
        miss_rate = np.mean(np.hypot(*position_error.T) > bound)
        assert miss_rate <= 0.02
