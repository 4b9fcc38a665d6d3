import numpy as np
import pytest

from src.core.config import GapConfig
from src.core.errors import NumericDomainError
from src.navigation.gap_detect import (
    SENTINEL_KEY,
    AgentPoint,
    Gap,
    detect_gaps,
    gap_conditions,
    gap_goal,
    inflate,
    sentinel_gap,
    tangent_points,
)
from src.navigation.world_sim import frozen_array

PARAMS = GapConfig(r_ins=0.1, theta_thre=0.3, virtual_interval=0.8)


def polar(bearing, distance):
    return distance * np.array([np.cos(bearing), np.sin(bearing)])


def angle_gap(a, b):
    """兩角度之間的最小差（考慮 2π 週期）"""
    d = np.mod(a - b, 2 * np.pi)
    return min(d, 2 * np.pi - d)


def two_agent_layout(separation_width=0.5, near=0.5, tangent_range_step=0.3, r=0.1):
    """兩個 agent：間隙寬度與距離差由參數決定，A 在較大方位角"""
    near_tangent = np.sqrt(near**2 - r**2)
    far = np.hypot(near_tangent + tangent_range_step, r)
    half_a, half_b = np.arcsin(r / near), np.arcsin(r / far)
    bearing_b = 0.0
    bearing_a = separation_width + half_a + half_b
    return [AgentPoint(0, polar(bearing_a, near)), AgentPoint(1, polar(bearing_b, far))]


# ========================================
# 切點
# ========================================

def test_tangent_points_on_axis():
    left, right = tangent_points((1.0, 0.0), 0.1)
    assert left[0] == pytest.approx(0.10017, abs=1e-5)
    assert right[0] == pytest.approx(-0.10017, abs=1e-5)
    assert left[1] == pytest.approx(0.99499, abs=1e-5)
    assert right[1] == pytest.approx(left[1])


def test_tangent_points_off_axis():
    left, right = tangent_points((0.5, 0.5), 0.1)
    half = np.arcsin(0.1 / np.hypot(0.5, 0.5))
    assert half == pytest.approx(0.14189, abs=1e-5)
    assert left[0] == pytest.approx(np.pi / 4 + half)
    assert right[0] == pytest.approx(np.pi / 4 - half)


def test_tangent_points_collapse_for_tiny_radius():
    left, right = tangent_points((0.3, 0.4), 1e-12)
    bearing = np.arctan2(0.4, 0.3)
    assert left[0] == pytest.approx(bearing, abs=1e-9)
    assert right[0] == pytest.approx(bearing, abs=1e-9)
    assert left[1] == pytest.approx(0.5)


def test_tangent_points_wrap_near_pi():
    left, right = tangent_points((-1.0, 1e-3), 0.1)
    assert -np.pi < left[0] <= np.pi
    assert -np.pi < right[0] <= np.pi
    assert angle_gap(left[0], right[0]) == pytest.approx(2 * np.arcsin(0.1 / np.hypot(1.0, 1e-3)), abs=1e-12)


def test_tangent_points_inside_radius_raises():
    with pytest.raises(NumericDomainError):
        tangent_points((0.05, 0.0), 0.1)


def test_inflate_flags_agents_inside_radius():
    agents = [AgentPoint(0, np.array([0.05, 0.0])), AgentPoint(1, np.array([0.5, 0.0]))]
    result = inflate(agents, 0.1)
    assert result.flagged_ids == (0,)
    assert [a.agent_id for a in result] == [1]


def test_inflate_skips_agents_beyond_range():
    agents = [AgentPoint(0, np.array([0.5, 0.0])), AgentPoint(1, np.array([0.25, 0.0]))]
    result = inflate(agents, 0.06, max_range=0.2)
    assert [a.agent_id for a in result] == [1]


def test_inflate_accepts_per_agent_radius():
    agents = [AgentPoint(7, np.array([0.5, 0.0])), AgentPoint(9, np.array([0.0, 0.5]))]
    result = inflate(agents, {7: 0.1, 9: 0.2}, origin=(0.0, 0.0))
    assert [a.inflation_radius for a in result] == [0.1, 0.2]


# ========================================
# 間隙偵測
# ========================================

def test_gap_conditions():
    assert gap_conditions(0.3, 0.5, r_ins=0.1, theta_thre=0.3) == (True, True)
    assert gap_conditions(0.2, 0.3, r_ins=0.1, theta_thre=0.3) == (False, False)


def test_detects_gap_between_separated_agents():
    gaps = detect_gaps(inflate(two_agent_layout(), 0.1), PARAMS, d_max=1.0, goal=(0.0, 1.0))
    between = [g for g in gaps if g.parent_ids == (0, 1)]
    assert len(between) == 1
    gap = between[0]
    assert gap.gap_key == "a0|a1"
    assert gap.angle_diff == pytest.approx(0.5)
    assert gap.range_diff == pytest.approx(0.3)
    assert gap.width == pytest.approx(0.5)
    assert gap.status.value == "open"


def test_narrow_angular_separation_is_not_a_gap():
    agents = two_agent_layout(separation_width=0.1)
    gaps = detect_gaps(inflate(agents, 0.1), PARAMS, d_max=1.0, goal=(0.0, 1.0))
    assert not [g for g in gaps if g.parent_ids == (0, 1)]


def test_equal_ranges_fail_both_mode_but_pass_either_mode():
    agents = two_agent_layout(tangent_range_step=0.0)
    both = detect_gaps(inflate(agents, 0.1), PARAMS, d_max=1.0, goal=(0.0, 1.0))
    assert not [g for g in both if g.parent_ids == (0, 1)]

    either = GapConfig(r_ins=0.1, theta_thre=0.3, gap_condition_mode="either")
    gaps = detect_gaps(inflate(agents, 0.1), either, d_max=1.0, goal=(0.0, 1.0))
    assert [g for g in gaps if g.parent_ids == (0, 1)]


@pytest.mark.parametrize("n_agents", [0, 1])
def test_fewer_than_two_agents_give_sentinel(n_agents):
    agents = [AgentPoint(0, np.array([0.5, 0.0]))][:n_agents]
    gaps = detect_gaps(inflate(agents, 0.1), PARAMS, d_max=0.2, goal=(0.0, 1.0))
    assert len(gaps) == 1
    assert gaps[0].sentinel and gaps[0].gap_key == SENTINEL_KEY
    np.testing.assert_allclose(gaps[0].goal, (0.0, 0.2), atol=1e-15)


def test_wide_gap_is_subdivided_by_virtual_agents(rng):
    for _ in range(50):
        n = int(rng.integers(2, 8))
        agents = [AgentPoint(i, polar(rng.uniform(-np.pi, np.pi), rng.uniform(0.15, 0.6))) for i in range(n)]
        gaps = detect_gaps(inflate(agents, 0.06), GapConfig(), d_max=0.6, goal=(0.0, 1.0))
        assert not any(g.sentinel for g in gaps)
        by_parent = {}
        for gap in gaps:
            by_parent.setdefault(gap.parent_ids, []).append(gap)
        for parent, members in by_parent.items():
            expected = int(np.floor(members[0].angle_diff / 0.8)) + 1
            assert len(members) == expected
            assert sum(g.width for g in members) == pytest.approx(members[0].angle_diff, abs=1e-9)


def test_gap_segment_clears_flanking_agents():
    agents = two_agent_layout()
    inflated = inflate(agents, 0.1)
    gap = next(g for g in detect_gaps(inflated, PARAMS, d_max=1.0, goal=(0.0, 1.0)) if g.parent_ids == (0, 1))
    right, left = gap.endpoints()
    for t in np.linspace(0.0, 1.0, 101):
        point = (1 - t) * right + t * left
        for agent in agents:
            assert np.hypot(*(point - agent.position)) >= 0.1 - 1e-9


def test_detection_is_rotation_equivariant(rng):
    for _ in range(20):
        n = int(rng.integers(2, 6))
        positions = [polar(rng.uniform(-np.pi, np.pi), rng.uniform(0.15, 0.6)) for _ in range(n)]
        alpha = rng.uniform(-np.pi, np.pi)
        c, s = np.cos(alpha), np.sin(alpha)
        rotation = np.array([[c, -s], [s, c]])

        original = detect_gaps(inflate([AgentPoint(i, p) for i, p in enumerate(positions)], 0.06),
                               GapConfig(), d_max=0.6, goal=(0.0, 1.0))
        rotated = detect_gaps(inflate([AgentPoint(i, rotation @ p) for i, p in enumerate(positions)], 0.06),
                              GapConfig(), d_max=0.6, goal=(0.0, 1.0))
        assert len(original) == len(rotated)
        for gap in original:
            match = [
                g for g in rotated
                if angle_gap(g.right[0], gap.right[0] + alpha) < 1e-9
                and angle_gap(g.left[0], gap.left[0] + alpha) < 1e-9
            ]
            assert len(match) == 1
            assert match[0].range_diff == pytest.approx(gap.range_diff, abs=1e-12)
            assert match[0].parent_ids == gap.parent_ids


def test_virtual_gap_keys_follow_agent_pair(rng):
    for _ in range(20):
        n = int(rng.integers(2, 6))
        positions = [polar(rng.uniform(-np.pi, np.pi), rng.uniform(0.15, 0.6)) for _ in range(n)]
        alpha = rng.uniform(-np.pi, np.pi)
        c, s = np.cos(alpha), np.sin(alpha)
        rotation = np.array([[c, -s], [s, c]])

        original = detect_gaps(inflate([AgentPoint(i, p) for i, p in enumerate(positions)], 0.06),
                               GapConfig(), d_max=0.6, goal=(0.0, 1.0))
        rotated = detect_gaps(inflate([AgentPoint(i, rotation @ p) for i, p in enumerate(positions)], 0.06),
                              GapConfig(), d_max=0.6, goal=(0.0, 1.0))
        assert sorted(g.gap_key for g in original) == sorted(g.gap_key for g in rotated)
        for gap in original:
            pair = "v{}-{}.".format(*gap.parent_ids)
            for end in gap.gap_key.split("|"):
                assert end.startswith("a") or end.startswith(pair)


# ========================================
# 間隙目標
# ========================================

def _gap(left, right, origin=(0.0, 0.0)):
    return Gap(gap_key="test", right=right, left=left, flanking_ids=(0, 1), origin=frozen_array(origin),
               range_diff=0.0, angle_diff=float(np.mod(right[0] - left[0], 2 * np.pi)))


def test_gap_goal_is_on_bisector_when_goal_outside():
    gap = _gap(left=(0.2, 0.15), right=(0.8, 0.15))
    goal = gap_goal(gap, polar(-1.0, 1.0))
    np.testing.assert_allclose(goal, polar(0.5, 0.15), atol=1e-12)


def test_gap_goal_symmetric_straddle_has_no_bias():
    gap = _gap(left=(-0.3, 0.15), right=(0.3, 0.15))
    np.testing.assert_allclose(gap_goal(gap, (1.0, 0.0)), (0.15, 0.0), atol=1e-12)


def test_gap_goal_bends_toward_goal_bearing():
    gap = _gap(left=(-0.3, 0.15), right=(0.3, 0.15))
    goal = gap_goal(gap, polar(0.2, 1.0), goal_bias=0.5)
    assert np.arctan2(goal[1], goal[0]) == pytest.approx(0.1)


def test_gap_goal_reach_limited_by_goal_distance():
    gap = _gap(left=(-0.3, 0.15), right=(0.3, 0.15))
    goal = gap_goal(gap, (0.05, 0.0))
    assert np.hypot(*goal) == pytest.approx(0.05)


def test_sentinel_goal_is_clamped_global_goal():
    gap = sentinel_gap((0.0, 0.0), (0.0, 1.0), 0.2)
    np.testing.assert_allclose(gap.goal, (0.0, 0.2), atol=1e-15)
    near = sentinel_gap((0.0, 0.0), (0.0, 0.1), 0.2)
    np.testing.assert_allclose(near.goal, (0.0, 0.1), atol=1e-15)
