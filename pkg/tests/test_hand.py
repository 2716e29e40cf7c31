"""Whole hand: mounts, FK/IK assembly, thumb, coupled knuckle limits."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from linkhand.finger import FingerJointState, TravelExceeded, solve_dip_flex
from linkhand.hand import (DIGITS, FINGERS, KEYPOINT_LABELS, HandJointState,
                           ThumbActuatorState, clamp_command,
                           coupled_mcp_limit, hand_fk, hand_fk_from_actuators,
                           hand_ik, thumb_fk, thumb_ik,
                           thumb_transmission_residuals)

from conftest import sample_hand_state, sample_joint_state


def test_thumb_abduction_range_is_interface_constant(hand_geometry):
    lo, hi = hand_geometry.thumb_abduction_range
    assert abs(lo - math.radians(-4.0)) < 1e-12
    assert abs(hi - math.radians(90.0)) < 1e-12


def test_hand_fk_labels_fixed(hand_geometry):
    pts = hand_fk(HandJointState.rest(), hand_geometry)
    assert set(pts) == set(KEYPOINT_LABELS)
    for v in pts.values():
        assert np.all(np.isfinite(v))


def test_hand_fk_rest_matches_mounts(hand_geometry):
    pts = hand_fk(HandJointState.rest(), hand_geometry)
    for digit in DIGITS:
        rot, t = hand_geometry.mounts[digit]
        fg = hand_geometry.digits[digit]
        np.testing.assert_allclose(pts[f"{digit}_mcp"],
                                   rot @ fg.mcp_center + t, atol=1e-12)


def test_remounting_translates_keypoints(hand_geometry):
    rng = np.random.default_rng(31)
    q = sample_hand_state(hand_geometry, rng)
    base = hand_fk(q, hand_geometry)
    import copy
    shifted = copy.deepcopy(hand_geometry)
    offset = np.array([0.01, -0.02, 0.03])
    rot, t = shifted.mounts["ring"]
    shifted.mounts["ring"] = (rot, t + offset)
    moved = hand_fk(q, shifted)
    for kp in ("mcp", "pip", "dip", "tip"):
        np.testing.assert_allclose(moved[f"ring_{kp}"],
                                   base[f"ring_{kp}"] + offset, atol=1e-12)
        np.testing.assert_allclose(moved[f"index_{kp}"],
                                   base[f"index_{kp}"], atol=1e-15)


def test_hand_ik_zero_pose(hand_geometry):
    acts = hand_ik(HandJointState.rest(), hand_geometry)
    for digit in DIGITS:
        np.testing.assert_allclose(acts[digit].as_array(), 0.0, atol=1e-9)


def test_hand_round_trip(hand_geometry):
    rng = np.random.default_rng(32)
    for _ in range(20):
        q = sample_hand_state(hand_geometry, rng)
        acts = hand_ik(q, hand_geometry)
        q_back = hand_fk_from_actuators(acts, hand_geometry,
                                        warm=q.digits)
        assert np.max(np.abs(q.as_array() - q_back.as_array())) < 1e-8


def test_hand_ik_workers_deterministic(hand_geometry):
    rng = np.random.default_rng(33)
    q = sample_hand_state(hand_geometry, rng)
    ref = hand_ik(q, hand_geometry, workers=1)
    for workers in (2, 4, 8):
        out = hand_ik(q, hand_geometry, workers=workers)
        assert list(out) == list(ref)
        for digit in DIGITS:
            assert out[digit].as_array().tobytes() \
                == ref[digit].as_array().tobytes()


def test_hand_ik_travel_exceeded_names_digit(hand_geometry):
    q = HandJointState.rest()
    q.digits["middle"] = FingerJointState(0.0, 3.0, 0.2, 0.0)
    with pytest.raises(TravelExceeded, match="middle"):
        hand_ik(q, hand_geometry)


def test_thumb_round_trip(hand_geometry):
    fg = hand_geometry.digits["thumb"]
    rng = np.random.default_rng(34)
    for _ in range(100):
        q = sample_joint_state(fg, rng)
        d = thumb_ik(q, fg)
        q_back = thumb_fk(d, fg, warm=q)
        assert np.max(np.abs(q.as_array() - q_back.as_array())) < 1e-8
        res = thumb_transmission_residuals(q_back, d, fg)
        assert max(abs(v) for v in res.values()) <= 1e-9


def test_thumb_abduction_is_direct_drive(hand_geometry):
    fg = hand_geometry.digits["thumb"]
    rng = np.random.default_rng(35)
    for _ in range(20):
        q = sample_joint_state(fg, rng)
        d = thumb_ik(q, fg)
        assert abs(d.abduction - q.spread) < 1e-12


def test_coupled_limit_tapers_to_zero(hand_geometry):
    limits = hand_geometry.coupled_limits
    for digit in FINGERS:
        half, q2_max = limits.entries[digit]
        lo, hi = coupled_mcp_limit(q2_max, limits, digit)
        assert lo == 0.0 and hi == 0.0
        lo, hi = coupled_mcp_limit(0.0, limits, digit)
        assert abs(hi - half) < 1e-12 and abs(lo + half) < 1e-12
        lo, hi = coupled_mcp_limit(0.5 * q2_max, limits, digit)
        assert abs(hi - 0.5 * half) < 1e-12


def test_coupled_limit_monotone_non_increasing(hand_geometry):
    limits = hand_geometry.coupled_limits
    for digit in FINGERS:
        _, q2_max = limits.entries[digit]
        grid = np.linspace(0.0, q2_max, 40)
        halves = [limits.half_range(digit, v) for v in grid]
        assert all(a >= b - 1e-15 for a, b in zip(halves, halves[1:]))
        assert all(h >= 0.0 for h in halves)


def test_clamp_full_flexion_zeroes_abduction(hand_geometry):
    for digit in FINGERS:
        fg = hand_geometry.digits[digit]
        q = HandJointState.rest()
        q.digits[digit] = FingerJointState(0.3, float(fg.q_upper[1]), 0.2,
                                           0.0)
        clamped = clamp_command(q, hand_geometry)
        assert clamped.digits[digit].spread == 0.0


def test_clamp_feasible_passthrough(hand_geometry):
    rng = np.random.default_rng(36)
    q = sample_hand_state(hand_geometry, rng)
    again = clamp_command(q, hand_geometry)
    assert np.max(np.abs(q.as_array() - again.as_array())) < 1e-12


def test_clamp_idempotent_on_random_commands(hand_geometry):
    rng = np.random.default_rng(37)
    for _ in range(200):
        raw = rng.uniform(-2.5, 2.5, 20)
        once = clamp_command(HandJointState.from_array(raw), hand_geometry)
        twice = clamp_command(once, hand_geometry)
        assert once.as_array().tobytes() == twice.as_array().tobytes()


def test_clamp_output_within_coupled_interval(hand_geometry):
    rng = np.random.default_rng(38)
    for _ in range(200):
        raw = rng.uniform(-2.5, 2.5, 20)
        out = clamp_command(HandJointState.from_array(raw), hand_geometry)
        for digit in FINGERS:
            s = out.digits[digit]
            lo, hi = coupled_mcp_limit(s.mcp_flex,
                                       hand_geometry.coupled_limits, digit)
            assert lo - 1e-12 <= s.spread <= hi + 1e-12


def test_clamp_keeps_coupling_consistent(hand_geometry):
    rng = np.random.default_rng(39)
    raw = rng.uniform(-2.5, 2.5, 20)
    out = clamp_command(HandJointState.from_array(raw), hand_geometry)
    for digit in DIGITS:
        s = out.digits[digit]
        q4 = solve_dip_flex(s.pip_flex, hand_geometry.digits[digit])
        assert abs(s.dip_flex - q4) < 1e-12


@settings(deadline=None, max_examples=50)
@given(st.lists(st.floats(-3.0, 3.0, allow_nan=False), min_size=20,
                max_size=20))
def test_clamp_idempotence_property(hand_geometry, raw):
    once = clamp_command(HandJointState.from_array(np.array(raw)),
                         hand_geometry)
    twice = clamp_command(once, hand_geometry)
    assert once.as_array().tobytes() == twice.as_array().tobytes()


def test_thumb_takes_no_coupled_entry(hand_geometry):
    assert "thumb" not in hand_geometry.coupled_limits.entries
