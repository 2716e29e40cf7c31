"""One digit's transmission: residuals, gradients, FK/IK, coupling."""

import math

import numpy as np
import pytest

from linkhand.finger import (ActuatorState, FingerJointState, NoConvergence,
                             OutOfTravel, TravelExceeded,
                             dip_coupling_derivative,
                             dip_gradient, dip_residual, finger_fk, finger_ik,
                             link_keypoints, link_keypoints_jacobian,
                             mcp_jacobians, mcp_residual, pip_fourbar_gradient,
                             pip_fourbar_residual, psu_gradient, psu_residual,
                             solve_dip_flex, transmission_residuals)
from linkhand.solver import numeric_jacobian

from conftest import sample_joint_state


def test_zero_configuration_consistency(hand_geometry):
    for digit, fg in hand_geometry.digits.items():
        rest = fg.validate()
        assert max(abs(v) for v in rest.values()) <= 1e-12, digit


def test_mcp_residual_zero_at_rest(index_geometry):
    r = mcp_residual(0.0, 0.0, ActuatorState(0.0, 0.0, 0.0), index_geometry)
    np.testing.assert_allclose(r, [0.0, 0.0], atol=1e-15)


def test_mcp_jacobians_vs_fd(index_geometry):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        q1, q2 = rng.uniform(-0.3, 0.3), rng.uniform(-0.1, 1.2)
        d = ActuatorState(rng.uniform(-0.01, 0.003),
                          rng.uniform(-0.01, 0.003), 0.0)
        jq, jd = mcp_jacobians(q1, q2, d, index_geometry)
        fd_q = numeric_jacobian(
            lambda x: mcp_residual(x[0], x[1], d, index_geometry),
            [q1, q2])
        fd_d = numeric_jacobian(
            lambda x: mcp_residual(q1, q2,
                                   ActuatorState(x[0], x[1], d.pip),
                                   index_geometry),
            [d.mcp_a, d.mcp_b])
        worst = max(worst, float(np.max(np.abs(jq - fd_q))),
                    float(np.max(np.abs(jd - fd_d))))
    assert worst < 1e-6


def test_pip_fourbar_gradient_vs_fd(index_geometry):
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(100):
        q3 = rng.uniform(-0.05, 1.6)
        alpha = rng.uniform(-1.2, 1.2)
        dq3, dalpha = pip_fourbar_gradient(q3, alpha, index_geometry)
        fd = numeric_jacobian(
            lambda x: np.array([pip_fourbar_residual(x[0], x[1],
                                                     index_geometry)]),
            [q3, alpha])
        worst = max(worst, abs(dq3 - fd[0, 0]), abs(dalpha - fd[0, 1]))
    assert worst < 1e-6


def test_psu_gradient_vs_fd(index_geometry):
    rng = np.random.default_rng(13)
    worst = 0.0
    for _ in range(100):
        alpha = rng.uniform(-1.0, 1.0)
        d3 = rng.uniform(-0.01, 0.003)
        q1, q2 = rng.uniform(-0.3, 0.3), rng.uniform(-0.1, 1.2)
        grads = psu_gradient(alpha, d3, q1, q2, index_geometry)
        fd = numeric_jacobian(
            lambda x: np.array([psu_residual(x[0], x[1], x[2], x[3],
                                             index_geometry)]),
            [alpha, d3, q1, q2])
        worst = max(worst, float(np.max(np.abs(np.asarray(grads) - fd[0]))))
    assert worst < 1e-6


def test_psu_residual_even_in_spread(index_geometry):
    # pushrod points lie in the digit sagittal plane, so the bent-joint
    # residual cannot see the sign of the spread angle
    rng = np.random.default_rng(14)
    for _ in range(50):
        alpha = rng.uniform(-1.0, 1.0)
        d3 = rng.uniform(-0.01, 0.003)
        q1 = rng.uniform(0.0, 0.35)
        q2 = rng.uniform(-0.1, 1.2)
        a = psu_residual(alpha, d3, q1, q2, index_geometry)
        b = psu_residual(alpha, d3, -q1, q2, index_geometry)
        assert abs(a - b) < 1e-15


def test_dip_gradient_vs_fd(index_geometry):
    rng = np.random.default_rng(15)
    worst = 0.0
    for _ in range(100):
        q3 = rng.uniform(-0.05, 1.6)
        q4 = rng.uniform(-0.3, 1.2)
        dq3, dq4 = dip_gradient(q3, q4, index_geometry)
        fd = numeric_jacobian(
            lambda x: np.array([dip_residual(x[0], x[1], index_geometry)]),
            [q3, q4])
        worst = max(worst, abs(dq3 - fd[0, 0]), abs(dq4 - fd[0, 1]))
    assert worst < 1e-6


def test_dip_bisection_oracle(index_geometry):
    # the coupling root agrees with a solver-free bisection on the same
    # bracket
    g = index_geometry
    for q3 in np.linspace(float(g.q_lower[2]) + 0.01,
                          float(g.q_upper[2]) - 0.01, 23):
        q4 = solve_dip_flex(q3, g)
        lo, hi = q4 - 0.2, q4 + 0.2
        flo = dip_residual(q3, lo, g)
        fhi = dip_residual(q3, hi, g)
        assert flo * fhi < 0.0, "bracket must straddle the root"
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            fm = dip_residual(q3, mid, g)
            if flo * fm <= 0.0:
                hi, fhi = mid, fm
            else:
                lo, flo = mid, fm
        assert abs(0.5 * (lo + hi) - q4) < 1e-10


def test_dip_coupling_derivative_matches_curve_slope(index_geometry):
    g = index_geometry
    h = 1e-6
    for q3 in np.linspace(0.05, float(g.q_upper[2]) - 0.05, 15):
        slope = dip_coupling_derivative(q3, g)
        fd = (solve_dip_flex(q3 + h, g) - solve_dip_flex(q3 - h, g)) / (2 * h)
        assert abs(slope - fd) < 1e-5 * max(abs(fd), 1.0)


def test_fk_ik_round_trip(index_geometry):
    rng = np.random.default_rng(16)
    for _ in range(200):
        q = sample_joint_state(index_geometry, rng)
        d = finger_ik(q, index_geometry)
        q_back = finger_fk(d, index_geometry, warm=q)
        assert np.max(np.abs(q.as_array() - q_back.as_array())) < 1e-8
        d_back = finger_ik(q_back, index_geometry, warm=d)
        assert np.max(np.abs(d.as_array() - d_back.as_array())) < 1e-8


def test_fk_emits_coupling_consistent_states(index_geometry):
    rng = np.random.default_rng(17)
    for _ in range(100):
        q = sample_joint_state(index_geometry, rng)
        d = finger_ik(q, index_geometry)
        out = finger_fk(d, index_geometry)
        assert abs(dip_residual(out.pip_flex, out.dip_flex,
                                index_geometry)) <= 1e-9


def test_warm_start_branch_stability(index_geometry):
    # perturbing the warm start inside the basin returns the same branch
    rng = np.random.default_rng(18)
    for _ in range(30):
        q = sample_joint_state(index_geometry, rng, margin=0.1)
        d = finger_ik(q, index_geometry)
        base = finger_fk(d, index_geometry, warm=q).as_array()
        for _ in range(4):
            bumped = FingerJointState(*(q.as_array()[:4]
                                        + rng.uniform(-0.05, 0.05, 4)))
            again = finger_fk(d, index_geometry, warm=bumped).as_array()
            assert np.max(np.abs(base - again)) < 1e-8


def test_transmission_residuals_flag_wrong_pairs(index_geometry):
    rng = np.random.default_rng(19)
    q = sample_joint_state(index_geometry, rng)
    d = finger_ik(q, index_geometry)
    res = transmission_residuals(q, d, index_geometry)
    assert max(abs(v) for v in res.values()) <= 1e-9
    q_wrong = FingerJointState(q.spread + 1e-3, q.mcp_flex, q.pip_flex,
                               q.dip_flex)
    res_wrong = transmission_residuals(q_wrong, d, index_geometry)
    assert max(abs(v) for v in res_wrong.values()) > 1e-9


def test_out_of_travel_named(index_geometry):
    huge = ActuatorState(0.5, 0.0, 0.0)
    with pytest.raises(OutOfTravel, match="mcp_a"):
        finger_fk(huge, index_geometry)


def test_ik_travel_exceeded_or_converges_at_corners(index_geometry):
    # the travel box is the padded image of the joint box, so every corner
    # of the static joint box must be reachable
    g = index_geometry
    for i in range(8):
        q123 = [float(g.q_upper[k]) if (i >> k) & 1 else float(g.q_lower[k])
                for k in range(3)]
        q = FingerJointState(q123[0], q123[1], q123[2],
                             solve_dip_flex(q123[2], g))
        d = finger_ik(q, g)
        assert np.all(d.as_array() >= g.travel_min - 1e-12)
        assert np.all(d.as_array() <= g.travel_max + 1e-12)


def test_keypoints_rest_positions(index_geometry):
    g = index_geometry
    pts = link_keypoints(FingerJointState(0.0, 0.0, 0.0, 0.0), g)
    np.testing.assert_allclose(pts[0], g.mcp_center, atol=1e-15)
    expected_pip = g.mcp_center + g.pip_center
    np.testing.assert_allclose(pts[1], expected_pip, atol=1e-15)
    expected_dip = expected_pip + g.dip_center
    np.testing.assert_allclose(pts[2], expected_dip, atol=1e-15)
    np.testing.assert_allclose(pts[3], expected_dip + g.fingertip, atol=1e-15)


def test_tip_distance_invariant_under_spread(index_geometry):
    rng = np.random.default_rng(20)
    for _ in range(25):
        q2, q3 = rng.uniform(0.0, 1.2), rng.uniform(0.0, 1.4)
        q4 = solve_dip_flex(q3, index_geometry)
        lengths = []
        for q1 in (-0.3, 0.0, 0.2):
            pts = link_keypoints(FingerJointState(q1, q2, q3, q4),
                                 index_geometry)
            lengths.append(float(np.linalg.norm(pts[3] - pts[0])))
        assert max(lengths) - min(lengths) < 1e-12


def _chain_keypoints(q, g):
    """Transform-chain reference: explicit homogeneous composition."""
    def rot_y(a):
        c, s = math.cos(a), math.sin(a)
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])

    def rot_z(a):
        c, s = math.cos(a), math.sin(a)
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])

    knuckle = rot_y(q.spread) @ rot_z(q.mcp_flex)
    mcp = np.asarray(g.mcp_center)
    pip = mcp + knuckle @ g.pip_center
    middle = knuckle @ rot_z(q.pip_flex)
    dip = pip + middle @ g.dip_center
    distal = middle @ rot_z(q.dip_flex)
    tip = dip + distal @ g.fingertip
    return np.stack([mcp, pip, dip, tip])


def test_keypoints_match_transform_chain(index_geometry):
    rng = np.random.default_rng(21)
    for _ in range(100):
        q = sample_joint_state(index_geometry, rng)
        pts = link_keypoints(q, index_geometry)
        ref = _chain_keypoints(q, index_geometry)
        assert np.max(np.abs(pts - ref)) < 1e-12


def test_keypoints_jacobian_vs_fd(index_geometry):
    rng = np.random.default_rng(22)
    worst = 0.0
    for _ in range(50):
        q = sample_joint_state(index_geometry, rng)
        _, jac = link_keypoints_jacobian(q, index_geometry)
        fd = numeric_jacobian(
            lambda x: link_keypoints(FingerJointState(*x),
                                     index_geometry).ravel(),
            q.as_array())
        worst = max(worst, float(np.max(np.abs(jac.reshape(12, 4) - fd))))
    assert worst < 1e-6


def test_mcp_grid_search_oracle(index_geometry):
    # forward knuckle solve cross-checked against a dense grid over (q1, q2)
    # refined by nested zooming; no solver code in the reference path
    g = index_geometry
    rng = np.random.default_rng(23)
    q = sample_joint_state(g, rng, margin=0.15)
    d = finger_ik(q, g)

    lo = np.array([float(g.q_lower[0]), float(g.q_lower[1])])
    hi = np.array([float(g.q_upper[0]), float(g.q_upper[1])])
    for _ in range(12):
        grid1 = np.linspace(lo[0], hi[0], 21)
        grid2 = np.linspace(lo[1], hi[1], 21)
        best, arg = math.inf, (lo[0], lo[1])
        for a in grid1:
            for b in grid2:
                r = mcp_residual(a, b, d, g)
                c = float(r @ r)
                if c < best:
                    best, arg = c, (a, b)
        span1 = (hi[0] - lo[0]) / 10.0
        span2 = (hi[1] - lo[1]) / 10.0
        lo = np.array([arg[0] - span1, arg[1] - span2])
        hi = np.array([arg[0] + span1, arg[1] + span2])
    assert abs(arg[0] - q.spread) < 1e-6
    assert abs(arg[1] - q.mcp_flex) < 1e-6


def test_fk_no_convergence_at_infeasible_corner(index_geometry):
    # the travel box is a bounding box of the feasible image; its extreme
    # corners need not close the chains, and FK must say so rather than
    # return a wrong pose
    g = index_geometry
    d = ActuatorState(float(g.travel_min[0]), float(g.travel_min[1]),
                      float(g.travel_min[2]))
    with pytest.raises(NoConvergence):
        finger_fk(d, g)


def test_ik_travel_exceeded_beyond_joint_box(index_geometry):
    with pytest.raises(TravelExceeded) as excinfo:
        finger_ik(FingerJointState(0.0, 3.0, 0.2, 0.0), index_geometry)
    assert "mcp_a" in str(excinfo.value) or "mcp_b" in str(excinfo.value)
