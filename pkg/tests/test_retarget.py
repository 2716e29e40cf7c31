"""Keyvector retargeting: piecewise weights/targets, Jacobian, smoothing."""

import math

import numpy as np
import pytest

from linkhand.hand import DIGITS, HandJointState, clamp_command
from linkhand.retarget import (LANDMARK_LABELS, HumanHandFrame, Membership,
                               MissingLandmark, RetargetConfig, RetargetState,
                               calibrate_betas, default_keyvector_spec,
                               extract_keyvectors, residuals_and_jacobian,
                               retarget_step, target_length, target_vector,
                               weight)
from linkhand.solver import numeric_jacobian

from conftest import sample_hand_state, self_frame

ONES = np.ones(3)


def test_spec_composition(keyvector_spec):
    entries = keyvector_spec.entries
    assert len(entries) == 15
    assert len({(e.from_keypoint, e.to_keypoint) for e in entries}) == 15
    none = [e for e in entries if e.membership is Membership.NONE]
    s1 = [e for e in entries if e.membership is Membership.S1]
    s2 = [e for e in entries if e.membership is Membership.S2]
    assert len(none) == 5 and len(s1) == 4 and len(s2) == 6
    for e in none:
        digit = e.from_keypoint.rsplit("_", 1)[0]
        assert e.from_keypoint == f"{digit}_mcp"
        assert e.to_keypoint == f"{digit}_tip"
    for e in s1:
        assert e.to_keypoint == "thumb_tip"
        assert e.from_keypoint.endswith("_tip")
        assert not e.from_keypoint.startswith("thumb")


def test_weight_branch_table(retarget_config):
    cfg = retarget_config
    above = cfg.epsilon + 0.03
    below = cfg.epsilon * 0.5
    # all six (d vs epsilon) x membership combinations, exact values
    assert weight(above, Membership.NONE, cfg) == 1.0
    assert weight(above, Membership.S1, cfg) == 1.0
    assert weight(above, Membership.S2, cfg) == 1.0
    assert weight(below, Membership.NONE, cfg) == 1.0
    assert weight(below, Membership.S1, cfg) == 200.0
    assert weight(below, Membership.S2, cfg) == 400.0


def test_target_branch_table(retarget_config):
    cfg = retarget_config
    above = cfg.epsilon + 0.03
    below = cfg.epsilon * 0.5
    assert target_length(above, Membership.NONE, ONES, cfg) == above
    assert target_length(above, Membership.S1, ONES, cfg) == above
    assert target_length(above, Membership.S2, ONES, cfg) == above
    assert target_length(below, Membership.NONE, ONES, cfg) == below
    assert target_length(below, Membership.S1, ONES, cfg) == cfg.eta1
    assert target_length(below, Membership.S2, ONES, cfg) == cfg.eta2


def test_target_scales_by_beta(retarget_config):
    cfg = retarget_config
    above = cfg.epsilon + 0.05
    assert target_length(above, Membership.NONE, 0.8 * ONES, cfg) \
        == pytest.approx(0.8 * above)


def test_target_vector_keeps_direction(retarget_config):
    cfg = retarget_config
    v = np.array([0.004, 0.003, 0.0])   # below epsilon
    for membership, mag in ((Membership.S1, cfg.eta1),
                            (Membership.S2, cfg.eta2)):
        t = target_vector(v, membership, ONES, cfg)
        assert np.linalg.norm(t) == pytest.approx(mag)
        cosine = float(t @ v / (np.linalg.norm(t) * np.linalg.norm(v)))
        assert cosine == pytest.approx(1.0)


def test_extract_keyvectors_translation_invariant(hand_geometry,
                                                  keyvector_spec):
    rng = np.random.default_rng(41)
    q = sample_hand_state(hand_geometry, rng)
    frame = self_frame(q, hand_geometry)
    v0 = extract_keyvectors(frame, keyvector_spec)
    shifted = HumanHandFrame(frame.timestamp, {
        k: p + np.array([0.5, -0.2, 0.1]) for k, p in frame.positions.items()})
    v1 = extract_keyvectors(shifted, keyvector_spec)
    assert np.max(np.abs(v0 - v1)) < 1e-12


def test_extract_keyvectors_coincident_landmarks(keyvector_spec):
    frame = HumanHandFrame(0.0, {label: np.zeros(3)
                                 for label in LANDMARK_LABELS})
    v = extract_keyvectors(frame, keyvector_spec)
    assert np.max(np.abs(v)) == 0.0


def test_extract_keyvectors_missing_landmark(keyvector_spec):
    positions = {label: np.zeros(3) for label in LANDMARK_LABELS}
    del positions["index_tip"]
    with pytest.raises(MissingLandmark):
        extract_keyvectors(HumanHandFrame(0.0, positions), keyvector_spec)


def _unit_spec(spec):
    """The default spec with every beta pinned to exactly one."""
    import dataclasses
    entries = tuple(dataclasses.replace(e, beta=np.ones(3))
                    for e in spec.entries)
    return dataclasses.replace(spec, entries=entries)


def test_residual_zero_on_self_frame(hand_geometry, keyvector_spec):
    rng = np.random.default_rng(42)
    q = sample_hand_state(hand_geometry, rng)
    frame = self_frame(q, hand_geometry)
    cfg = RetargetConfig.for_hand(hand_geometry, lambda_smooth=0.0)
    state = RetargetState(q_prev=q.as_array(), initialized=True)
    res, _ = residuals_and_jacobian(q.as_array(), frame, _unit_spec(
        keyvector_spec), cfg, state, hand_geometry)
    assert np.max(np.abs(res)) < 1e-12


def test_jacobian_vs_fd(hand_geometry, keyvector_spec, retarget_config):
    rng = np.random.default_rng(43)
    state = RetargetState(q_prev=np.zeros(20), initialized=True)
    worst = 0.0
    for _ in range(50):
        q = sample_hand_state(hand_geometry, rng).as_array()
        frame = self_frame(sample_hand_state(hand_geometry, rng),
                           hand_geometry)
        _, jac = residuals_and_jacobian(q, frame, keyvector_spec,
                                        retarget_config, state, hand_geometry)
        fd = numeric_jacobian(
            lambda x: residuals_and_jacobian(x, frame, keyvector_spec,
                                             retarget_config, state,
                                             hand_geometry)[0], q)
        # distal columns are identically zero by design; the fd probe moves
        # the raw distal coordinate which the residual ignores
        assert np.max(np.abs(fd[:, 3::4])) < 1e-9
        worst = max(worst, float(np.max(np.abs(jac - fd))))
    assert worst < 1e-5


def test_chain_rule_negative_control(hand_geometry, keyvector_spec,
                                     retarget_config):
    # dropping the coupling slope from the pip columns must produce a
    # visible fd mismatch exactly there; this guards against the chain-rule
    # term silently becoming a no-op
    rng = np.random.default_rng(44)
    state = RetargetState(q_prev=np.zeros(20), initialized=True)
    q = sample_hand_state(hand_geometry, rng, margin=0.15).as_array()
    frame = self_frame(sample_hand_state(hand_geometry, rng), hand_geometry)
    _, jac = residuals_and_jacobian(q, frame, keyvector_spec, retarget_config,
                                    state, hand_geometry)
    fd = numeric_jacobian(
        lambda x: residuals_and_jacobian(x, frame, keyvector_spec,
                                         retarget_config, state,
                                         hand_geometry)[0], q)

    from linkhand.finger import FingerJointState
    from linkhand.hand import digit_keypoints_jacobian
    from linkhand.retarget import _keypoint_index
    butchered = jac.copy()
    for i, digit in enumerate(DIGITS):
        fg = hand_geometry.digits[digit]
        from linkhand.finger import solve_dip_flex
        q4 = solve_dip_flex(q[4 * i + 2], fg)
        _, jd = digit_keypoints_jacobian(
            FingerJointState(q[4 * i], q[4 * i + 1], q[4 * i + 2], q4),
            digit, hand_geometry)
        # strip: replace the folded pip column with the bare (uncoupled) one
        for k, e in enumerate(keyvector_spec.entries):
            rows = slice(3 * k, 3 * k + 3)
            for label, sign in ((e.to_keypoint, 1.0), (e.from_keypoint, -1.0)):
                d2, part = _keypoint_index(label)
                if d2 != digit:
                    continue
                d_i = np.linalg.norm(extract_keyvectors(frame,
                                                        keyvector_spec)[k])
                sw = math.sqrt(weight(float(d_i), e.membership,
                                      retarget_config))
                butchered[rows, 4 * i + 2] -= sign * sw * (
                    jac_fold_delta := jd[part][:, 3]
                    * _coupling_slope(q[4 * i + 2], fg))
    mismatch = np.abs(butchered - fd)
    pip_cols = mismatch[:, 2::4]
    other_cols = np.delete(mismatch, list(range(2, 20, 4)), axis=1)
    assert np.max(pip_cols) > 1e-3
    assert np.max(other_cols) < 1e-5


def _coupling_slope(q3, fg):
    from linkhand.finger import dip_coupling_derivative
    return dip_coupling_derivative(float(q3), fg)


def test_retarget_fixed_point_on_constant_frame(hand_geometry,
                                                keyvector_spec):
    rng = np.random.default_rng(45)
    cfg = RetargetConfig.for_hand(hand_geometry)
    q_star = sample_hand_state(hand_geometry, rng, margin=0.2)
    frame = self_frame(q_star, hand_geometry)
    state = RetargetState()
    prev = None
    for step in range(6):
        out = retarget_step(frame, _unit_spec(keyvector_spec), cfg, state,
                            hand_geometry).as_array()
        if prev is not None and np.max(np.abs(out - prev)) < 1e-8:
            break
        prev = out
    assert step < 5, "no fixed point after 5 steps"


def test_self_retarget_recovers_pose(hand_geometry, keyvector_spec):
    # beta = 1 self-frames: the exact joint state is the global optimum
    rng = np.random.default_rng(46)
    cfg = RetargetConfig.for_hand(hand_geometry)
    spec = _unit_spec(keyvector_spec)
    recovered = 0
    for _ in range(10):
        q_star = _branch_clear_state(hand_geometry, keyvector_spec, rng,
                                     cfg.epsilon)
        frame = self_frame(q_star, hand_geometry)
        state = RetargetState()
        out = None
        for _ in range(5):
            out = retarget_step(frame, spec, cfg, state, hand_geometry)
            if np.max(np.abs(out.as_array() - q_star.as_array())) < 1e-5:
                break
        assert np.max(np.abs(out.as_array() - q_star.as_array())) < 1e-4
        recovered += 1
    assert recovered == 10


def _branch_clear_state(g, spec, rng, epsilon, margin=0.1):
    """Random state whose contact keyvectors stay clear of the epsilon band.

    Inside the band the objective rewrites the targets (eta branches), so
    pose recovery is only defined outside it.
    """
    while True:
        q = sample_hand_state(g, rng, margin=margin)
        v = extract_keyvectors(self_frame(q, g), spec)
        lengths = [np.linalg.norm(v[k]) for k, e in enumerate(spec.entries)
                   if e.membership is not Membership.NONE]
        if min(lengths) > 1.25 * epsilon:
            return q


def test_lambda_dominates_at_large_values(hand_geometry, keyvector_spec):
    rng = np.random.default_rng(47)
    cfg = RetargetConfig.for_hand(hand_geometry, lambda_smooth=1e9)
    q_prev = sample_hand_state(hand_geometry, rng, margin=0.2)
    state = RetargetState(q_prev=q_prev.as_array().copy(), initialized=True)
    frame = self_frame(sample_hand_state(hand_geometry, rng), hand_geometry)
    out = retarget_step(frame, keyvector_spec, cfg, state, hand_geometry)
    assert np.max(np.abs(out.as_array() - q_prev.as_array())) < 1e-6


def test_step_norm_decreasing_in_lambda(hand_geometry, keyvector_spec):
    # same recorded two-frame stream, increasing smoothing weight: the
    # per-step norm must weakly decrease
    rng = np.random.default_rng(48)
    q0 = sample_hand_state(hand_geometry, rng, margin=0.25)
    q1 = sample_hand_state(hand_geometry, rng, margin=0.25)
    frame0 = self_frame(q0, hand_geometry)
    frame1 = self_frame(q1, hand_geometry, timestamp=0.01)
    spec = _unit_spec(keyvector_spec)
    norms = []
    for lam in (0.0, 0.01, 1.0):
        cfg = RetargetConfig.for_hand(hand_geometry, lambda_smooth=lam)
        state = RetargetState()
        prev = retarget_step(frame0, spec, cfg, state, hand_geometry)
        out = retarget_step(frame1, spec, cfg, state, hand_geometry)
        norms.append(float(np.linalg.norm(out.as_array()
                                          - prev.as_array())))
    assert norms[0] >= norms[1] - 1e-9
    assert norms[1] >= norms[2] - 1e-9


def test_output_always_within_bounds(hand_geometry, keyvector_spec,
                                     retarget_config):
    rng = np.random.default_rng(49)
    state = RetargetState()
    for k in range(5):
        frame = self_frame(sample_hand_state(hand_geometry, rng),
                           hand_geometry, timestamp=0.01 * k)
        out = retarget_step(frame, keyvector_spec, retarget_config, state,
                            hand_geometry).as_array()
        assert np.all(out >= retarget_config.q_lower - 1e-12)
        assert np.all(out <= retarget_config.q_upper + 1e-12)
        assert np.array_equal(state.q_prev, out)


def test_held_command_before_and_after_init(hand_geometry, retarget_config,
                                            keyvector_spec):
    state = RetargetState()
    held = state.held_command()
    assert np.max(np.abs(held.as_array())) == 0.0
    rng = np.random.default_rng(50)
    frame = self_frame(sample_hand_state(hand_geometry, rng), hand_geometry)
    out = retarget_step(frame, keyvector_spec, retarget_config, state,
                        hand_geometry)
    assert np.array_equal(state.held_command().as_array(), out.as_array())


def test_determinism_same_stream(hand_geometry, keyvector_spec,
                                 retarget_config):
    rng = np.random.default_rng(51)
    frames = [self_frame(sample_hand_state(hand_geometry, rng),
                         hand_geometry, timestamp=0.01 * k)
              for k in range(4)]

    def run():
        state = RetargetState()
        return [retarget_step(f, keyvector_spec, retarget_config, state,
                              hand_geometry).as_array().tobytes()
                for f in frames]

    assert run() == run()


def test_calibrate_betas_unity_on_rest_self_frame(hand_geometry,
                                                  keyvector_spec):
    rest = clamp_command(HandJointState.rest(), hand_geometry)
    frame = self_frame(rest, hand_geometry)
    betas = calibrate_betas(frame, keyvector_spec, hand_geometry)
    np.testing.assert_allclose(betas, 1.0, atol=1e-9)
