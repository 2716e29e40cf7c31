"""Shared fixtures: reference geometry, synthetic sessions, CLI runner."""

import math
import os

import numpy as np
import pytest

from linkhand import cli
from linkhand.armik import reference_arm_model
from linkhand.config import (SessionConfig, save_arm_ik_config,
                             save_arm_model, save_hand_geometry,
                             save_retarget_config, save_session_config)
from linkhand.armik import ArmIKConfig, REFERENCE_ARM_HOME
from linkhand.finger import FingerJointState, solve_dip_flex
from linkhand.hand import DIGITS, HandJointState, clamp_command, hand_fk
from linkhand.reference import build_hand_geometry
from linkhand.retarget import (LANDMARK_LABELS, HumanHandFrame,
                               RetargetConfig, default_keyvector_spec)
from linkhand.streams import (GloveStreamRecord, WristStreamRecord,
                              write_glove_stream, write_wrist_stream)

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIG_DIR = os.path.join(REPO_ROOT, "configs")
DATA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data")


@pytest.fixture(scope="session")
def hand_geometry():
    return build_hand_geometry()


@pytest.fixture(scope="session")
def index_geometry(hand_geometry):
    return hand_geometry.digits["index"]


@pytest.fixture(scope="session")
def thumb_geometry(hand_geometry):
    return hand_geometry.digits["thumb"]


@pytest.fixture(scope="session")
def retarget_config(hand_geometry):
    return RetargetConfig.for_hand(hand_geometry)


@pytest.fixture(scope="session")
def keyvector_spec():
    return default_keyvector_spec()


@pytest.fixture(scope="session")
def arm_model():
    return reference_arm_model()


def sample_joint_state(fg, rng, margin=0.02):
    """Random coupling-consistent joint state strictly inside the box.

    margin is the fraction of each joint span kept clear of the limits.
    """
    lo = np.asarray(fg.q_lower[:3], dtype=float)
    hi = np.asarray(fg.q_upper[:3], dtype=float)
    pad = margin * (hi - lo)
    q123 = rng.uniform(lo + pad, hi - pad)
    q4 = solve_dip_flex(float(q123[2]), fg)
    return FingerJointState(float(q123[0]), float(q123[1]), float(q123[2]), q4)


def sample_hand_state(g, rng, margin=0.02):
    """Random clamped whole-hand state (coupled limits honored)."""
    q = np.zeros(20)
    for i, digit in enumerate(DIGITS):
        s = sample_joint_state(g.digits[digit], rng, margin)
        q[4 * i:4 * i + 4] = s.as_array()
    return clamp_command(HandJointState.from_array(q), g)


def self_frame(q_state, g, timestamp=0.0):
    """Human frame whose landmarks are the robot keypoints of q_state.

    The cmc label has no robot counterpart; the digit mount origin stands in
    (it never enters a keyvector).
    """
    pts = hand_fk(q_state, g)
    positions = {}
    for label in LANDMARK_LABELS:
        digit, part = label.rsplit("_", 1)
        positions[label] = (g.mounts[digit][1].copy() if part == "cmc"
                            else pts[f"{digit}_{part}"].copy())
    return HumanHandFrame(timestamp, positions)


def run_cli(argv):
    """cli.main that folds argparse SystemExit into the return code."""
    try:
        return cli.main(list(argv))
    except SystemExit as exc:
        return int(exc.code or 0)


@pytest.fixture(scope="session")
def pinch_session_path():
    path = os.path.join(CONFIG_DIR, "session_pinch.json")
    assert os.path.exists(path), "fixture session missing; run scripts/"
    return path


def _identity_quat():
    return np.array([1.0, 0.0, 0.0, 0.0])


def _glove_records(g, n_frames, rate_hz, amplitude, t0=0.0, gap_after=None,
                   gap_s=0.0):
    """Glove records along a smooth flexion sweep of the whole hand.

    gap_after drops the sample cadence after the given frame index by gap_s
    (a recording dropout), timestamps stay strictly increasing.
    """
    records = []
    t = t0
    for k in range(n_frames):
        s = k / max(n_frames - 1, 1)
        q = np.zeros(20)
        for i in range(5):
            q[4 * i + 1] = amplitude * math.sin(math.pi * s) * 0.8
            q[4 * i + 2] = amplitude * math.sin(math.pi * s)
        state = clamp_command(HandJointState.from_array(q), g)
        frame = self_frame(state, g)
        records.append(GloveStreamRecord(
            t, {label: (pos, _identity_quat())
                for label, pos in frame.positions.items()}))
        t += 1.0 / rate_hz
        if gap_after is not None and k == gap_after:
            t += gap_s
    return records


def make_mini_session(tmpdir, g, n_frames=13, rate_hz=120.0, amplitude=0.7,
                      gap_after=None, gap_s=0.0, with_wrist=True,
                      arm_home=REFERENCE_ARM_HOME):
    """Write a small self-consistent session into tmpdir; returns its path."""
    tmpdir = str(tmpdir)
    os.makedirs(tmpdir, exist_ok=True)
    save_hand_geometry(g, os.path.join(tmpdir, "hand.json"))
    save_retarget_config(RetargetConfig.for_hand(g), default_keyvector_spec(),
                         os.path.join(tmpdir, "retarget.json"))
    save_arm_model(reference_arm_model(), os.path.join(tmpdir, "arm.json"))
    save_arm_ik_config(ArmIKConfig(), os.path.join(tmpdir, "arm_ik.json"))

    records = _glove_records(g, n_frames, rate_hz, amplitude,
                             gap_after=gap_after, gap_s=gap_s)
    write_glove_stream(records, os.path.join(tmpdir, "glove.jsonl"))

    wrist = []
    if with_wrist:
        t_last = records[-1].timestamp_s
        n_wrist = max(int(t_last * 50.0) + 1, 2)
        for k in range(n_wrist):
            t = k / 50.0
            if k == 0:
                wrist.append(WristStreamRecord(t, np.zeros(3),
                                               _identity_quat()))
            else:
                wrist.append(WristStreamRecord(
                    t, np.array([-0.02 * t, 0.01 * math.sin(t), 0.0]),
                    _identity_quat()))
    write_wrist_stream(wrist, os.path.join(tmpdir, "wrist.jsonl"))

    session = SessionConfig(
        glove_stream="glove.jsonl",
        wrist_stream="wrist.jsonl",
        hand_geometry="hand.json",
        retarget_config="retarget.json",
        arm_model="arm.json",
        arm_ik_config="arm_ik.json",
        arm_home_rad=(None if arm_home is None else np.asarray(arm_home)),
        root=tmpdir,
    )
    path = os.path.join(tmpdir, "session.json")
    save_session_config(session, path)
    return path
