#!/usr/bin/env python3
"""Synthesize the pinch fixture streams: a thumb-index closure crossing the
contact activation distance, plus a gentle wrist drift.

The glove landmarks are the reference hand's own keypoints (so the scale
calibration is exactly 1), with the whole thumb translated rigidly toward the
index tip.  The closure bottoms out above the contact target length, so the
commanded fingertip gap ends up tighter than the human one.
"""

import argparse
import math
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from linkhand.hand import HandJointState, clamp_command, hand_fk
from linkhand.reference import build_hand_geometry
from linkhand.retarget import LANDMARK_LABELS
from linkhand.streams import (GloveStreamRecord, WristStreamRecord,
                              write_glove_stream, write_wrist_stream)

GLOVE_RATE_HZ = 120.0
WRIST_RATE_HZ = 50.0
DURATION_S = 0.6
RAMP_S = 0.5
CLOSURE_FLOOR_M = 0.008    # min human thumb-index gap; inside the 20 mm band


def rest_landmarks(g) -> dict:
    """Landmark positions of the open reference hand (cmc = mount origin)."""
    q = clamp_command(HandJointState.rest(), g)
    pts = hand_fk(q, g)
    out = {}
    for label in LANDMARK_LABELS:
        digit, part = label.rsplit("_", 1)
        out[label] = (g.mounts[digit][1].copy() if part == "cmc"
                      else pts[f"{digit}_{part}"].copy())
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=os.path.join(
        os.path.dirname(__file__), "..", "configs", "streams"))
    args = ap.parse_args()
    out = os.path.abspath(args.out)
    os.makedirs(out, exist_ok=True)

    g = build_hand_geometry()
    base = rest_landmarks(g)
    gap0 = float(np.linalg.norm(base["index_tip"] - base["thumb_tip"]))
    a_max = 1.0 - CLOSURE_FLOOR_M / gap0
    identity_quat = np.array([1.0, 0.0, 0.0, 0.0])

    glove = []
    n = int(round(DURATION_S * GLOVE_RATE_HZ)) + 1
    for k in range(n):
        t = k / GLOVE_RATE_HZ
        a = a_max * min(t / RAMP_S, 1.0)
        shift = a * (base["index_tip"] - base["thumb_tip"])
        landmarks = {}
        for label, p in base.items():
            pos = p + shift if label.startswith("thumb_") else p
            landmarks[label] = (pos.copy(), identity_quat.copy())
        glove.append(GloveStreamRecord(timestamp_s=t, landmarks=landmarks))
    write_glove_stream(glove, os.path.join(out, "pinch_glove.jsonl"))

    wrist = []
    n = int(round(DURATION_S * WRIST_RATE_HZ)) + 1
    for k in range(n):
        t = k / WRIST_RATE_HZ
        s = min(t / DURATION_S, 1.0)
        drift = np.array([-0.03 * s, 0.015 * math.sin(math.pi * s), 0.0])
        half = 0.5 * math.radians(5.0) * s
        quat = np.array([math.cos(half), 0.0, 0.0, math.sin(half)])
        wrist.append(WristStreamRecord(timestamp_s=t, position_m=drift,
                                       quaternion_wxyz=quat))
    write_wrist_stream(wrist, os.path.join(out, "pinch_wrist.jsonl"))

    print(f"wrote pinch_glove.jsonl ({len(glove)} frames, "
          f"gap {gap0 * 1e3:.1f} -> {CLOSURE_FLOOR_M * 1e3:.1f} mm) and "
          f"pinch_wrist.jsonl ({len(wrist)} poses) to {out}")


if __name__ == "__main__":
    main()
