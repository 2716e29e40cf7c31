"""Reference hand geometry.

Builds the five-digit linkage hand used by the test suite, the example
configs and the replay fixtures.  Digits are generated from a compact layout
description (phalanx lengths, linkage arm placements) by back-solving every
link length from the rest pose, which guarantees the rest-consistency check
in FingerGeometry.validate.  Lead-screw travel limits are then computed as
the image of the static joint box under the inverse transmission, so any
joint command inside the limits maps to in-travel displacements.

Coordinate conventions per digit (base frame): x distal, y palmar (curl
direction), z lateral.  Sliders translate along -x into the palm.  The hand
frame has x distal (wrist to fingers), y palmar, z radial (thumb side);
digit mounts position each digit base in the hand frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, Tuple

import numpy as np

from .finger import (ActuatorState, FingerGeometry, FingerJointState,
                     finger_ik, solve_dip_flex)
from .hand import (CoupledLimitMap, HandGeometry, ThumbActuatorState,
                   thumb_ik)


def _vec(x, y, z=0.0) -> np.ndarray:
    return np.array([float(x), float(y), float(z)])


@dataclass
class FingerLayout:
    """Compact description of one digit, meters and radians.

    Arm placements are chosen so every pushrod-related point lies in the
    digit's sagittal plane (z = 0); the bent-joint residual is then even in
    the spread angle.
    """

    proximal_length: float          # mcp center to pip center
    middle_length: float            # pip center to dip center
    distal_length: float            # dip center to fingertip

    q_lower: Tuple[float, float, float]   # spread, mcp_flex, pip_flex
    q_upper: Tuple[float, float, float]

    # Thumb style: the spread joint is a directly driven revolute and the
    # flexion chains ride on it, so travel sampling fixes spread at zero.
    decoupled_spread: bool = False

    mcp_offset: float = 0.030       # digit base to mcp center along x
    # Knuckle chains: ball anchors on the knuckle body (knuckle frame).
    pss_anchor_x: float = -0.008
    pss_anchor_y: float = -0.010
    pss_anchor_z: float = 0.007
    pss_link_length: float = 0.024
    # Pushrod chain.  The crank pivot sits close to the knuckle so the
    # pushrod anchor stays near the spread axis and the chain can follow
    # large spread angles (the thumb needs 90 degrees).
    psu_link_a: float = 0.020       # slider ball to bend joint
    psu_link_b: float = 0.016       # bend joint to crank anchor
    crank_pivot_xy: Tuple[float, float] = (0.006, -0.008)  # knuckle frame
    crank_arm_psu: float = 0.007        # pushrod anchor radius on crank
    crank_phase_psu: float = math.radians(215.0)
    crank_arm_coupler: float = 0.009    # four-bar anchor radius on crank
    crank_phase_coupler: float = math.radians(255.0)
    pip_arm_radius: float = 0.007       # coupler anchor radius, middle frame
    pip_arm_phase: float = math.radians(240.0)
    # Distal coupling four-bar (arms about pip / dip centers).
    dip_arm_knuckle_radius: float = 0.0055
    dip_arm_knuckle_phase: float = math.radians(345.0)
    dip_arm_distal_radius: float = 0.0065
    dip_arm_distal_phase: float = math.radians(60.0)
    crank_range: Tuple[float, float] = (-math.pi / 2, math.pi / 2)


def build_finger_geometry(layout: FingerLayout,
                          travel_samples: int = 600,
                          seed: int = 0,
                          travel_margin: float = 0.001) -> FingerGeometry:
    """Digit geometry from a layout, with back-solved lengths and travel.

    Link lengths are the rest-pose anchor distances, so the geometry is
    rest-consistent by construction.  Travel limits are the bounding box of
    the inverse-transmission image of the joint box (corners, edge and face
    sweeps, random interior samples) padded by a small stroke margin so
    sampling error can never strand a feasible joint command outside travel.
    """
    lp, lm, ld = layout.proximal_length, layout.middle_length, layout.distal_length
    mc = _vec(layout.mcp_offset, 0.0)

    anchor_a = _vec(layout.pss_anchor_x, layout.pss_anchor_y, layout.pss_anchor_z)
    anchor_b = _vec(layout.pss_anchor_x, layout.pss_anchor_y, -layout.pss_anchor_z)
    slider_a = mc + anchor_a - _vec(layout.pss_link_length, 0.0)
    slider_b = mc + anchor_b - _vec(layout.pss_link_length, 0.0)

    crank_pivot = _vec(layout.crank_pivot_xy[0], layout.crank_pivot_xy[1])
    psu_anchor = _vec(layout.crank_arm_psu * math.cos(layout.crank_phase_psu),
                      layout.crank_arm_psu * math.sin(layout.crank_phase_psu))
    psu_anchor_rest = mc + crank_pivot + psu_anchor
    chain = layout.psu_link_a + layout.psu_link_b
    psu_slider = psu_anchor_rest - _vec(chain, 0.0)

    pip_center = _vec(lp, 0.0)
    p4 = _vec(layout.crank_arm_coupler * math.cos(layout.crank_phase_coupler),
              layout.crank_arm_coupler * math.sin(layout.crank_phase_coupler))
    p5 = _vec(layout.pip_arm_radius * math.cos(layout.pip_arm_phase),
              layout.pip_arm_radius * math.sin(layout.pip_arm_phase))
    coupler_rest = (pip_center + p5) - (crank_pivot + p4)

    dip_center = _vec(lm, 0.0)
    p6 = _vec(layout.dip_arm_knuckle_radius * math.cos(layout.dip_arm_knuckle_phase),
              layout.dip_arm_knuckle_radius * math.sin(layout.dip_arm_knuckle_phase))
    p7 = _vec(layout.dip_arm_distal_radius * math.cos(layout.dip_arm_distal_phase),
              layout.dip_arm_distal_radius * math.sin(layout.dip_arm_distal_phase))
    dip_coupler_rest = p6 - (dip_center + p7)

    geometry = FingerGeometry(
        pss_a_slider_rest=slider_a,
        pss_b_slider_rest=slider_b,
        pss_a_anchor=anchor_a,
        pss_b_anchor=anchor_b,
        pss_a_link_length=float(np.linalg.norm(mc + anchor_a - slider_a)),
        pss_b_link_length=float(np.linalg.norm(mc + anchor_b - slider_b)),
        mcp_center=mc,
        psu_slider_rest=psu_slider,
        crank_pivot=crank_pivot,
        psu_anchor_crank=psu_anchor,
        psu_link_a_length=layout.psu_link_a,
        psu_link_b_length=layout.psu_link_b,
        pip_center=pip_center,
        pip_coupler_anchor_crank=p4,
        pip_coupler_anchor_middle=p5,
        pip_coupler_length=float(np.linalg.norm(coupler_rest)),
        dip_center=dip_center,
        dip_coupler_anchor_knuckle=p6,
        dip_coupler_anchor_distal=p7,
        dip_coupler_length=float(np.linalg.norm(dip_coupler_rest)),
        fingertip=_vec(ld, 0.0),
        travel_min=_vec(-1.0, -1.0, -1.0),   # provisional, replaced below
        travel_max=_vec(1.0, 1.0, 1.0),
        q_lower=np.array([*layout.q_lower, 0.0]),
        q_upper=np.array([*layout.q_upper, 0.0]),
        crank_range=layout.crank_range,
    )
    geometry.validate()

    # Distal limits follow the coupling curve; the coupling is monotone for
    # every shipped layout, so the endpoints bound the image.
    q4_lo = solve_dip_flex(layout.q_lower[2], geometry)
    q4_hi = solve_dip_flex(layout.q_upper[2], geometry)
    geometry.q_lower[3] = min(q4_lo, q4_hi)
    geometry.q_upper[3] = max(q4_lo, q4_hi)

    lo, hi = _travel_image(geometry, travel_samples, seed,
                           thumb=layout.decoupled_spread)
    geometry.travel_min = lo - travel_margin
    geometry.travel_max = hi + travel_margin
    return geometry


def _joint_box_probes(lows, highs, samples: int, seed: int):
    """Corner, edge, face and random probes of a 3d joint box."""
    probes = []
    for i in range(8):
        probes.append([highs[k] if (i >> k) & 1 else lows[k] for k in range(3)])
    # Edge sweeps and 2d face grids catch interior extrema of the slider
    # displacements, which are not monotone in every joint direction.
    grid = np.linspace(0.0, 1.0, 17)
    for axis in range(3):
        others = [k for k in range(3) if k != axis]
        for t in grid:
            for i in range(4):
                vals = [0.0, 0.0, 0.0]
                vals[axis] = lows[axis] + t * (highs[axis] - lows[axis])
                for j, k in enumerate(others):
                    vals[k] = highs[k] if (i >> j) & 1 else lows[k]
                probes.append(vals)
    face = np.linspace(0.0, 1.0, 9)
    for fixed in range(3):
        others = [k for k in range(3) if k != fixed]
        for fv in (lows[fixed], highs[fixed]):
            for ta in face:
                for tb in face:
                    vals = [0.0, 0.0, 0.0]
                    vals[fixed] = fv
                    vals[others[0]] = lows[others[0]] + ta * (highs[others[0]] - lows[others[0]])
                    vals[others[1]] = lows[others[1]] + tb * (highs[others[1]] - lows[others[1]])
                    probes.append(vals)
    rng = np.random.default_rng(seed)
    probes.extend((lows + rng.random((samples, 3)) * (highs - lows)).tolist())
    return probes


def _travel_image(g: FingerGeometry, samples: int, seed: int,
                  thumb: bool = False):
    """Bounding box of slider displacements over the static joint box.

    For the thumb the spread joint is directly driven, so the chains only
    ever see zero spread; the image is sampled over the flexion plane and
    the unused mirror-chain column copies the flexion chain.
    """
    lows = np.array(g.q_lower[:3], dtype=float)
    highs = np.array(g.q_upper[:3], dtype=float)
    if thumb:
        lows[0] = highs[0] = 0.0
    probes = _joint_box_probes(lows, highs, samples, seed)

    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    warm = None
    for q123 in probes:
        q = FingerJointState(q123[0], q123[1], q123[2], 0.0)
        if thumb:
            d = thumb_ik(q, g, warm=warm)
            arr = np.array([d.flex, d.flex, d.pip])
        else:
            d = finger_ik(q, g, warm=warm)
            arr = d.as_array()
        warm = d
        lo = np.minimum(lo, arr)
        hi = np.maximum(hi, arr)
    return lo, hi


# ---------------------------------------------------------------------------
# Reference digit layouts.  Phalanx proportions follow anthropometric tables
# for a medium adult hand, scaled to the palm described in the mounts below.
# ---------------------------------------------------------------------------

FINGER_Q_LOWER = (-0.35, -0.17, -0.09)
FINGER_Q_UPPER = (0.35, 1.57, 1.75)
# Thumb abduction span is a hard interface constant: -4 to +90 degrees.
# The thumb pip does not hyperextend: with only tip-level retargeting
# constraints on the thumb, allowing q3 < 0 admits a mirrored elbow branch
# that reproduces the same tip exactly, and commands become ambiguous.
THUMB_Q_LOWER = (math.radians(-4.0), -0.17, 0.0)
THUMB_Q_UPPER = (math.radians(90.0), 1.05, 1.40)

REFERENCE_LAYOUTS: Dict[str, FingerLayout] = {
    "thumb": FingerLayout(
        proximal_length=0.040, middle_length=0.032, distal_length=0.028,
        q_lower=THUMB_Q_LOWER, q_upper=THUMB_Q_UPPER,
        decoupled_spread=True,
        pss_anchor_z=0.009, pss_anchor_y=-0.011, pss_link_length=0.028,
        psu_link_a=0.024, psu_link_b=0.020,
    ),
    "index": FingerLayout(
        proximal_length=0.045, middle_length=0.025, distal_length=0.022,
        q_lower=FINGER_Q_LOWER, q_upper=FINGER_Q_UPPER,
    ),
    "middle": FingerLayout(
        proximal_length=0.050, middle_length=0.028, distal_length=0.024,
        q_lower=FINGER_Q_LOWER, q_upper=FINGER_Q_UPPER,
    ),
    "ring": FingerLayout(
        proximal_length=0.046, middle_length=0.026, distal_length=0.023,
        q_lower=FINGER_Q_LOWER, q_upper=FINGER_Q_UPPER,
    ),
    "pinky": FingerLayout(
        proximal_length=0.037, middle_length=0.020, distal_length=0.020,
        q_lower=FINGER_Q_LOWER, q_upper=FINGER_Q_UPPER,
    ),
}


def _mount_rotation(yaw_y: float, roll_x: float, pitch_z: float) -> np.ndarray:
    """R_y(yaw) then R_x(roll) then R_z(pitch), hand frame."""
    cy, sy = math.cos(yaw_y), math.sin(yaw_y)
    cx, sx = math.cos(roll_x), math.sin(roll_x)
    cz, sz = math.cos(pitch_z), math.sin(pitch_z)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ rx @ ry


# Finger bases sit on a common palm line, 24 mm apart so neighboring digits
# keep clear of each other across the abduction range.  The thumb base sits
# on the radial palm edge, rotated to oppose the finger pads.
REFERENCE_MOUNTS: Dict[str, Tuple[np.ndarray, np.ndarray]] = {
    "index": (_mount_rotation(0.0, 0.0, 0.0), _vec(0.072, 0.0, 0.036)),
    "middle": (_mount_rotation(0.0, 0.0, 0.0), _vec(0.076, 0.0, 0.012)),
    "ring": (_mount_rotation(0.0, 0.0, 0.0), _vec(0.072, 0.0, -0.012)),
    "pinky": (_mount_rotation(0.0, 0.0, 0.0), _vec(0.066, 0.0, -0.036)),
    "thumb": (_mount_rotation(math.radians(-15.0), math.radians(-90.0),
                              math.radians(20.0)),
              _vec(0.018, 0.012, 0.045)),
}

DIGIT_ORDER = ("thumb", "index", "middle", "ring", "pinky")

# Palm landmarks in the hand frame: wrist at the origin, palm center on the
# metacarpal line between middle and ring.
REFERENCE_PALM_KEYPOINTS: Dict[str, np.ndarray] = {
    "palm_center": _vec(0.040, 0.0, 0.0),
    "wrist": _vec(0.0, 0.0, 0.0),
}


def reference_digits() -> Dict[str, FingerGeometry]:
    return {name: build_finger_geometry(REFERENCE_LAYOUTS[name])
            for name in DIGIT_ORDER}


def reference_limit_map() -> CoupledLimitMap:
    """Knuckle abduction taper: full half-range at straight fingers, zero
    at full flexion."""
    return CoupledLimitMap({
        name: (FINGER_Q_UPPER[0], FINGER_Q_UPPER[1])
        for name in DIGIT_ORDER if name != "thumb"
    })


def build_hand_geometry() -> HandGeometry:
    """The full reference hand: digits, mounts, limits, palm landmarks."""
    return HandGeometry(
        digits=reference_digits(),
        mounts={name: (rot.copy(), t.copy())
                for name, (rot, t) in REFERENCE_MOUNTS.items()},
        coupled_limits=reference_limit_map(),
        palm_keypoints={k: v.copy()
                        for k, v in REFERENCE_PALM_KEYPOINTS.items()},
    )
