"""Five-digit hand assembly: mounts, whole-hand FK/IK, keypoints, limits.

The four fingers use the digit transmission of :mod:`linkhand.finger`
unchanged.  The thumb shares the same kinematic skeleton (spread about y,
then a flexion stack) but a different transmission: its abduction is a
directly commanded revolute joint, and the flexion stack rides on that
joint, so the flexion solves always see zero spread.  Three actuators per
digit, 15 in total; the thumb's first actuator is an angle, not a
displacement.

The finger knuckle linkage couples its two degrees of freedom: the deeper
the flexion, the less abduction the chains admit.  That coupling is modeled
as a command-space limit map (linear taper to zero at full flexion) applied
by clamp_command before any inverse solve.  The thumb is decoupled by design
and keeps its full abduction range at any flexion.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .finger import (ActuatorState, FingerGeometry, FingerJointState,
                     KEYPOINT_NAMES, NoConvergence, OutOfTravel,
                     TravelExceeded, _pss_terms, _sinusoid_seed,
                     _solve_crank_from_pip, _solve_crank_from_psu,
                     _solve_pip_from_crank, dip_residual, finger_fk,
                     finger_ik, link_keypoints, link_keypoints_jacobian,
                     pip_fourbar_residual, psu_gradient, psu_residual,
                     solve_dip_flex, STAGE_SETTINGS)
from .solver import SolveStatus, solve_scalar_root

DIGITS = ("thumb", "index", "middle", "ring", "pinky")
FINGERS = DIGITS[1:]
PALM_LABELS = ("palm_center", "wrist")

# Fixed label set emitted by hand_fk: 4 keypoints per digit + palm labels.
KEYPOINT_LABELS = tuple(f"{digit}_{kp}" for digit in DIGITS
                        for kp in KEYPOINT_NAMES) + PALM_LABELS


@dataclass
class ThumbActuatorState:
    """Thumb actuation: abduction angle (rad) plus two displacements (m)."""

    abduction: float
    flex: float
    pip: float

    def as_array(self) -> np.ndarray:
        return np.array([self.abduction, self.flex, self.pip])

    @classmethod
    def from_array(cls, d) -> "ThumbActuatorState":
        return cls(float(d[0]), float(d[1]), float(d[2]))


@dataclass
class CoupledLimitMap:
    """Flexion-dependent abduction half-range per finger knuckle.

    The half-range tapers linearly in |flexion| from the static limit at
    zero flexion to exactly zero at full flexion.  Shape is configurable
    through the per-digit (half_range, flex_at_zero) pairs; the linear taper
    is the default and the only shipped shape.  The thumb never appears in
    the map.
    """

    entries: Dict[str, Tuple[float, float]]  # digit -> (half_range rad, q2_max rad)

    def __post_init__(self) -> None:
        for digit, (half, q2_max) in self.entries.items():
            if half < 0.0 or q2_max <= 0.0:
                raise ValueError(f"invalid limit taper for '{digit}'")

    def half_range(self, digit: str, q2: float) -> float:
        half, q2_max = self.entries[digit]
        return half * max(0.0, 1.0 - abs(q2) / q2_max)


@dataclass
class HandGeometry:
    """Digit geometries, mount frames, and hand-level limit data."""

    digits: Dict[str, FingerGeometry]
    mounts: Dict[str, Tuple[np.ndarray, np.ndarray]]  # digit -> (R 3x3, t 3)
    coupled_limits: CoupledLimitMap
    palm_keypoints: Dict[str, np.ndarray] = field(default_factory=dict)

    # Thumb abduction axis in the hand frame, derived from the mount.
    thumb_abduction_origin: np.ndarray = field(init=False)
    thumb_abduction_direction: np.ndarray = field(init=False)
    thumb_abduction_range: Tuple[float, float] = field(init=False)

    def __post_init__(self) -> None:
        for name in DIGITS:
            if name not in self.digits or name not in self.mounts:
                raise ValueError(f"digit '{name}' missing from geometry")
        for name, (rot, _) in self.mounts.items():
            rot = np.asarray(rot, dtype=float)
            if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9) \
                    or abs(np.linalg.det(rot) - 1.0) > 1e-9:
                raise ValueError(f"mount rotation for '{name}' is not a "
                                 f"proper rotation")
        for digit in FINGERS:
            if digit not in self.coupled_limits.entries:
                raise ValueError(f"coupled limit entry missing for '{digit}'")
        if "thumb" in self.coupled_limits.entries:
            raise ValueError("thumb abduction is decoupled; it takes no "
                             "coupled limit entry")
        rot, t = self.mounts["thumb"]
        g = self.digits["thumb"]
        self.thumb_abduction_origin = rot @ g.mcp_center + t
        self.thumb_abduction_direction = rot @ np.array([0.0, 1.0, 0.0])
        self.thumb_abduction_range = (float(g.q_lower[0]), float(g.q_upper[0]))

    def mount(self, digit: str) -> Tuple[np.ndarray, np.ndarray]:
        return self.mounts[digit]


@dataclass
class HandJointState:
    """Joint angles of all five digits, 20 DoFs."""

    digits: Dict[str, FingerJointState]

    def __post_init__(self) -> None:
        missing = [d for d in DIGITS if d not in self.digits]
        if missing:
            raise ValueError(f"missing digits: {missing}")

    def as_array(self) -> np.ndarray:
        """Flat R20 vector in digit order, 4 joints per digit."""
        return np.concatenate([self.digits[d].as_array() for d in DIGITS])

    @classmethod
    def from_array(cls, q) -> "HandJointState":
        q = np.asarray(q, dtype=float)
        if q.shape != (20,):
            raise ValueError(f"expected 20 joint values, got shape {q.shape}")
        return cls({d: FingerJointState.from_array(q[4 * i:4 * i + 4])
                    for i, d in enumerate(DIGITS)})

    @classmethod
    def rest(cls) -> "HandJointState":
        return cls.from_array(np.zeros(20))


# ---------------------------------------------------------------------------
# Thumb transmission: direct abduction + flexion stack at zero spread.
# ---------------------------------------------------------------------------

def _thumb_flex_from_slider(g: FingerGeometry, d1: float, q2w: float) -> float:
    """Knuckle flexion from the single flexion-chain displacement.

    At zero spread the chain constraint is a sinusoid in the flexion angle;
    seeded from its closed form like every other angle stage.
    """
    b = g.pss_a_anchor
    m = g.mcp_center
    r = g.pss_a_slider_rest
    fx = m[0] - r[0] + d1
    fy = m[1] - r[1]
    fz = m[2] + b[2] - r[2]
    t = g.pss_a_link_length ** 2 - (fx * fx + fy * fy + fz * fz) \
        - (b[0] * b[0] + b[1] * b[1])
    pterm = 2.0 * (fx * b[0] + fy * b[1])
    qterm = 2.0 * (fy * b[0] - fx * b[1])
    seed = _sinusoid_seed(pterm, qterm, t, q2w,
                          g.q_lower[1] - 0.6, g.q_upper[1] + 0.6)
    if seed is None:
        raise NoConvergence("knuckle", "flexion chain cannot close at "
                                       f"displacement {d1:.6f}")

    def f_df(q2):
        ua, _, (_, _, c2, s2) = _pss_terms(g, 0.0, q2, d1, 0.0)
        f = ua[0] * ua[0] + ua[1] * ua[1] + ua[2] * ua[2] \
            - g.pss_a_link_length ** 2
        # d(R_z(q2) b)/dq2 rotated into the gap dot product
        db = (-s2 * b[0] - c2 * b[1], c2 * b[0] - s2 * b[1], 0.0)
        return f, 2.0 * (ua[0] * db[0] + ua[1] * db[1])

    q2, res, _, status = solve_scalar_root(f_df, seed, STAGE_SETTINGS)
    if status is not SolveStatus.CONVERGED:
        raise NoConvergence("knuckle", f"residual {res:.3e}")
    return q2


def _thumb_check(abduction: float, flex: float, pip: float,
                 g: FingerGeometry, exc) -> None:
    lo, hi = float(g.q_lower[0]), float(g.q_upper[0])
    if not (lo - 1e-12 <= abduction <= hi + 1e-12):
        raise exc(f"actuator 'abduction' angle {abduction:.6f} outside "
                  f"range [{lo:.6f}, {hi:.6f}]")
    for name, idx, val in (("flex", 0, flex), ("pip", 2, pip)):
        if not (g.travel_min[idx] - 1e-12 <= val <= g.travel_max[idx] + 1e-12):
            raise exc(f"actuator '{name}' displacement {val:.6f} outside "
                      f"travel [{g.travel_min[idx]:.6f}, {g.travel_max[idx]:.6f}]")


def thumb_fk(d: ThumbActuatorState, g: FingerGeometry,
             warm: Optional[FingerJointState] = None) -> FingerJointState:
    """Thumb joint angles from its three actuator values.

    Abduction maps through identically; the flexion stack is solved at zero
    spread because it rides on the abduction joint.
    """
    _thumb_check(d.abduction, d.flex, d.pip, g, OutOfTravel)
    if warm is not None:
        q2w, q3w, q4w = warm.mcp_flex, warm.pip_flex, warm.dip_flex
        crank_w = g.crank_rate_at_zero * q3w
    else:
        q2w = q3w = 0.0
        q4w = None
        crank_w = 0.0
    q2 = _thumb_flex_from_slider(g, d.flex, q2w)
    crank = _solve_crank_from_psu(g, d.pip, 0.0, q2, crank_w)
    q3 = _solve_pip_from_crank(g, crank, q3w)
    q4 = solve_dip_flex(q3, g, q4w)
    return FingerJointState(d.abduction, q2, q3, q4)


def thumb_ik(q: FingerJointState, g: FingerGeometry,
             warm: Optional[ThumbActuatorState] = None) -> ThumbActuatorState:
    """Thumb actuator values realizing the given joint angles."""
    q2, q3 = q.mcp_flex, q.pip_flex
    ua0, _, _ = _pss_terms(g, 0.0, q2, 0.0, 0.0)
    kyz = ua0[1] * ua0[1] + ua0[2] * ua0[2]
    disc = g.pss_a_link_length ** 2 - kyz
    if disc <= 0.0:
        raise NoConvergence("knuckle", "flexion chain cannot reach the "
                                       "commanded pose")

    def f_df(dv):
        ux = ua0[0] + dv
        return ux * ux + kyz - g.pss_a_link_length ** 2, 2.0 * ux

    d1, res, _, status = solve_scalar_root(f_df, math.sqrt(disc) - ua0[0],
                                           STAGE_SETTINGS)
    if status is not SolveStatus.CONVERGED:
        raise NoConvergence("knuckle", f"slider residual {res:.3e}")

    crank = _solve_crank_from_pip(g, q3, g.crank_rate_at_zero * q3)
    w0 = psu_residual(crank, 0.0, 0.0, q2, g)
    # quadratic in the displacement: seed from the closed form
    dg = psu_gradient(crank, 0.0, 0.0, q2, g)[1]
    half = 0.5 * dg          # = w_x at zero displacement
    disc = half * half - w0
    if disc <= 0.0:
        raise NoConvergence("pushrod", "chain cannot reach the commanded pose")

    def psu_f(dv):
        return (psu_residual(crank, dv, 0.0, q2, g),
                psu_gradient(crank, dv, 0.0, q2, g)[1])

    d3, res, _, status = solve_scalar_root(psu_f, math.sqrt(disc) - half,
                                           STAGE_SETTINGS)
    if status is not SolveStatus.CONVERGED:
        raise NoConvergence("pushrod", f"residual {res:.3e}")
    out = ThumbActuatorState(q.spread, d1, d3)
    _thumb_check(out.abduction, out.flex, out.pip, g, TravelExceeded)
    return out


def thumb_transmission_residuals(q: FingerJointState, d: ThumbActuatorState,
                                 g: FingerGeometry) -> Dict[str, float]:
    """Constraint residuals of a thumb (joint, actuator) pair.

    The abduction row is the direct-drive identity; the flexion chain is the
    single knuckle chain evaluated at zero spread (it rides on the abduction
    joint); pushrod, four-bar, and distal coupling match the finger stack.
    """
    crank = _solve_crank_from_pip(g, q.pip_flex,
                                  g.crank_rate_at_zero * q.pip_flex)
    ua, _, _ = _pss_terms(g, 0.0, q.mcp_flex, d.flex, 0.0)
    flex_chain = ua[0] * ua[0] + ua[1] * ua[1] + ua[2] * ua[2] \
        - g.pss_a_link_length ** 2
    return {
        "abduction": float(q.spread - d.abduction),
        "flexion_chain": float(flex_chain),
        "pushrod": float(psu_residual(crank, d.pip, 0.0, q.mcp_flex, g)),
        "pip_fourbar": float(pip_fourbar_residual(q.pip_flex, crank, g)),
        "distal_coupling": float(dip_residual(q.pip_flex, q.dip_flex, g)),
    }


# ---------------------------------------------------------------------------
# Joint limits.
# ---------------------------------------------------------------------------

def coupled_mcp_limit(q2: float, limit_map: CoupledLimitMap,
                      digit: str) -> Tuple[float, float]:
    """Symmetric abduction interval allowed at the given flexion."""
    a = limit_map.half_range(digit, q2)
    return (-a, a)


def clamp_command(q_cmd: HandJointState, g: HandGeometry) -> HandJointState:
    """Clamp a joint command to static limits and the coupled knuckle map.

    Order is fixed and documented: flexion joints clamp to static limits
    first, then finger abduction clamps to the coupled interval evaluated at
    the already-clamped flexion.  The distal joint is recomputed from the
    clamped pip angle, keeping the output coupling-consistent.  Idempotent.
    """
    out = {}
    for digit in DIGITS:
        fg = g.digits[digit]
        q = q_cmd.digits[digit]
        q2 = min(max(q.mcp_flex, float(fg.q_lower[1])), float(fg.q_upper[1]))
        q3 = min(max(q.pip_flex, float(fg.q_lower[2])), float(fg.q_upper[2]))
        lo1, hi1 = float(fg.q_lower[0]), float(fg.q_upper[0])
        if digit != "thumb":
            a_lo, a_hi = coupled_mcp_limit(q2, g.coupled_limits, digit)
            lo1, hi1 = max(lo1, a_lo), min(hi1, a_hi)
        q1 = min(max(q.spread, lo1), hi1)
        q4 = solve_dip_flex(q3, fg)
        out[digit] = FingerJointState(q1, q2, q3, q4)
    return HandJointState(out)


# ---------------------------------------------------------------------------
# Whole-hand FK / IK.
# ---------------------------------------------------------------------------

def hand_fk(q: HandJointState, g: HandGeometry) -> Dict[str, np.ndarray]:
    """Keypoint positions for all digits in the hand base frame.

    Returns a fixed label set: ``{digit}_{mcp,pip,dip,tip}`` for the five
    digits plus the configured palm labels.
    """
    points: Dict[str, np.ndarray] = {}
    for digit in DIGITS:
        rot, t = g.mounts[digit]
        pts = link_keypoints(q.digits[digit], g.digits[digit])
        world = pts @ rot.T + t
        for k, kp in enumerate(KEYPOINT_NAMES):
            points[f"{digit}_{kp}"] = world[k]
    for label, pos in g.palm_keypoints.items():
        points[label] = np.array(pos, dtype=float)
    return points


def digit_keypoints_jacobian(q: FingerJointState, digit: str, g: HandGeometry):
    """Digit keypoints in the hand frame plus their joint Jacobian.

    Returns (positions (4,3), jacobian (4,3,4)); Jacobian columns follow
    FingerJointState order with all four joints treated independently.
    """
    rot, t = g.mounts[digit]
    pts, jac = link_keypoints_jacobian(q, g.digits[digit])
    world = pts @ rot.T + t
    jac_world = np.einsum("ij,kjl->kil", rot, jac)
    return world, jac_world


def _solve_digit_ik(digit: str, q: FingerJointState, g: HandGeometry, warm):
    fg = g.digits[digit]
    try:
        if digit == "thumb":
            return thumb_ik(q, fg, warm)
        return finger_ik(q, fg, warm)
    except (TravelExceeded, NoConvergence) as exc:
        raise type(exc)(f"{digit}: {exc}") from exc


def hand_ik(q_cmd: HandJointState, g: HandGeometry,
            warm: Optional[Mapping[str, object]] = None,
            workers: int = 1) -> Dict[str, object]:
    """Actuator values for all 15 DoAs from a clamped joint command.

    The command must already satisfy clamp_command; infeasible commands
    surface as TravelExceeded tagged with the digit.  Per-digit solves are
    independent; ``workers`` > 1 distributes them over a thread pool with
    results keyed by digit, so the output is deterministic regardless of
    schedule.
    """
    warm = warm or {}
    if workers <= 1:
        return {digit: _solve_digit_ik(digit, q_cmd.digits[digit], g,
                                       warm.get(digit))
                for digit in DIGITS}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {digit: pool.submit(_solve_digit_ik, digit,
                                      q_cmd.digits[digit], g, warm.get(digit))
                   for digit in DIGITS}
        return {digit: futures[digit].result() for digit in DIGITS}


def hand_fk_from_actuators(d: Mapping[str, object], g: HandGeometry,
                           warm: Optional[Mapping[str, FingerJointState]] = None
                           ) -> HandJointState:
    """Joint state realized by the given actuator values (all digits)."""
    warm = warm or {}
    out = {}
    for digit in DIGITS:
        fg = g.digits[digit]
        if digit == "thumb":
            out[digit] = thumb_fk(d[digit], fg, warm.get(digit))
        else:
            out[digit] = finger_fk(d[digit], fg, warm.get(digit))
    return HandJointState(out)
