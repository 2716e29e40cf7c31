"""Transmission kinematics of one linkage-driven digit.

A digit is driven by three lead screws modeled as prismatic joints sliding
along -x of the digit base frame:

* two prismatic-spherical-spherical (PSS) chains drive the 2-DoF knuckle
  (``spread`` about y, then ``mcp_flex`` about z);
* one prismatic-spherical-universal (PSU) chain drives an input crank on the
  knuckle body, which drives ``pip_flex`` through a crossed four-bar;
* a second crossed four-bar couples ``dip_flex`` passively to ``pip_flex``.

Each chain contributes one scalar constraint written in squared-norm form
(``|anchor_a - anchor_b|^2 - link_length^2``), so residuals are smooth
polynomials in the trig terms and share their roots with the distance form.
Forward and inverse solves walk the transmission stagewise (knuckle, pushrod,
four-bar, coupling), each stage a one- or two-unknown root solve warm-started
from the previous cycle.  Warm starting is what pins the solution branch;
linkages admit mirror roots.

All positions are meters, angles radians.  Functions are pure; geometry is
treated as immutable after construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .solver import SolverSettings, SolveStatus, solve_root2, solve_scalar_root

# Stage solves run far below the 1e-9 acceptance bound so that FK/IK
# round-trips land within 1e-8 of each other in joint/actuator space.
STAGE_SETTINGS = SolverSettings(max_iterations=80, residual_tolerance=1e-13,
                                step_tolerance=1e-14, initial_damping=1e-10)


class FingerKinematicsError(Exception):
    """Base class for digit transmission failures."""


class OutOfTravel(FingerKinematicsError):
    """A commanded slider displacement lies outside the lead-screw travel."""


class TravelExceeded(FingerKinematicsError):
    """Inverse kinematics mapped a joint command outside lead-screw travel."""


class NoConvergence(FingerKinematicsError):
    """A stage solve failed; carries the stage name."""

    def __init__(self, stage: str, detail: str = ""):
        self.stage = stage
        super().__init__(f"stage '{stage}' did not converge{': ' + detail if detail else ''}")


class SingularCoupling(FingerKinematicsError):
    """The distal four-bar is at a toggle point; the coupling slope is undefined."""


@dataclass
class FingerJointState:
    """Joint angles of one digit, base to tip.

    ``dip_flex`` is passively coupled to ``pip_flex``; states emitted by the
    forward solve always satisfy the coupling constraint to 1e-9.
    """

    spread: float
    mcp_flex: float
    pip_flex: float
    dip_flex: float

    def as_array(self) -> np.ndarray:
        return np.array([self.spread, self.mcp_flex, self.pip_flex, self.dip_flex])

    @classmethod
    def from_array(cls, q) -> "FingerJointState":
        return cls(float(q[0]), float(q[1]), float(q[2]), float(q[3]))


@dataclass
class ActuatorState:
    """Lead-screw displacements: the two knuckle sliders and the pip slider."""

    mcp_a: float
    mcp_b: float
    pip: float

    def as_array(self) -> np.ndarray:
        return np.array([self.mcp_a, self.mcp_b, self.pip])

    @classmethod
    def from_array(cls, d) -> "ActuatorState":
        return cls(float(d[0]), float(d[1]), float(d[2]))


@dataclass
class FingerGeometry:
    """Anchor points, link lengths and travel limits of one digit.

    Frames:
      * base: digit base; x distal, y palmar (curl direction), z lateral.
        Sliders translate along -x.
      * knuckle: MCP output body; orientation R_y(spread) R_z(mcp_flex).
      * middle: middle phalanx; rotated R_z(pip_flex) from knuckle at the
        pip joint center.
      * distal: distal phalanx; rotated R_z(dip_flex) from middle at the
        dip joint center.

    Anchors fixed to a rotating body are stored in that body's frame; the
    distal-coupler anchor on the knuckle body is stored as its rest position
    in the middle frame (the two differ by R_z(pip_flex) about the pip
    center).  Link lengths must be consistent with the rest pose: at zero
    joint angles and zero travel every residual in this module evaluates to
    zero.  ``validate`` checks that at load.
    """

    # PSS chains driving the knuckle.
    pss_a_slider_rest: np.ndarray   # rest ball center of slider a, base frame
    pss_b_slider_rest: np.ndarray
    pss_a_anchor: np.ndarray        # ball anchor on knuckle body, knuckle frame
    pss_b_anchor: np.ndarray
    pss_a_link_length: float
    pss_b_link_length: float
    mcp_center: np.ndarray          # knuckle joint center, base frame

    # PSU chain driving the input crank on the knuckle body.
    psu_slider_rest: np.ndarray     # rest ball center of the pip slider, base frame
    crank_pivot: np.ndarray         # input crank pivot, knuckle frame
    psu_anchor_crank: np.ndarray    # pushrod anchor on the crank, crank frame
    psu_link_a_length: float        # slider ball to universal joint
    psu_link_b_length: float        # universal joint to crank anchor

    # Crossed four-bar: crank -> middle phalanx.
    pip_center: np.ndarray          # pip joint center, knuckle frame
    pip_coupler_anchor_crank: np.ndarray    # coupler anchor on crank, crank frame
    pip_coupler_anchor_middle: np.ndarray   # coupler anchor on middle phalanx, middle frame
    pip_coupler_length: float

    # Crossed four-bar: knuckle body -> distal phalanx.
    dip_center: np.ndarray                  # dip joint center, middle frame
    dip_coupler_anchor_knuckle: np.ndarray  # anchor on knuckle body, middle frame at rest
    dip_coupler_anchor_distal: np.ndarray   # anchor on distal phalanx, distal frame
    dip_coupler_length: float

    fingertip: np.ndarray           # fingertip point, distal frame

    travel_min: np.ndarray          # (3,) lead-screw travel, meters
    travel_max: np.ndarray
    q_lower: np.ndarray             # (4,) joint limits, radians
    q_upper: np.ndarray
    crank_range: Tuple[float, float] = (-math.pi / 2, math.pi / 2)

    # Derived at load.
    crank_rate_at_zero: float = field(init=False, default=1.0)
    knuckle_rate_at_zero: tuple = field(init=False, default=((0.0, 0.0), (0.0, 0.0)))

    def __post_init__(self) -> None:
        for name in ("pss_a_slider_rest", "pss_b_slider_rest", "pss_a_anchor",
                     "pss_b_anchor", "mcp_center", "psu_slider_rest",
                     "crank_pivot", "psu_anchor_crank", "pip_center",
                     "pip_coupler_anchor_crank", "pip_coupler_anchor_middle",
                     "dip_center", "dip_coupler_anchor_knuckle",
                     "dip_coupler_anchor_distal", "fingertip",
                     "travel_min", "travel_max", "q_lower", "q_upper"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        for name in ("pss_a_link_length", "pss_b_link_length", "psu_link_a_length",
                     "psu_link_b_length", "pip_coupler_length", "dip_coupler_length"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be strictly positive")
        if np.any(self.travel_min >= self.travel_max):
            raise ValueError("travel_min must be below travel_max elementwise")
        if np.any(self.q_lower > self.q_upper):
            raise ValueError("q_lower must not exceed q_upper")
        # Local linearization of the crank/pip four-bar, used to seed warm
        # starts when only a pip angle is known: crank ~= rate * pip_flex.
        dq3, dalpha = pip_fourbar_gradient(0.0, 0.0, self)
        if abs(dalpha) > 1e-15:
            self.crank_rate_at_zero = -dq3 / dalpha
        else:
            self.crank_rate_at_zero = 1.0
        # Rest linearization of the knuckle map, dq/dd = -(df/dq)^-1 df/dd,
        # seeding the forward knuckle solve from arbitrary displacements.
        jq, jd = mcp_jacobians(0.0, 0.0, ActuatorState(0.0, 0.0, 0.0), self)
        det = jq[0, 0] * jq[1, 1] - jq[0, 1] * jq[1, 0]
        if abs(det) > 1e-18:
            inv = np.array([[jq[1, 1], -jq[0, 1]], [-jq[1, 0], jq[0, 0]]]) / det
            m = -inv @ jd
            self.knuckle_rate_at_zero = ((m[0, 0], m[0, 1]), (m[1, 0], m[1, 1]))

    def validate(self, tol: float = 1e-12) -> dict:
        """Residuals of every chain at the rest configuration.

        Raises ValueError if any exceeds ``tol``; geometry files must be
        constructed consistent (back-solved link lengths).
        """
        rest = {
            "knuckle_a": float(mcp_residual(0.0, 0.0, ActuatorState(0, 0, 0), self)[0]),
            "knuckle_b": float(mcp_residual(0.0, 0.0, ActuatorState(0, 0, 0), self)[1]),
            "pip_fourbar": float(pip_fourbar_residual(0.0, 0.0, self)),
            "pushrod": float(psu_residual(0.0, 0.0, 0.0, 0.0, self)),
            "dip_fourbar": float(dip_residual(0.0, 0.0, self)),
        }
        bad = {k: v for k, v in rest.items() if abs(v) > tol}
        if bad:
            raise ValueError(f"geometry violates rest-pose consistency: {bad}")
        return rest


# ---------------------------------------------------------------------------
# Residuals and analytic gradients.  Private float kernels feed both the
# public array API and the stage solvers.
# ---------------------------------------------------------------------------

def _knuckle_rotation(c1: float, s1: float, c2: float, s2: float):
    """Rows of R_y(spread) @ R_z(mcp_flex)."""
    return ((c1 * c2, -c1 * s2, s1),
            (s2, c2, 0.0),
            (-s1 * c2, s1 * s2, c1))


def _rot_apply(rows, v):
    return (rows[0][0] * v[0] + rows[0][1] * v[1] + rows[0][2] * v[2],
            rows[1][0] * v[0] + rows[1][1] * v[1] + rows[1][2] * v[2],
            rows[2][0] * v[0] + rows[2][1] * v[1] + rows[2][2] * v[2])


def _knuckle_rotation_derivatives(c1, s1, c2, s2):
    """d/d(spread) and d/d(mcp_flex) of the knuckle rotation rows."""
    d1 = ((-s1 * c2, s1 * s2, c1),
          (0.0, 0.0, 0.0),
          (-c1 * c2, c1 * s2, -s1))
    d2 = ((-c1 * s2, -c1 * c2, 0.0),
          (c2, -s2, 0.0),
          (s1 * s2, s1 * c2, 0.0))
    return d1, d2


def _pss_terms(g: FingerGeometry, q1: float, q2: float, d1: float, d2: float):
    """Sphere-gap vectors of both knuckle chains at the given state."""
    c1, s1 = math.cos(q1), math.sin(q1)
    c2, s2 = math.cos(q2), math.sin(q2)
    rot = _knuckle_rotation(c1, s1, c2, s2)
    m = g.mcp_center
    a_anchor = _rot_apply(rot, g.pss_a_anchor)
    b_anchor = _rot_apply(rot, g.pss_b_anchor)
    ra = g.pss_a_slider_rest
    rb = g.pss_b_slider_rest
    ua = (m[0] + a_anchor[0] - ra[0] + d1, m[1] + a_anchor[1] - ra[1],
          m[2] + a_anchor[2] - ra[2])
    ub = (m[0] + b_anchor[0] - rb[0] + d2, m[1] + b_anchor[1] - rb[1],
          m[2] + b_anchor[2] - rb[2])
    return ua, ub, (c1, s1, c2, s2)


def mcp_residual(q1: float, q2: float, d: ActuatorState, g: FingerGeometry) -> np.ndarray:
    """Squared-length constraint residuals of the two knuckle chains."""
    ua, ub, _ = _pss_terms(g, q1, q2, d.mcp_a, d.mcp_b)
    fa = ua[0] * ua[0] + ua[1] * ua[1] + ua[2] * ua[2] - g.pss_a_link_length ** 2
    fb = ub[0] * ub[0] + ub[1] * ub[1] + ub[2] * ub[2] - g.pss_b_link_length ** 2
    return np.array([fa, fb])


def mcp_jacobians(q1: float, q2: float, d: ActuatorState, g: FingerGeometry):
    """Analytic Jacobians of ``mcp_residual``: (d/dq (2,2), d/dd (2,2))."""
    ua, ub, (c1, s1, c2, s2) = _pss_terms(g, q1, q2, d.mcp_a, d.mcp_b)
    d1, d2 = _knuckle_rotation_derivatives(c1, s1, c2, s2)
    da_q1 = _rot_apply(d1, g.pss_a_anchor)
    da_q2 = _rot_apply(d2, g.pss_a_anchor)
    db_q1 = _rot_apply(d1, g.pss_b_anchor)
    db_q2 = _rot_apply(d2, g.pss_b_anchor)
    jq = np.array([
        [2.0 * (ua[0] * da_q1[0] + ua[1] * da_q1[1] + ua[2] * da_q1[2]),
         2.0 * (ua[0] * da_q2[0] + ua[1] * da_q2[1] + ua[2] * da_q2[2])],
        [2.0 * (ub[0] * db_q1[0] + ub[1] * db_q1[1] + ub[2] * db_q1[2]),
         2.0 * (ub[0] * db_q2[0] + ub[1] * db_q2[1] + ub[2] * db_q2[2])],
    ])
    jd = np.array([[2.0 * ua[0], 0.0], [0.0, 2.0 * ub[0]]])
    return jq, jd


def pip_fourbar_residual(q3: float, crank_angle: float, g: FingerGeometry) -> float:
    """Squared-length constraint of the crank/middle-phalanx coupler."""
    c3, s3 = math.cos(q3), math.sin(q3)
    ca, sa = math.cos(crank_angle), math.sin(crank_angle)
    p5 = g.pip_coupler_anchor_middle
    p4 = g.pip_coupler_anchor_crank
    pp = g.pip_center
    p3 = g.crank_pivot
    ux = pp[0] + c3 * p5[0] - s3 * p5[1] - p3[0] - ca * p4[0] + sa * p4[1]
    uy = pp[1] + s3 * p5[0] + c3 * p5[1] - p3[1] - sa * p4[0] - ca * p4[1]
    uz = pp[2] + p5[2] - p3[2] - p4[2]
    return ux * ux + uy * uy + uz * uz - g.pip_coupler_length ** 2


def pip_fourbar_gradient(q3: float, crank_angle: float, g: FingerGeometry):
    """(d/dq3, d/dcrank) of ``pip_fourbar_residual``."""
    c3, s3 = math.cos(q3), math.sin(q3)
    ca, sa = math.cos(crank_angle), math.sin(crank_angle)
    p5 = g.pip_coupler_anchor_middle
    p4 = g.pip_coupler_anchor_crank
    pp = g.pip_center
    p3 = g.crank_pivot
    ux = pp[0] + c3 * p5[0] - s3 * p5[1] - p3[0] - ca * p4[0] + sa * p4[1]
    uy = pp[1] + s3 * p5[0] + c3 * p5[1] - p3[1] - sa * p4[0] - ca * p4[1]
    uz = pp[2] + p5[2] - p3[2] - p4[2]
    # d(R_z(t) v)/dt = (-s vx - c vy, c vx - s vy, 0)
    d5x, d5y = -s3 * p5[0] - c3 * p5[1], c3 * p5[0] - s3 * p5[1]
    d4x, d4y = -sa * p4[0] - ca * p4[1], ca * p4[0] - sa * p4[1]
    dq3 = 2.0 * (ux * d5x + uy * d5y)
    dcrank = -2.0 * (ux * d4x + uy * d4y)
    return dq3, dcrank


def psu_residual(crank_angle: float, d3: float, q1: float, q2: float,
                 g: FingerGeometry) -> float:
    """Pushrod squared-length constraint with the bent-joint correction.

    The universal joint bends with the knuckle spread; its effect is folded
    into the effective squared pushrod length by the law of cosines with the
    bend angle taken equal to ``q1``.  The target term depends on q1 only
    through cos(q1), so the residual is even in q1 when the chain anchors lie
    in the digit's sagittal plane.
    """
    w = _psu_gap(crank_angle, d3, q1, q2, g)
    a, b = g.psu_link_a_length, g.psu_link_b_length
    eff = a * a + b * b + 2.0 * a * b * math.cos(q1)
    return w[0] * w[0] + w[1] * w[1] + w[2] * w[2] - eff


def _psu_gap(crank_angle: float, d3: float, q1: float, q2: float, g: FingerGeometry):
    ca, sa = math.cos(crank_angle), math.sin(crank_angle)
    p22 = g.psu_anchor_crank
    p3 = g.crank_pivot
    anchor_k = (p3[0] + ca * p22[0] - sa * p22[1],
                p3[1] + sa * p22[0] + ca * p22[1],
                p3[2] + p22[2])
    c1, s1 = math.cos(q1), math.sin(q1)
    c2, s2 = math.cos(q2), math.sin(q2)
    rot = _knuckle_rotation(c1, s1, c2, s2)
    world = _rot_apply(rot, anchor_k)
    m = g.mcp_center
    r = g.psu_slider_rest
    return (m[0] + world[0] - r[0] + d3, m[1] + world[1] - r[1],
            m[2] + world[2] - r[2])


def psu_gradient(crank_angle: float, d3: float, q1: float, q2: float,
                 g: FingerGeometry):
    """(d/dcrank, d/dd3, d/dq1, d/dq2) of ``psu_residual``."""
    ca, sa = math.cos(crank_angle), math.sin(crank_angle)
    p22 = g.psu_anchor_crank
    p3 = g.crank_pivot
    anchor_k = (p3[0] + ca * p22[0] - sa * p22[1],
                p3[1] + sa * p22[0] + ca * p22[1],
                p3[2] + p22[2])
    danchor = (-sa * p22[0] - ca * p22[1], ca * p22[0] - sa * p22[1], 0.0)
    c1, s1 = math.cos(q1), math.sin(q1)
    c2, s2 = math.cos(q2), math.sin(q2)
    rot = _knuckle_rotation(c1, s1, c2, s2)
    d1, d2 = _knuckle_rotation_derivatives(c1, s1, c2, s2)
    world = _rot_apply(rot, anchor_k)
    m = g.mcp_center
    r = g.psu_slider_rest
    w = (m[0] + world[0] - r[0] + d3, m[1] + world[1] - r[1], m[2] + world[2] - r[2])
    w_crank = _rot_apply(rot, danchor)
    w_q1 = _rot_apply(d1, anchor_k)
    w_q2 = _rot_apply(d2, anchor_k)
    a, b = g.psu_link_a_length, g.psu_link_b_length
    dcrank = 2.0 * (w[0] * w_crank[0] + w[1] * w_crank[1] + w[2] * w_crank[2])
    dd3 = 2.0 * w[0]
    dq1 = 2.0 * (w[0] * w_q1[0] + w[1] * w_q1[1] + w[2] * w_q1[2]) \
        + 2.0 * a * b * math.sin(q1)
    dq2 = 2.0 * (w[0] * w_q2[0] + w[1] * w_q2[1] + w[2] * w_q2[2])
    return dcrank, dd3, dq1, dq2


def dip_residual(q3: float, q4: float, g: FingerGeometry) -> float:
    """Squared-length constraint of the distal coupler.

    The knuckle-side anchor is fixed on the knuckle body; expressed in the
    middle frame it rotates by -q3 about the pip center, which is what couples
    the distal joint to the pip joint.
    """
    c3, s3 = math.cos(q3), math.sin(q3)
    c4, s4 = math.cos(q4), math.sin(q4)
    p6 = g.dip_coupler_anchor_knuckle
    p7 = g.dip_coupler_anchor_distal
    pd = g.dip_center
    mx = c3 * p6[0] + s3 * p6[1]
    my = -s3 * p6[0] + c3 * p6[1]
    nx = pd[0] + c4 * p7[0] - s4 * p7[1]
    ny = pd[1] + s4 * p7[0] + c4 * p7[1]
    vz = p6[2] - pd[2] - p7[2]
    vx = mx - nx
    vy = my - ny
    return vx * vx + vy * vy + vz * vz - g.dip_coupler_length ** 2


def dip_gradient(q3: float, q4: float, g: FingerGeometry):
    """(d/dq3, d/dq4) of ``dip_residual``."""
    c3, s3 = math.cos(q3), math.sin(q3)
    c4, s4 = math.cos(q4), math.sin(q4)
    p6 = g.dip_coupler_anchor_knuckle
    p7 = g.dip_coupler_anchor_distal
    pd = g.dip_center
    mx = c3 * p6[0] + s3 * p6[1]
    my = -s3 * p6[0] + c3 * p6[1]
    nx = pd[0] + c4 * p7[0] - s4 * p7[1]
    ny = pd[1] + s4 * p7[0] + c4 * p7[1]
    vx, vy = mx - nx, my - ny
    dmx = -s3 * p6[0] + c3 * p6[1]
    dmy = -c3 * p6[0] - s3 * p6[1]
    dnx = -s4 * p7[0] - c4 * p7[1]
    dny = c4 * p7[0] - s4 * p7[1]
    dq3 = 2.0 * (vx * dmx + vy * dmy)
    dq4 = -2.0 * (vx * dnx + vy * dny)
    return dq3, dq4


def solve_dip_flex(q3: float, g: FingerGeometry, warm: Optional[float] = None,
                   settings: SolverSettings = STAGE_SETTINGS) -> float:
    """Distal joint angle coupled to the given pip angle.

    Seeds from the closed form of the coupler sinusoid (nearest-root branch
    around the warm value, or around the pip angle itself when cold, since
    the coupling ratio is near one) and polishes with Newton.
    """
    prefer = warm if warm is not None else q3
    c3, s3 = math.cos(q3), math.sin(q3)
    p6 = g.dip_coupler_anchor_knuckle
    p7 = g.dip_coupler_anchor_distal
    pd = g.dip_center
    gx = c3 * p6[0] + s3 * p6[1] - pd[0]
    gy = -s3 * p6[0] + c3 * p6[1] - pd[1]
    gz = p6[2] - pd[2] - p7[2]
    t = g.dip_coupler_length ** 2 - (gx * gx + gy * gy + gz * gz) \
        - (p7[0] * p7[0] + p7[1] * p7[1])
    pterm = -2.0 * (gx * p7[0] + gy * p7[1])
    qterm = -2.0 * (gy * p7[0] - gx * p7[1])
    seed = _sinusoid_seed(pterm, qterm, t, prefer, -2.2, 2.2)
    if seed is None:
        raise NoConvergence("dip_coupling", f"coupler cannot close at pip={q3:.3f}")
    q4, res, _, status = solve_scalar_root(
        lambda q4: (dip_residual(q3, q4, g), dip_gradient(q3, q4, g)[1]),
        seed, settings)
    if status is not SolveStatus.CONVERGED:
        raise NoConvergence("dip_coupling", f"residual {res:.3e} at pip={q3:.3f}")
    return q4


def dip_coupling_derivative(q3: float, g: FingerGeometry,
                            q4: Optional[float] = None) -> float:
    """Slope d(dip_flex)/d(pip_flex) of the passive coupling at ``q3``.

    Implicit differentiation of the coupler constraint at the coupled
    solution.  Raises SingularCoupling at a four-bar toggle point.
    """
    if q4 is None:
        q4 = solve_dip_flex(q3, g)
    dq3, dq4 = dip_gradient(q3, q4, g)
    if abs(dq4) < 1e-12:
        raise SingularCoupling(f"coupler toggle at pip={q3:.4f}")
    return -dq3 / dq4


# ---------------------------------------------------------------------------
# Stagewise forward / inverse transmission solves.
#
# Every angle stage has the form P cos(x) + Q sin(x) = T, a sinusoid with at
# most two roots per period.  Newton alone is unreliable on sinusoids (flat
# tops stall it, and cold starts can hop to the mirror root), so each stage
# seeds from the closed form, filtered to the mechanism's operating window
# and tie-broken toward the warm value, then polishes with Newton.
# ---------------------------------------------------------------------------

def _sinusoid_seed(p: float, q: float, t: float, prefer: float,
                   lo: float, hi: float) -> Optional[float]:
    """Root of p cos(x) + q sin(x) = t in [lo, hi] nearest ``prefer``.

    Returns None when no root exists (target outside the sinusoid's range)
    or none lands in the window.  A relative slack of 1e-9 absorbs rounding
    at reach limits, where the two roots coincide.
    """
    amp = math.hypot(p, q)
    if amp < 1e-300:
        return None
    c = t / amp
    if c > 1.0:
        if c > 1.0 + 1e-9:
            return None
        c = 1.0
    elif c < -1.0:
        if c < -1.0 - 1e-9:
            return None
        c = -1.0
    phase = math.atan2(q, p)
    delta = math.acos(c)
    best = None
    two_pi = 2.0 * math.pi
    for root in (phase + delta, phase - delta):
        # shift by whole turns to land nearest the preferred value
        shifted = root - two_pi * round((root - prefer) / two_pi)
        for cand in (shifted, shifted - two_pi, shifted + two_pi):
            if lo <= cand <= hi and (best is None or
                                     abs(cand - prefer) < abs(best - prefer)):
                best = cand
    return best


# Slack added around operating windows when filtering seed roots; mirror
# roots sit far outside, so a generous margin is safe.
_WINDOW_SLACK = 0.3


def _check_travel(d: ActuatorState, g: FingerGeometry, exc) -> None:
    arr = (d.mcp_a, d.mcp_b, d.pip)
    names = ("mcp_a", "mcp_b", "pip")
    for i in range(3):
        if not (g.travel_min[i] - 1e-12 <= arr[i] <= g.travel_max[i] + 1e-12):
            raise exc(f"actuator '{names[i]}' displacement {arr[i]:.6f} outside "
                      f"travel [{g.travel_min[i]:.6f}, {g.travel_max[i]:.6f}]")


def _knuckle_f_j(g: FingerGeometry, d1: float, d2: float):
    # Hot path of the forward solve: everything hoisted to plain floats so
    # the Newton iterations stay out of numpy scalar arithmetic.
    ax, ay, az = map(float, g.pss_a_anchor)
    bx, by, bz = map(float, g.pss_b_anchor)
    mx, my, mz = map(float, g.mcp_center)
    rax, ray, raz = map(float, g.pss_a_slider_rest)
    rbx, rby, rbz = map(float, g.pss_b_slider_rest)
    la2 = float(g.pss_a_link_length) ** 2
    lb2 = float(g.pss_b_link_length) ** 2

    def f_j(q1, q2):
        c1, s1 = math.cos(q1), math.sin(q1)
        c2, s2 = math.cos(q2), math.sin(q2)
        # rows of R_y(spread) @ R_z(mcp_flex) applied to both anchors
        uax = mx + (c1 * c2 * ax - c1 * s2 * ay + s1 * az) - rax + d1
        uay = my + (s2 * ax + c2 * ay) - ray
        uaz = mz + (-s1 * c2 * ax + s1 * s2 * ay + c1 * az) - raz
        ubx = mx + (c1 * c2 * bx - c1 * s2 * by + s1 * bz) - rbx + d2
        uby = my + (s2 * bx + c2 * by) - rby
        ubz = mz + (-s1 * c2 * bx + s1 * s2 * by + c1 * bz) - rbz
        fa = uax * uax + uay * uay + uaz * uaz - la2
        fb = ubx * ubx + uby * uby + ubz * ubz - lb2
        # derivative rows of the rotation, contracted with the gap vectors
        da1x = -s1 * c2 * ax + s1 * s2 * ay + c1 * az
        da1z = -c1 * c2 * ax + c1 * s2 * ay - s1 * az
        da2x = -c1 * s2 * ax - c1 * c2 * ay
        da2y = c2 * ax - s2 * ay
        da2z = s1 * s2 * ax + s1 * c2 * ay
        db1x = -s1 * c2 * bx + s1 * s2 * by + c1 * bz
        db1z = -c1 * c2 * bx + c1 * s2 * by - s1 * bz
        db2x = -c1 * s2 * bx - c1 * c2 * by
        db2y = c2 * bx - s2 * by
        db2z = s1 * s2 * bx + s1 * c2 * by
        j11 = 2.0 * (uax * da1x + uaz * da1z)
        j12 = 2.0 * (uax * da2x + uay * da2y + uaz * da2z)
        j21 = 2.0 * (ubx * db1x + ubz * db1z)
        j22 = 2.0 * (ubx * db2x + uby * db2y + ubz * db2z)
        return fa, fb, j11, j12, j21, j22
    return f_j


def _solve_knuckle_fk(g: FingerGeometry, d1: float, d2: float,
                      q1w: float, q2w: float,
                      warm_given: bool) -> Tuple[float, float]:
    if not warm_given:
        # Rest linearization as a cold seed.
        m = g.knuckle_rate_at_zero
        q1w = m[0][0] * d1 + m[0][1] * d2
        q2w = m[1][0] * d1 + m[1][1] * d2
    q1, q2, res, _, status = solve_root2(_knuckle_f_j(g, d1, d2), q1w, q2w,
                                         STAGE_SETTINGS)
    if status is SolveStatus.CONVERGED:
        return q1, q2
    # Continuation fallback: walk the displacements in from zero, where the
    # rest pose is the exact solution.
    q1, q2 = 0.0, 0.0
    for t in (0.25, 0.5, 0.75, 1.0):
        q1, q2, res, _, status = solve_root2(
            _knuckle_f_j(g, t * d1, t * d2), q1, q2, STAGE_SETTINGS)
        if status is not SolveStatus.CONVERGED:
            raise NoConvergence("knuckle", f"residual {res:.3e}")
    return q1, q2


def _solve_crank_from_psu(g: FingerGeometry, d3: float, q1: float, q2: float,
                          crank_w: float) -> float:
    # |w|^2 = |C + R Rz(crank) p22|^2 with C independent of the crank angle,
    # giving P cos + Q sin = T with the terms below (E = R^T C).
    c1, s1 = math.cos(q1), math.sin(q1)
    c2, s2 = math.cos(q2), math.sin(q2)
    rot = _knuckle_rotation(c1, s1, c2, s2)
    p3 = g.crank_pivot
    pivot_world = _rot_apply(rot, (p3[0], p3[1], p3[2]))
    m = g.mcp_center
    r = g.psu_slider_rest
    cx = m[0] + pivot_world[0] - r[0] + d3
    cy = m[1] + pivot_world[1] - r[1]
    cz = m[2] + pivot_world[2] - r[2]
    ex = rot[0][0] * cx + rot[1][0] * cy + rot[2][0] * cz
    ey = rot[0][1] * cx + rot[1][1] * cy + rot[2][1] * cz
    p22 = g.psu_anchor_crank
    a, b = g.psu_link_a_length, g.psu_link_b_length
    eff = a * a + b * b + 2.0 * a * b * c1
    t = eff - (cx * cx + cy * cy + cz * cz) \
        - (p22[0] * p22[0] + p22[1] * p22[1] + p22[2] * p22[2]) \
        - 2.0 * (rot[0][2] * cx + rot[1][2] * cy + rot[2][2] * cz) * p22[2]
    pterm = 2.0 * (ex * p22[0] + ey * p22[1])
    qterm = 2.0 * (ey * p22[0] - ex * p22[1])
    seed = _sinusoid_seed(pterm, qterm, t, crank_w,
                          g.crank_range[0] - _WINDOW_SLACK,
                          g.crank_range[1] + _WINDOW_SLACK)
    if seed is None:
        raise NoConvergence("pushrod", "no crank angle reaches the commanded "
                                       "displacement")
    # Fused residual+derivative newton closure in plain floats; C (the
    # crank-independent offset) and eff were already assembled above.
    p22x, p22y, p22z = float(p22[0]), float(p22[1]), float(p22[2])
    cx, cy, cz, eff = float(cx), float(cy), float(cz), float(eff)
    r00, r01, r02 = rot[0]
    r10, r11, r12 = rot[1]
    r20, r21, r22 = rot[2]

    def psu_f(ang):
        ca2, sa2 = math.cos(ang), math.sin(ang)
        kx = ca2 * p22x - sa2 * p22y
        ky = sa2 * p22x + ca2 * p22y
        wx = cx + r00 * kx + r01 * ky + r02 * p22z
        wy = cy + r10 * kx + r11 * ky + r12 * p22z
        wz = cz + r20 * kx + r21 * ky + r22 * p22z
        dkx, dky = -ky, kx
        dwx = r00 * dkx + r01 * dky
        dwy = r10 * dkx + r11 * dky
        dwz = r20 * dkx + r21 * dky
        return (wx * wx + wy * wy + wz * wz - eff,
                2.0 * (wx * dwx + wy * dwy + wz * dwz))

    crank, res, _, status = solve_scalar_root(psu_f, seed, STAGE_SETTINGS)
    if status is not SolveStatus.CONVERGED:
        raise NoConvergence("pushrod", f"residual {res:.3e}")
    if not (g.crank_range[0] - 1e-9 <= crank <= g.crank_range[1] + 1e-9):
        raise NoConvergence("pushrod", f"crank angle {crank:.4f} left configured range")
    return crank


def _solve_pip_from_crank(g: FingerGeometry, crank: float, q3w: float) -> float:
    ca, sa = math.cos(crank), math.sin(crank)
    p4 = g.pip_coupler_anchor_crank
    p3 = g.crank_pivot
    pp = g.pip_center
    p5 = g.pip_coupler_anchor_middle
    fx = pp[0] - p3[0] - ca * p4[0] + sa * p4[1]
    fy = pp[1] - p3[1] - sa * p4[0] - ca * p4[1]
    fz = pp[2] - p3[2] - p4[2] + p5[2]
    t = g.pip_coupler_length ** 2 - (fx * fx + fy * fy + fz * fz) \
        - (p5[0] * p5[0] + p5[1] * p5[1])
    pterm = 2.0 * (fx * p5[0] + fy * p5[1])
    qterm = 2.0 * (fy * p5[0] - fx * p5[1])
    seed = _sinusoid_seed(pterm, qterm, t, q3w,
                          g.q_lower[2] - 2.0 * _WINDOW_SLACK,
                          g.q_upper[2] + 2.0 * _WINDOW_SLACK)
    if seed is None:
        raise NoConvergence("pip_fourbar", f"no pip angle closes the coupler "
                                           f"at crank {crank:.4f}")
    q3, res, _, status = solve_scalar_root(
        lambda ang: (pip_fourbar_residual(ang, crank, g),
                     pip_fourbar_gradient(ang, crank, g)[0]),
        seed, STAGE_SETTINGS)
    if status is not SolveStatus.CONVERGED:
        raise NoConvergence("pip_fourbar", f"residual {res:.3e}")
    return q3


def _solve_crank_from_pip(g: FingerGeometry, q3: float, crank_w: float) -> float:
    c3, s3 = math.cos(q3), math.sin(q3)
    p5 = g.pip_coupler_anchor_middle
    pp = g.pip_center
    p3 = g.crank_pivot
    p4 = g.pip_coupler_anchor_crank
    gx = pp[0] + c3 * p5[0] - s3 * p5[1] - p3[0]
    gy = pp[1] + s3 * p5[0] + c3 * p5[1] - p3[1]
    gz = pp[2] + p5[2] - p3[2] - p4[2]
    t = g.pip_coupler_length ** 2 - (gx * gx + gy * gy + gz * gz) \
        - (p4[0] * p4[0] + p4[1] * p4[1])
    pterm = -2.0 * (gx * p4[0] + gy * p4[1])
    qterm = -2.0 * (gy * p4[0] - gx * p4[1])
    seed = _sinusoid_seed(pterm, qterm, t, crank_w,
                          g.crank_range[0] - _WINDOW_SLACK,
                          g.crank_range[1] + _WINDOW_SLACK)
    if seed is None:
        raise NoConvergence("pip_fourbar", f"no crank angle closes the "
                                           f"coupler at pip {q3:.4f}")
    crank, res, _, status = solve_scalar_root(
        lambda ang: (pip_fourbar_residual(q3, ang, g),
                     pip_fourbar_gradient(q3, ang, g)[1]),
        seed, STAGE_SETTINGS)
    if status is not SolveStatus.CONVERGED:
        raise NoConvergence("pip_fourbar", f"residual {res:.3e}")
    return crank


def finger_fk(d: ActuatorState, g: FingerGeometry,
              warm: Optional[FingerJointState] = None) -> FingerJointState:
    """Joint angles produced by the given slider displacements.

    Stage order mirrors the physical cascade: knuckle chains, pushrod (crank
    angle), pip four-bar, distal coupling.  Raises OutOfTravel for sliders
    outside the lead-screw range and NoConvergence (tagged with the stage) if
    any solve fails.
    """
    _check_travel(d, g, OutOfTravel)
    if warm is not None:
        q1w, q2w, q3w, q4w = warm.spread, warm.mcp_flex, warm.pip_flex, warm.dip_flex
        crank_w = g.crank_rate_at_zero * q3w
    else:
        q1w = q2w = q3w = q4w = 0.0
        crank_w = 0.0
    q1, q2 = _solve_knuckle_fk(g, d.mcp_a, d.mcp_b, q1w, q2w, warm is not None)
    crank = _solve_crank_from_psu(g, d.pip, q1, q2, crank_w)
    q3 = _solve_pip_from_crank(g, crank, q3w)
    q4 = solve_dip_flex(q3, g, q4w if warm is not None else None)
    return FingerJointState(q1, q2, q3, q4)


def finger_ik(q: FingerJointState, g: FingerGeometry,
              warm: Optional[ActuatorState] = None) -> ActuatorState:
    """Slider displacements realizing the given joint angles.

    The distal angle is recomputed from the pip angle rather than trusted.
    Raises TravelExceeded if the command maps outside lead-screw travel
    (infeasible joint command) and NoConvergence on stage failure.

    ``warm`` is accepted for call-site symmetry with the forward solve; the
    displacement stages are quadratic and seeded from their closed form on
    the physical branch, which both pins the branch and converges in one or
    two polish steps, so a warm displacement cannot improve on it.
    """
    q1, q2, q3 = q.spread, q.mcp_flex, q.pip_flex

    # With q fixed the two knuckle constraints decouple: each is scalar in
    # its own slider displacement, quadratic with two roots.  The physical
    # branch keeps the chain extending distally (positive gap x component);
    # seed from its closed form so warm starts can never cross to the mirror
    # root, and let Newton polish absorb rounding.
    ua0, ub0, _ = _pss_terms(g, q1, q2, 0.0, 0.0)

    def slider(stage: str, gap0, link_length: float) -> float:
        kx, kyz = gap0[0], gap0[1] * gap0[1] + gap0[2] * gap0[2]
        ll2 = link_length * link_length
        disc = ll2 - kyz
        if disc <= 0.0:
            raise NoConvergence(stage, "chain cannot reach the commanded pose")

        def f_df(dv):
            ux = kx + dv
            return ux * ux + kyz - ll2, 2.0 * ux

        seed = math.sqrt(disc) - kx
        dv, res, _, status = solve_scalar_root(f_df, seed, STAGE_SETTINGS)
        if status is not SolveStatus.CONVERGED:
            raise NoConvergence(stage, f"slider residual {res:.3e}")
        return dv

    d1 = slider("knuckle", ua0, g.pss_a_link_length)
    d2 = slider("knuckle", ub0, g.pss_b_link_length)
    crank = _solve_crank_from_pip(g, q3, g.crank_rate_at_zero * q3)
    if not (g.crank_range[0] - 1e-9 <= crank <= g.crank_range[1] + 1e-9):
        raise NoConvergence("pip_fourbar", f"crank angle {crank:.4f} left configured range")

    # The pushrod constraint is also quadratic in its displacement; same
    # closed-form seed on the extending branch.
    w0 = _psu_gap(crank, 0.0, q1, q2, g)
    a, b = g.psu_link_a_length, g.psu_link_b_length
    eff = a * a + b * b + 2.0 * a * b * math.cos(q1)
    disc = eff - w0[1] * w0[1] - w0[2] * w0[2]
    if disc <= 0.0:
        raise NoConvergence("pushrod", "chain cannot reach the commanded pose")

    def psu_f(dv):
        return (psu_residual(crank, dv, q1, q2, g),
                psu_gradient(crank, dv, q1, q2, g)[1])

    d3, res, _, status = solve_scalar_root(psu_f, math.sqrt(disc) - w0[0],
                                           STAGE_SETTINGS)
    if status is not SolveStatus.CONVERGED:
        raise NoConvergence("pushrod", f"residual {res:.3e}")
    out = ActuatorState(d1, d2, d3)
    _check_travel(out, g, TravelExceeded)
    return out


def transmission_residuals(q: FingerJointState, d: ActuatorState,
                           g: FingerGeometry) -> Dict[str, float]:
    """Constraint residuals of a (joint, actuator) pair, all chains.

    The crank angle is an internal coordinate, so it is recovered from the
    four-bar before the pushrod chain is checked; its own residual certifies
    that recovery.  All entries vanish iff the pair is transmission
    consistent.
    """
    crank = _solve_crank_from_pip(g, q.pip_flex,
                                  g.crank_rate_at_zero * q.pip_flex)
    knuckle = mcp_residual(q.spread, q.mcp_flex, d, g)
    return {
        "knuckle_a": float(knuckle[0]),
        "knuckle_b": float(knuckle[1]),
        "pushrod": float(psu_residual(crank, d.pip, q.spread, q.mcp_flex, g)),
        "pip_fourbar": float(pip_fourbar_residual(q.pip_flex, crank, g)),
        "distal_coupling": float(dip_residual(q.pip_flex, q.dip_flex, g)),
    }


# ---------------------------------------------------------------------------
# Link keypoints (joint centers + fingertip) and their joint Jacobian.
# ---------------------------------------------------------------------------

KEYPOINT_NAMES = ("mcp", "pip", "dip", "tip")


def link_keypoints(q: FingerJointState, g: FingerGeometry) -> np.ndarray:
    """Positions (4, 3) of the mcp/pip/dip joint centers and fingertip.

    Expressed in the digit base frame through the transmission frame chain
    R_y(spread) R_z(mcp_flex) -> R_z(pip_flex) -> R_z(dip_flex).
    """
    pts, _ = link_keypoints_jacobian(q, g, with_jacobian=False)
    return pts


def link_keypoints_jacobian(q: FingerJointState, g: FingerGeometry,
                            with_jacobian: bool = True):
    """Keypoints (4, 3) and, optionally, their Jacobian (4, 3, 4).

    Jacobian axis order matches FingerJointState: spread, mcp_flex, pip_flex,
    dip_flex, treating all four as independent (the distal coupling chain
    rule is applied by callers that slave dip_flex to pip_flex).
    """
    c1, s1 = math.cos(q.spread), math.sin(q.spread)
    c2, s2 = math.cos(q.mcp_flex), math.sin(q.mcp_flex)
    rot = _knuckle_rotation(c1, s1, c2, s2)
    c3, s3 = math.cos(q.pip_flex), math.sin(q.pip_flex)
    c34, s34 = math.cos(q.pip_flex + q.dip_flex), math.sin(q.pip_flex + q.dip_flex)

    pp = g.pip_center
    pd = g.dip_center
    pt = g.fingertip
    # Segment vectors in the knuckle frame.
    v_pip = (pp[0], pp[1], pp[2])
    seg_dip = (c3 * pd[0] - s3 * pd[1], s3 * pd[0] + c3 * pd[1], pd[2])
    seg_tip = (c34 * pt[0] - s34 * pt[1], s34 * pt[0] + c34 * pt[1], pt[2])
    v_dip = (v_pip[0] + seg_dip[0], v_pip[1] + seg_dip[1], v_pip[2] + seg_dip[2])
    v_tip = (v_dip[0] + seg_tip[0], v_dip[1] + seg_tip[1], v_dip[2] + seg_tip[2])

    m = g.mcp_center
    pts = np.empty((4, 3))
    pts[0] = m
    for row, v in ((1, v_pip), (2, v_dip), (3, v_tip)):
        w = _rot_apply(rot, v)
        pts[row, 0] = m[0] + w[0]
        pts[row, 1] = m[1] + w[1]
        pts[row, 2] = m[2] + w[2]
    if not with_jacobian:
        return pts, None

    dr1, dr2 = _knuckle_rotation_derivatives(c1, s1, c2, s2)
    dseg_dip = (-s3 * pd[0] - c3 * pd[1], c3 * pd[0] - s3 * pd[1], 0.0)
    dseg_tip = (-s34 * pt[0] - c34 * pt[1], c34 * pt[0] - s34 * pt[1], 0.0)
    jac = np.zeros((4, 3, 4))
    for row, v in ((1, v_pip), (2, v_dip), (3, v_tip)):
        jac[row, :, 0] = _rot_apply(dr1, v)
        jac[row, :, 1] = _rot_apply(dr2, v)
    # pip column: dip and tip move through R_z(pip) and R_z(pip + dip).
    jac[2, :, 2] = _rot_apply(rot, dseg_dip)
    jac[3, :, 2] = _rot_apply(rot, (dseg_dip[0] + dseg_tip[0],
                                    dseg_dip[1] + dseg_tip[1], 0.0))
    jac[3, :, 3] = _rot_apply(rot, dseg_tip)
    return pts, jac
