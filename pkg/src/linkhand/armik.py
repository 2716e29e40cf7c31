"""Differential IK for a 7-DoF arm: weighted multi-task box-constrained QP.

Per control tick the arm solves

    min_qd  w0 |Je qd - lam*dx|^2 + w1 |Ja qd - da|^2
            + w2 |qd|^2 + w3 |qd - qd_prev|^2
    s.t.    f_m <= qd <= f_M

where dx is the tool pose error twist, da the swivel-angle deviation from a
vertical reference plane, and the bounds come from a velocity damper that
keeps one integration step inside the position limits.  The QP is solved
exactly by primal active-set iteration on the box (7 variables, strictly
convex for w2 > 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np


class DegenerateAxis(RuntimeError):
    """Shoulder-wrist line or elbow offset too short to define a swivel."""


Weight = Union[float, Sequence[float]]


def _rotation_about(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    cc = 1.0 - c
    return np.array([
        [c + x * x * cc, x * y * cc - z * s, x * z * cc + y * s],
        [y * x * cc + z * s, c + y * y * cc, y * z * cc - x * s],
        [z * x * cc - y * s, z * y * cc + x * s, c + z * z * cc],
    ])


def rotation_log(rot: np.ndarray) -> np.ndarray:
    """Rotation vector (axis * angle) of a proper rotation matrix."""
    trace = float(np.trace(rot))
    cos_angle = max(-1.0, min(1.0, 0.5 * (trace - 1.0)))
    angle = math.acos(cos_angle)
    if angle < 1e-9:
        # First order: skew part already holds axis*angle.
        return 0.5 * np.array([rot[2, 1] - rot[1, 2],
                               rot[0, 2] - rot[2, 0],
                               rot[1, 0] - rot[0, 1]])
    if angle > math.pi - 1e-6:
        # Near pi the skew part degenerates; recover the axis from the
        # symmetric part instead.
        diag = np.clip((np.diag(rot) + 1.0) / 2.0, 0.0, None)
        axis = np.sqrt(diag)
        # Fix signs from the largest off-diagonal sums.
        k = int(np.argmax(axis))
        if axis[k] > 0.0:
            for j in range(3):
                if j != k:
                    axis[j] = math.copysign(
                        axis[j], rot[k, j] + rot[j, k])
        norm = float(np.linalg.norm(axis))
        if norm == 0.0:
            return np.zeros(3)
        return axis / norm * angle
    factor = angle / (2.0 * math.sin(angle))
    return factor * np.array([rot[2, 1] - rot[1, 2],
                              rot[0, 2] - rot[2, 0],
                              rot[1, 0] - rot[0, 1]])


@dataclass
class ArmModel:
    """Serial 7R chain: per-joint parent-frame offset and local rotation axis.

    Joint i's frame is the parent frame translated by ``joint_translations[i]``
    (expressed in the parent frame) and rotated about ``joint_axes[i]`` by q_i.
    ``shoulder_index``/``elbow_index``/``wrist_index`` name joint origins used
    for the swivel-angle geometry.
    """

    joint_translations: np.ndarray
    joint_axes: np.ndarray
    q_lower: np.ndarray
    q_upper: np.ndarray
    velocity_limit: np.ndarray
    tool_translation: np.ndarray
    tool_rotation: np.ndarray
    shoulder_index: int = 1
    elbow_index: int = 3
    wrist_index: int = 5

    def __post_init__(self) -> None:
        self.joint_translations = np.asarray(self.joint_translations, float)
        self.joint_axes = np.asarray(self.joint_axes, float)
        self.q_lower = np.asarray(self.q_lower, float)
        self.q_upper = np.asarray(self.q_upper, float)
        self.velocity_limit = np.asarray(self.velocity_limit, float)
        self.tool_translation = np.asarray(self.tool_translation, float)
        self.tool_rotation = np.asarray(self.tool_rotation, float)
        if self.joint_translations.shape != (7, 3):
            raise ValueError("joint_translations must be 7x3")
        if self.joint_axes.shape != (7, 3):
            raise ValueError("joint_axes must be 7x3")
        norms = np.linalg.norm(self.joint_axes, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("joint axes must be unit vectors")
        for name in ("q_lower", "q_upper", "velocity_limit"):
            if getattr(self, name).shape != (7,):
                raise ValueError(f"{name} must have shape (7,)")
        if np.any(self.q_lower >= self.q_upper):
            raise ValueError("joint limits must satisfy lower < upper")
        if np.any(self.velocity_limit <= 0.0):
            raise ValueError("velocity limits must be positive")
        if self.tool_translation.shape != (3,):
            raise ValueError("tool_translation must have shape (3,)")
        if (self.tool_rotation.shape != (3, 3)
                or np.max(np.abs(self.tool_rotation @ self.tool_rotation.T
                                 - np.eye(3))) > 1e-9
                or np.linalg.det(self.tool_rotation) < 0.0):
            raise ValueError("tool_rotation must be a proper rotation")
        for name in ("shoulder_index", "elbow_index", "wrist_index"):
            idx = getattr(self, name)
            if not 0 <= idx <= 6:
                raise ValueError(f"{name} must index a joint (0..6)")


@dataclass
class ArmIKConfig:
    """Weights, scaling, and damper settings for the differential IK tick."""

    lambda_scale: float = 1.0
    w0: Weight = 1.0
    w1: Weight = 0.05
    w2: Weight = 1e-3
    w3: Weight = 1e-2
    dt_s: float = 0.02
    velocity_damper_margin_rad: float = 0.05
    damper_gain: float = 1.0
    reference_direction: Tuple[float, float, float] = (0.0, 0.0, -1.0)
    kkt_tolerance: float = 1e-8
    # Swivel regulation target; None holds the angle found at session start
    # (an elbow-up rest pose should not be dragged through half a turn into
    # the gravity plane).
    swivel_target_rad: Optional[float] = None

    def __post_init__(self) -> None:
        if self.dt_s <= 0.0:
            raise ValueError("dt_s must be positive")
        if self.velocity_damper_margin_rad < 0.0:
            raise ValueError("velocity_damper_margin_rad must be >= 0")
        if self.damper_gain <= 0.0 or self.damper_gain > 1.0:
            raise ValueError("damper_gain must lie in (0, 1]")
        for name, size in (("w0", 6), ("w1", 1), ("w2", 7), ("w3", 7)):
            _row_weights(getattr(self, name), size, name)
        ref = np.asarray(self.reference_direction, float)
        if ref.shape != (3,) or np.linalg.norm(ref) < 1e-9:
            raise ValueError("reference_direction must be a nonzero 3-vector")


@dataclass
class ArmState:
    q: np.ndarray
    q_dot_prev: np.ndarray = field(default_factory=lambda: np.zeros(7))

    def __post_init__(self) -> None:
        self.q = np.asarray(self.q, float).copy()
        self.q_dot_prev = np.asarray(self.q_dot_prev, float).copy()
        if self.q.shape != (7,) or self.q_dot_prev.shape != (7,):
            raise ValueError("arm state vectors must have shape (7,)")

    @classmethod
    def at(cls, q: Sequence[float], model: ArmModel) -> "ArmState":
        q = np.asarray(q, float)
        if np.any(q < model.q_lower) or np.any(q > model.q_upper):
            raise ValueError("arm state outside joint limits")
        return cls(q)


def _row_weights(w: Weight, size: int, name: str) -> np.ndarray:
    """Scalar or per-row weight vector, validated non-negative."""
    arr = np.asarray(w, dtype=float)
    if arr.ndim == 0:
        arr = np.full(size, float(arr))
    if arr.shape != (size,):
        raise ValueError(f"{name} must be a scalar or length-{size} vector")
    if np.any(arr < 0.0):
        raise ValueError(f"{name} entries must be >= 0")
    return arr


def joint_origins(q: np.ndarray, model: ArmModel) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """World joint origins (7,3), joint axes in world (7,3), tool pose.

    Returns ``(origins, axes_world, (rot_tool, p_tool))`` packed as a tuple
    ``(origins, axes, tool)``.
    """
    rot = np.eye(3)
    pos = np.zeros(3)
    origins = np.empty((7, 3))
    axes = np.empty((7, 3))
    for i in range(7):
        pos = pos + rot @ model.joint_translations[i]
        origins[i] = pos
        axes[i] = rot @ model.joint_axes[i]
        rot = rot @ _rotation_about(model.joint_axes[i], float(q[i]))
    p_tool = pos + rot @ model.tool_translation
    rot_tool = rot @ model.tool_rotation
    return origins, axes, (rot_tool, p_tool)


def tool_pose(q: np.ndarray, model: ArmModel) -> Tuple[np.ndarray, np.ndarray]:
    """World rotation and position of the tool frame."""
    _, _, tool = joint_origins(np.asarray(q, float), model)
    return tool


def tool_jacobian(q: np.ndarray, model: ArmModel) -> np.ndarray:
    """Geometric Jacobian of the tool frame, rows = [linear; angular]."""
    q = np.asarray(q, float)
    if not np.all(np.isfinite(q)):
        raise ValueError("joint vector must be finite")
    origins, axes, (_, p_tool) = joint_origins(q, model)
    jac = np.empty((6, 7))
    for i in range(7):
        jac[:3, i] = np.cross(axes[i], p_tool - origins[i])
        jac[3:, i] = axes[i]
    return jac


def swivel_from_points(shoulder: np.ndarray, elbow: np.ndarray,
                       wrist: np.ndarray, ref_dir: np.ndarray) -> float:
    """Signed elbow rotation about the shoulder-wrist line.

    Zero when the elbow lies in the half-plane spanned by the line and
    ``ref_dir``; positive sense right-handed about wrist-minus-shoulder.
    """
    axis = wrist - shoulder
    length = float(np.linalg.norm(axis))
    if length < 1e-6:
        raise DegenerateAxis("shoulder-wrist distance below 1e-6 m")
    u = axis / length
    v = elbow - shoulder
    v_perp = v - (v @ u) * u
    v_norm = float(np.linalg.norm(v_perp))
    if v_norm < 1e-6:
        raise DegenerateAxis("elbow collinear with the shoulder-wrist line")
    r = ref_dir - (ref_dir @ u) * u
    r_norm = float(np.linalg.norm(r))
    if r_norm < 1e-9:
        raise DegenerateAxis(
            "reference direction parallel to the shoulder-wrist line")
    v_hat = v_perp / v_norm
    r_hat = r / r_norm
    return math.atan2(float(u @ np.cross(r_hat, v_hat)), float(r_hat @ v_hat))


def _swivel(q: np.ndarray, model: ArmModel, ref_dir: np.ndarray) -> float:
    origins, _, _ = joint_origins(q, model)
    return swivel_from_points(origins[model.shoulder_index],
                              origins[model.elbow_index],
                              origins[model.wrist_index], ref_dir)


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def arm_angle(q: np.ndarray, model: ArmModel,
              cfg: ArmIKConfig) -> Tuple[float, np.ndarray]:
    """Swivel angle of the elbow about the shoulder-wrist line.

    Measured from the vertical reference plane spanned by the shoulder-wrist
    line and ``cfg.reference_direction`` (gravity by default).  The Jacobian
    row is central finite differences (the map is cheap and only feeds a
    low-weight task at 50 Hz).
    """
    q = np.asarray(q, float)
    ref = np.asarray(cfg.reference_direction, float)
    ref = ref / np.linalg.norm(ref)
    angle = _swivel(q, model, ref)
    h = 1e-6
    jac = np.empty((1, 7))
    for i in range(7):
        qp = q.copy()
        qp[i] += h
        qm = q.copy()
        qm[i] -= h
        jac[0, i] = _wrap_angle(_swivel(qp, model, ref)
                                - _swivel(qm, model, ref)) / (2.0 * h)
    return angle, jac


def velocity_bounds(q: np.ndarray, model: ArmModel,
                    cfg: ArmIKConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Velocity box from speed limits plus a position-limit damper.

    With gain k <= 1 one integration step cannot exit the position limits:
    q + dt*f_M <= q_upper - (1-k)*margin and symmetrically below.
    """
    q = np.asarray(q, float)
    k = cfg.damper_gain
    dt = cfg.dt_s
    margin = cfg.velocity_damper_margin_rad
    f_upper = np.minimum(model.velocity_limit,
                         k * (model.q_upper - q - margin) / dt)
    f_lower = np.maximum(-model.velocity_limit,
                         k * (model.q_lower - q + margin) / dt)
    # Inside the margin band the damper may demand retreat; keep the box
    # non-empty and never let "retreat" exceed the speed limit.
    f_m = np.minimum(f_lower, f_upper)
    f_M = np.maximum(f_lower, f_upper)
    return f_m, f_M


def solve_arm_qp(jac_tool: np.ndarray, delta_x: np.ndarray,
                 jac_angle: Optional[np.ndarray], delta_angle: float,
                 state: ArmState, bounds: Tuple[np.ndarray, np.ndarray],
                 cfg: ArmIKConfig,
                 _initial_active: Optional[Tuple[np.ndarray, np.ndarray]] = None
                 ) -> np.ndarray:
    """Exact minimizer of the weighted multi-task QP on the velocity box.

    Primal active-set iteration: solve the free normal equations, clamp
    violated coordinates, release bound coordinates whose KKT multiplier
    has the wrong sign (one per pass, worst first).  Strict convexity
    (w2 > 0 or w3 > 0) makes the iteration finite.
    """
    jac_tool = np.asarray(jac_tool, float)
    delta_x = np.asarray(delta_x, float)
    f_m, f_M = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    if np.any(f_m > f_M):
        raise ValueError("velocity bounds must satisfy f_m <= f_M")
    w0 = _row_weights(cfg.w0, 6, "w0")
    w1 = _row_weights(cfg.w1, 1, "w1")
    w2 = _row_weights(cfg.w2, 7, "w2")
    w3 = _row_weights(cfg.w3, 7, "w3")

    hess = (jac_tool.T * w0) @ jac_tool + np.diag(w2 + w3)
    lin = (jac_tool.T * w0) @ (cfg.lambda_scale * delta_x) \
        + w3 * state.q_dot_prev
    if jac_angle is not None:
        jac_angle = np.asarray(jac_angle, float).reshape(1, 7)
        hess = hess + (jac_angle.T * w1) @ jac_angle
        lin = lin + (jac_angle[0] * w1[0]) * float(delta_angle)

    if _initial_active is None:
        at_lower = np.zeros(7, dtype=bool)
        at_upper = np.zeros(7, dtype=bool)
    else:
        # Any starting active set reaches the same unique optimum; exposed so
        # the initialization-independence property is testable directly.
        at_lower = np.asarray(_initial_active[0], bool).copy()
        at_upper = np.asarray(_initial_active[1], bool).copy() & ~at_lower
    qd = np.zeros(7)
    for _ in range(64):
        free = ~(at_lower | at_upper)
        qd = np.where(at_lower, f_m, 0.0) + np.where(at_upper, f_M, 0.0)
        if np.any(free):
            idx = np.where(free)[0]
            rhs = lin[idx] - hess[np.ix_(idx, ~free)] @ qd[~free]
            sub = hess[np.ix_(idx, idx)]
            # Symmetric eigensolve with a spectral cutoff: one code path for
            # the regularized (full-rank) case and the all-weights-zero case,
            # where the consistent normal equations get the minimum-norm
            # minimizer (matches the pseudoinverse reference).
            vals, vecs = np.linalg.eigh(sub)
            keep = vals > 1e-12 * max(float(vals[-1]), 1.0)
            coeffs = (vecs.T @ rhs)[keep] / vals[keep]
            qd[idx] = vecs[:, keep] @ coeffs
        below = free & (qd < f_m)
        above = free & (qd > f_M)
        if np.any(below) or np.any(above):
            at_lower |= below
            at_upper |= above
            continue
        grad = hess @ qd - lin
        # KKT: gradient >= 0 at lower-active, <= 0 at upper-active.
        wrong_lo = np.where(at_lower, -grad, 0.0)
        wrong_hi = np.where(at_upper, grad, 0.0)
        worst = max(float(np.max(wrong_lo)), float(np.max(wrong_hi)))
        if worst <= cfg.kkt_tolerance:
            return qd
        if float(np.max(wrong_lo)) >= float(np.max(wrong_hi)):
            at_lower[int(np.argmax(wrong_lo))] = False
        else:
            at_upper[int(np.argmax(wrong_hi))] = False
    raise RuntimeError("active-set iteration failed to settle")


def integrate(state: ArmState, q_dot: np.ndarray, dt: float) -> ArmState:
    """Euler step of the joint positions; records q_dot for smoothness."""
    q_dot = np.asarray(q_dot, float)
    return ArmState(state.q + q_dot * dt, q_dot)


def pose_error_twist(current: Tuple[np.ndarray, np.ndarray],
                     target: Tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    """Pose error as a 6-twist [position difference; rotation log-map]."""
    rot_c, p_c = current
    rot_t, p_t = target
    err = np.empty(6)
    err[:3] = p_t - p_c
    err[3:] = rotation_log(rot_t @ rot_c.T)
    return err


def reference_arm_model() -> ArmModel:
    """A 7R reference chain with anthropomorphic proportions.

    Offsets and limits are in the envelope of common 7-DoF cobots; the model
    is a reference configuration, not a calibration of any specific unit.
    """
    return ArmModel(
        joint_translations=np.array([
            [0.0, 0.0, 0.333],
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 0.316],
            [0.0825, 0.0, 0.0],
            [-0.0825, 0.0, 0.384],
            [0.0, 0.0, 0.0],
            [0.088, 0.0, 0.0],
        ]),
        joint_axes=np.array([
            [0.0, 0.0, 1.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, -1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, -1.0],
        ]),
        q_lower=np.array([-2.74, -1.78, -2.90, -3.04, -2.81, 0.54, -3.02]),
        q_upper=np.array([2.74, 1.78, 2.90, -0.15, 2.81, 4.52, 3.02]),
        velocity_limit=np.array([2.62, 2.62, 2.62, 2.62, 5.25, 4.18, 5.25]),
        tool_translation=np.array([0.0, 0.0, 0.107]),
        tool_rotation=np.eye(3),
        shoulder_index=1,
        elbow_index=3,
        wrist_index=5,
    )


REFERENCE_ARM_HOME = np.array([0.0, -0.45, 0.0, -1.90, 0.0, 1.60, 0.0])
