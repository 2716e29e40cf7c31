"""Keyvector retargeting: human landmark frames to robot joint commands.

A keyvector is the 3d vector between a pair of keypoints.  Fifteen of them
summarize a hand pose: five digit vectors (knuckle to tip), four closure
vectors (each fingertip to the thumb tip) and six separation vectors among
the proximal joints of the fingers.  Each robot-side keyvector is pulled
toward a target derived from the human-side vector through a piecewise
weight and target-length schedule: near contact the closure vectors get a
large weight and a fixed short target (tighter than the human reference,
which is what makes precision grasps close reliably), the separation
vectors get a large weight and a fixed floor that keeps neighboring digits
from colliding, and away from contact everything tracks the scaled human
vector with unit weight.

The match is solved as bound-constrained least squares over the 20 joint
angles with a temporal smoothness term.  Distal joints are slaved to their
proximal neighbor by the fingertip linkage, so they are not independent
decision variables: their Jacobian contribution is folded into the pip
column through the coupling derivative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .finger import (FingerJointState, KEYPOINT_NAMES, NoConvergence,
                     dip_coupling_derivative, solve_dip_flex)
from .hand import (DIGITS, HandGeometry, HandJointState, clamp_command,
                   digit_keypoints_jacobian)
from .solver import ResidualProblem, SolverSettings, solve_least_squares

# Documented landmark map: 25 labels, five per digit, base to tip.  The
# glove reports poses for all of them; retargeting uses positions only.
LANDMARK_PARTS = ("cmc", "mcp", "pip", "dip", "tip")
LANDMARK_LABELS = tuple(f"{digit}_{part}" for digit in DIGITS
                        for part in LANDMARK_PARTS)

# Human keyvector lengths are floored here before any normalization, so a
# glove frame with coincident landmarks cannot emit NaN directions.
DISTANCE_FLOOR = 1e-6

# The stationarity tolerance is tight because the keyvector objective has
# nearly flat valleys (weakly observed joint combinations); a loose gradient
# leaves milliradian-scale joint slack.
RETARGET_SOLVER_DEFAULTS = SolverSettings(
    max_iterations=250,
    residual_tolerance=1e-12,
    step_tolerance=1e-11,
    initial_damping=1e-6,
)


class MissingLandmark(KeyError):
    """A keyvector endpoint label is absent from the human frame."""


class Membership(Enum):
    """Keyvector role in the piecewise weight/target schedule."""

    NONE = "none"
    S1 = "s1"       # closure set: fingertip to thumb tip
    S2 = "s2"       # separation set: inter-finger proximal joints


@dataclass
class HumanHandFrame:
    """One glove sample: 25 landmark poses in the (aligned) hand frame."""

    timestamp: float
    positions: Dict[str, np.ndarray]              # label -> (3,) m
    orientations: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.positions) != 25:
            raise ValueError(f"expected 25 landmarks, got {len(self.positions)}")
        unknown = set(self.positions) - set(LANDMARK_LABELS)
        if unknown:
            raise ValueError(f"unknown landmark labels: {sorted(unknown)}")
        for label, p in self.positions.items():
            p = np.asarray(p, dtype=float)
            if p.shape != (3,) or not np.all(np.isfinite(p)):
                raise ValueError(f"landmark '{label}' position must be a "
                                 f"finite 3-vector")
            self.positions[label] = p

    def transformed(self, rotation: np.ndarray,
                    translation: np.ndarray) -> "HumanHandFrame":
        """The same frame expressed through a rigid glove-to-hand alignment."""
        rotation = np.asarray(rotation, dtype=float)
        translation = np.asarray(translation, dtype=float)
        return HumanHandFrame(
            self.timestamp,
            {k: rotation @ v + translation for k, v in self.positions.items()},
            dict(self.orientations),
        )


@dataclass
class Keyvector:
    """One keyvector definition: endpoints, role, per-axis scaling."""

    from_keypoint: str
    to_keypoint: str
    membership: Membership
    beta: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self) -> None:
        self.beta = np.asarray(self.beta, dtype=float)
        if self.beta.shape != (3,) or not np.all(np.isfinite(self.beta)):
            raise ValueError("beta must be a finite 3-vector")
        for label in (self.from_keypoint, self.to_keypoint):
            parts = label.rsplit("_", 1)
            if len(parts) != 2 or parts[0] not in DIGITS \
                    or parts[1] not in KEYPOINT_NAMES:
                raise ValueError(f"keyvector endpoint '{label}' is not a "
                                 f"digit keypoint label")


@dataclass
class KeyvectorSpec:
    """The full 15-vector schedule."""

    entries: Tuple[Keyvector, ...]

    def __post_init__(self) -> None:
        self.entries = tuple(self.entries)
        if len(self.entries) != 15:
            raise ValueError(f"expected 15 keyvectors, got {len(self.entries)}")
        seen = {(e.from_keypoint, e.to_keypoint) for e in self.entries}
        if len(seen) != 15:
            raise ValueError("keyvector endpoint pairs must be unique")


def default_keyvector_spec(betas: Optional[np.ndarray] = None) -> KeyvectorSpec:
    """The standard 15 keyvectors.

    Five digit vectors knuckle-to-tip, four closure vectors fingertip to
    thumb tip, and the six pairs among the index/middle/ring pip joints and
    the pinky dip joint.
    """
    pairs: List[Tuple[str, str, Membership]] = []
    for digit in DIGITS:
        pairs.append((f"{digit}_mcp", f"{digit}_tip", Membership.NONE))
    for digit in ("index", "middle", "ring", "pinky"):
        pairs.append((f"{digit}_tip", "thumb_tip", Membership.S1))
    proximal = ("index_pip", "middle_pip", "ring_pip", "pinky_dip")
    for i in range(4):
        for j in range(i + 1, 4):
            pairs.append((proximal[i], proximal[j], Membership.S2))
    if betas is None:
        betas = np.ones((15, 3))
    betas = np.asarray(betas, dtype=float)
    if betas.shape == (15,):
        betas = np.repeat(betas[:, None], 3, axis=1)
    return KeyvectorSpec(tuple(
        Keyvector(a, b, m, betas[k]) for k, (a, b, m) in enumerate(pairs)))


@dataclass
class RetargetConfig:
    """Weights, thresholds and bounds of the retargeting problem."""

    epsilon: float = 0.02            # contact threshold on human distance, m
    eta1: float = 0.004              # commanded closure distance, m
    eta2: float = 0.02               # commanded separation distance, m
    lambda_smooth: float = 0.01
    q_lower: np.ndarray = None       # R20 rad, digit-major
    q_upper: np.ndarray = None
    solver: SolverSettings = RETARGET_SOLVER_DEFAULTS
    # The keyvector objective is nonconvex; a step whose tracking residual
    # stays above this after converging retries from canonical extra starts.
    restart_residual: float = 1e-3   # m

    def __post_init__(self) -> None:
        if self.epsilon <= 0 or self.eta1 < 0 or self.eta2 <= 0 \
                or self.lambda_smooth < 0 or self.restart_residual <= 0:
            raise ValueError("invalid retarget thresholds")
        if self.q_lower is None or self.q_upper is None:
            raise ValueError("joint bounds are required")
        self.q_lower = np.asarray(self.q_lower, dtype=float)
        self.q_upper = np.asarray(self.q_upper, dtype=float)
        if self.q_lower.shape != (20,) or self.q_upper.shape != (20,):
            raise ValueError("joint bounds must be R20")
        if np.any(self.q_lower > self.q_upper):
            raise ValueError("joint bounds must be ordered")

    @classmethod
    def for_hand(cls, g: HandGeometry, **kwargs) -> "RetargetConfig":
        lo = np.concatenate([g.digits[d].q_lower for d in DIGITS])
        hi = np.concatenate([g.digits[d].q_upper for d in DIGITS])
        return cls(q_lower=lo, q_upper=hi, **kwargs)


@dataclass
class RetargetState:
    """Temporal state: the previous command, once initialized."""

    q_prev: np.ndarray = field(default_factory=lambda: np.zeros(20))
    initialized: bool = False

    def held_command(self) -> HandJointState:
        return HandJointState.from_array(self.q_prev.copy())


def extract_keyvectors(frame: HumanHandFrame,
                       spec: KeyvectorSpec) -> np.ndarray:
    """The 15 human keyvectors, rows of to-minus-from positions."""
    out = np.empty((15, 3))
    for k, e in enumerate(spec.entries):
        try:
            a = frame.positions[e.from_keypoint]
            b = frame.positions[e.to_keypoint]
        except KeyError as exc:
            raise MissingLandmark(str(exc.args[0])) from exc
        out[k] = b - a
    return out


def weight(d_i: float, membership: Membership, cfg: RetargetConfig) -> float:
    """Piecewise weight: unit far from contact, de-facto hard near it."""
    if d_i > cfg.epsilon:
        return 1.0
    if membership is Membership.S1:
        return 200.0
    if membership is Membership.S2:
        return 400.0
    return 1.0


def target_length(d_i: float, membership: Membership, beta: np.ndarray,
                  cfg: RetargetConfig) -> float:
    """Target magnitude along the (scaled) human direction.

    This is the isotropic-scaling view; anisotropic beta reshapes the
    direction as well and is handled by target_vector.
    """
    beta = np.asarray(beta, dtype=float)
    if not np.allclose(beta, beta.flat[0]):
        raise ValueError("target_length is defined for isotropic beta; use "
                         "target_vector for per-axis scaling")
    if d_i > cfg.epsilon:
        return float(beta.flat[0]) * d_i
    if membership is Membership.S1:
        return cfg.eta1
    if membership is Membership.S2:
        return cfg.eta2
    return float(beta.flat[0]) * d_i


def target_vector(v_i: np.ndarray, membership: Membership, beta: np.ndarray,
                  cfg: RetargetConfig) -> float:
    """Full 3-vector target for one keyvector.

    beta scales the human vector per-axis before normalization, so the
    fixed-length branches keep the reshaped direction.
    """
    d_raw = max(float(np.linalg.norm(v_i)), DISTANCE_FLOOR)
    scaled = beta * v_i
    if d_raw > cfg.epsilon or membership is Membership.NONE:
        return scaled
    ns = float(np.linalg.norm(scaled))
    if ns < DISTANCE_FLOOR:
        return np.zeros(3)
    unit = scaled / ns
    if membership is Membership.S1:
        return cfg.eta1 * unit
    return cfg.eta2 * unit


def _keypoint_index(label: str) -> Tuple[str, int]:
    digit, part = label.rsplit("_", 1)
    return digit, KEYPOINT_NAMES.index(part)


def _hand_points_and_jacobians(q: np.ndarray, g: HandGeometry):
    """Keypoints and dip-folded Jacobians for all digits at a flat q.

    The distal angle is recomputed from the coupling at each call; its
    Jacobian column is folded into the pip column and zeroed, so the
    returned Jacobians are valid derivatives in the 20-vector sense.
    Also returns the effective joint vector (distal entries replaced by the
    coupling values) and the coupling slopes.
    """
    points: Dict[str, np.ndarray] = {}
    jacobians: Dict[str, np.ndarray] = {}
    q_eff = q.copy()
    slopes: Dict[str, float] = {}
    for i, digit in enumerate(DIGITS):
        fg = g.digits[digit]
        q1, q2, q3 = q[4 * i], q[4 * i + 1], q[4 * i + 2]
        q4 = solve_dip_flex(q3, fg)
        slope = dip_coupling_derivative(q3, fg, q4)
        q_eff[4 * i + 3] = q4
        slopes[digit] = slope
        pts, jac = digit_keypoints_jacobian(
            FingerJointState(q1, q2, q3, q4), digit, g)
        jac = jac.copy()
        jac[:, :, 2] += jac[:, :, 3] * slope
        jac[:, :, 3] = 0.0
        points[digit] = pts
        jacobians[digit] = jac
    return points, jacobians, q_eff, slopes


def residuals_and_jacobian(q: np.ndarray, frame: HumanHandFrame,
                           spec: KeyvectorSpec, cfg: RetargetConfig,
                           state: RetargetState, g: HandGeometry
                           ) -> Tuple[np.ndarray, np.ndarray]:
    """The stacked weighted residual (65 rows) and its 65x20 Jacobian.

    Rows 0..44 are the 15 weighted keyvector residuals sqrt(w) (r_i - t_i);
    rows 45..64 are the smoothness rows sqrt(lambda) (q - q_prev).  Distal
    columns are identically zero; their influence rides in the pip columns.
    """
    q = np.asarray(q, dtype=float)
    v = extract_keyvectors(frame, spec)
    points, jacs, q_eff, _ = _hand_points_and_jacobians(q, g)

    res = np.zeros(65)
    jac = np.zeros((65, 20))
    digit_col = {d: 4 * i for i, d in enumerate(DIGITS)}
    for k, e in enumerate(spec.entries):
        d_i = float(np.linalg.norm(v[k]))
        sw = math.sqrt(weight(d_i, e.membership, cfg))
        t_i = target_vector(v[k], e.membership, e.beta, cfg)
        da, ia = _keypoint_index(e.from_keypoint)
        db, ib = _keypoint_index(e.to_keypoint)
        r_i = points[db][ib] - points[da][ia]
        rows = slice(3 * k, 3 * k + 3)
        res[rows] = sw * (r_i - t_i)
        jac[rows, digit_col[db]:digit_col[db] + 4] += sw * jacs[db][ib]
        jac[rows, digit_col[da]:digit_col[da] + 4] -= sw * jacs[da][ia]

    sl = math.sqrt(cfg.lambda_smooth)
    res[45:] = sl * (q_eff - state.q_prev)
    for i, digit in enumerate(DIGITS):
        for j in range(3):
            jac[45 + 4 * i + j, 4 * i + j] = sl
        # the distal smoothness row follows the coupling into the pip column
        slope = dip_coupling_derivative(q[4 * i + 2], g.digits[digit],
                                        q_eff[4 * i + 3])
        jac[45 + 4 * i + 3, 4 * i + 2] = sl * slope
    return res, jac


def calibrate_betas(frame: HumanHandFrame, spec: KeyvectorSpec,
                    g: HandGeometry) -> np.ndarray:
    """Per-keyvector isotropic scaling from a calibration frame.

    beta_k = robot keyvector length at the rest pose / human keyvector
    length in the given frame, broadcast to the three axes.
    """
    v = extract_keyvectors(frame, spec)
    q_rest = clamp_command(HandJointState.rest(), g).as_array()
    points, _, _, _ = _hand_points_and_jacobians(q_rest, g)
    out = np.empty((15, 3))
    for k, e in enumerate(spec.entries):
        da, ia = _keypoint_index(e.from_keypoint)
        db, ib = _keypoint_index(e.to_keypoint)
        robot_len = float(np.linalg.norm(points[db][ib] - points[da][ia]))
        human_len = max(float(np.linalg.norm(v[k])), DISTANCE_FLOOR)
        out[k] = robot_len / human_len
    return out


# Seed solves only pick a basin; stationarity beyond micro-radians is wasted.
_SEED_SETTINGS = SolverSettings(
    max_iterations=60,
    residual_tolerance=1e-12,
    step_tolerance=1e-8,
    initial_damping=1e-6,
)


def _seed_from_frame(frame: HumanHandFrame, spec: KeyvectorSpec,
                     cfg: RetargetConfig, g: HandGeometry) -> np.ndarray:
    """Joint seed that matches each digit's tip target in isolation.

    The knuckle-to-tip keyvectors nearly decouple the objective per digit,
    so a handful of cheap 3-variable solves from fixed flexion corners pick
    the right solution branch even when whole-hand descent from a generic
    start would not.  Deterministic.
    """
    v = extract_keyvectors(frame, spec)
    targets: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    for k, e in enumerate(spec.entries):
        if e.membership is Membership.NONE and e.from_keypoint.endswith("_mcp"):
            digit = e.from_keypoint.rsplit("_", 1)[0]
            targets[digit] = (target_vector(v[k], e.membership, e.beta, cfg),
                              np.asarray(e.beta, dtype=float))
    seed = np.zeros(20)
    tip = KEYPOINT_NAMES.index("tip")
    pip = KEYPOINT_NAMES.index("pip")
    mcp = KEYPOINT_NAMES.index("mcp")
    for i, digit in enumerate(DIGITS):
        fg = g.digits[digit]
        lo = np.asarray(fg.q_lower[:3], dtype=float)
        hi = np.asarray(fg.q_upper[:3], dtype=float)
        if digit not in targets:
            seed[4 * i:4 * i + 3] = np.clip(0.0, lo, hi)
            continue
        t_vec, beta = targets[digit]
        # A soft mid-joint row breaks the elbow-branch tie: the tip target
        # alone admits mirrored flexion solutions, the observed knuckle-to-
        # mid-joint direction does not.  Down-weighted so tip match stays
        # primary when the scaled human proportions are off.
        p_vec = beta * (frame.positions[f"{digit}_pip"]
                        - frame.positions[f"{digit}_mcp"])

        def tip_residual(x):
            q4 = solve_dip_flex(x[2], fg)
            pts, jac = digit_keypoints_jacobian(
                FingerJointState(x[0], x[1], x[2], q4), digit, g)
            slope = dip_coupling_derivative(x[2], fg, q4)
            row = jac[tip].copy()
            row[:, 2] += row[:, 3] * slope
            res = np.concatenate([(pts[tip] - pts[mcp]) - t_vec,
                                  0.3 * ((pts[pip] - pts[mcp]) - p_vec)])
            return res, np.vstack([row[:, :3], 0.3 * jac[pip][:, :3]])

        problem = ResidualProblem(
            dim_x=3, dim_r=6,
            residual=lambda x: tip_residual(x)[0],
            jacobian=lambda x: tip_residual(x)[1],
            lower=lo, upper=hi)
        span = hi - lo
        corners = (np.array([0.25, 0.25, 0.25]), np.array([0.25, 0.75, 0.75]),
                   np.array([0.75, 0.5, 0.25]), np.array([0.5, 0.75, 0.25]))
        best_x, best_cost = np.clip(np.zeros(3), lo, hi), math.inf
        for c in corners:
            res = solve_least_squares(problem, lo + c * span, _SEED_SETTINGS)
            cost = float(res.residual_norm)
            if cost < best_cost:
                best_x, best_cost = res.x, cost
        seed[4 * i:4 * i + 3] = best_x
    return clamp_command(HandJointState.from_array(seed), g).as_array()


def retarget_step(frame: HumanHandFrame, spec: KeyvectorSpec,
                  cfg: RetargetConfig, state: RetargetState,
                  g: HandGeometry) -> HandJointState:
    """One command step: smoothed bounded least squares over the joints.

    Warm-started at the previous command; the output is clamped (static and
    coupled limits) and becomes the next q_prev.  On failure the state is
    left untouched and NoConvergence propagates so callers can hold the
    previous command.
    """
    if not state.initialized:
        state.q_prev = clamp_command(HandJointState.rest(), g).as_array()
        state.initialized = True

    cache: Dict[bytes, Tuple[np.ndarray, np.ndarray]] = {}

    def _eval(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        key = x.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = residuals_and_jacobian(x, frame, spec, cfg, state, g)
        return cache[key]

    problem = ResidualProblem(
        dim_x=20, dim_r=65,
        residual=lambda x: _eval(x)[0],
        jacobian=lambda x: _eval(x)[1],
        lower=cfg.q_lower, upper=cfg.q_upper,
    )

    # Restart trigger compares geometric mismatch in meters, so the weighted
    # rows are un-scaled before the max; otherwise contact frames (w=200/400)
    # would restart on sub-millimeter errors.
    vecs = extract_keyvectors(frame, spec)
    sqrt_w = np.repeat([math.sqrt(weight(float(np.linalg.norm(v)),
                                         e.membership, cfg))
                        for v, e in zip(vecs, spec.entries)], 3)

    def tracking_residual(x: np.ndarray) -> float:
        return float(np.max(np.abs(_eval(x)[0][:45] / sqrt_w)))

    result = solve_least_squares(problem, state.q_prev, cfg.solver)
    best = result
    seed = _seed_from_frame(frame, spec, cfg, g)
    need_restart = (not result.converged
                    or tracking_residual(result.x) > cfg.restart_residual)
    if not need_restart:
        # Wrong-branch minima near a straight-finger fold can track the
        # keyvectors to within any fixed threshold, so thresholding alone
        # cannot expose them; the unoptimized seed already undercutting the
        # accepted cost is the cheap tell.
        r_seed = _eval(seed)[0]
        r_best = _eval(result.x)[0]
        need_restart = float(r_seed @ r_seed) < float(r_best @ r_best)
    if need_restart:
        # Deterministic fallback starts pull the solve out of a bad basin;
        # the frame-informed seed resolves per-digit branch choices, the
        # rest pose covers the near-open regime.  Lowest total cost wins.
        starts = [seed,
                  clamp_command(HandJointState.rest(), g).as_array()]
        best_cost = (math.inf if not best.converged
                     else float(_eval(best.x)[0] @ _eval(best.x)[0]))
        for start in starts:
            alt = solve_least_squares(problem, start, cfg.solver)
            if not alt.converged:
                continue
            alt_cost = float(_eval(alt.x)[0] @ _eval(alt.x)[0])
            if alt_cost < best_cost:
                best, best_cost = alt, alt_cost
    if not best.converged:
        raise NoConvergence("retarget",
                            f"no stationary point in "
                            f"{cfg.solver.max_iterations} iterations "
                            f"(residual {best.residual_norm:.3e})")
    command = clamp_command(HandJointState.from_array(best.x), g)
    state.q_prev = command.as_array()
    return command
