"""Configuration files: hand geometry, retarget, arm model, arm IK, session.

JSON documents with a format/version envelope and explicit units in field
names (_m, _rad, _hz, ...).  Loaders validate shape and semantics and raise
ConfigError with the offending path and field; unknown trailing fields warn
and are ignored; unknown versions are hard errors.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .armik import ArmIKConfig, ArmModel
from .finger import FingerGeometry
from .hand import CoupledLimitMap, HandGeometry
from .retarget import Keyvector, KeyvectorSpec, Membership, RetargetConfig
from .solver import SolverSettings

_log = logging.getLogger(__name__)

FORMAT_VERSION = 1

HAND_FORMAT = "hand-geometry"
RETARGET_FORMAT = "retarget-config"
ARM_MODEL_FORMAT = "arm-model"
ARM_IK_FORMAT = "arm-ik-config"
SESSION_FORMAT = "session"


class ConfigError(RuntimeError):
    """Invalid configuration content."""


# FingerGeometry fields serialized with unit suffixes; derived fields
# (crank_rate_at_zero, knuckle_rate_at_zero) are recomputed at load.
_FINGER_METER_FIELDS = (
    "pss_a_slider_rest", "pss_b_slider_rest", "pss_a_anchor", "pss_b_anchor",
    "pss_a_link_length", "pss_b_link_length", "mcp_center", "psu_slider_rest",
    "crank_pivot", "psu_anchor_crank", "psu_link_a_length", "psu_link_b_length",
    "pip_center", "pip_coupler_anchor_crank", "pip_coupler_anchor_middle",
    "pip_coupler_length", "dip_center", "dip_coupler_anchor_knuckle",
    "dip_coupler_anchor_distal", "dip_coupler_length", "fingertip",
    "travel_min", "travel_max",
)
_FINGER_RADIAN_FIELDS = ("q_lower", "q_upper", "crank_range")


def _load_json(path: str, expected_format: str) -> dict:
    # A missing file is not a config error; it surfaces as OSError so the
    # CLI can map unreadable inputs and invalid content to different codes.
    try:
        with open(path, "r", encoding="ascii") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: "
                          f"{exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    fmt = doc.get("format")
    if fmt != expected_format:
        raise ConfigError(f"{path}: expected format '{expected_format}', "
                          f"found {fmt!r}")
    version = doc.get("version")
    if version != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported {fmt} version {version!r} "
                          f"(supported: {FORMAT_VERSION})")
    return doc


def _save_json(doc: dict, path: str) -> None:
    with open(path, "w", encoding="ascii") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _warn_unknown(obj: dict, known: Sequence[str], path: str,
                  context: str) -> None:
    extra = set(obj) - set(known)
    if extra:
        _log.warning("%s: ignoring unknown %s fields %s",
                     path, context, sorted(extra))


def _require(obj: dict, key: str, path: str, context: str):
    if key not in obj:
        raise ConfigError(f"{path}: {context} is missing '{key}'")
    return obj[key]


def _as_list(value, path: str, context: str) -> list:
    if not isinstance(value, list):
        raise ConfigError(f"{path}: {context} must be a list")
    return value


# --- finger / hand geometry ---------------------------------------------------

def finger_geometry_to_dict(geometry: FingerGeometry) -> dict:
    out: dict = {}
    for name in _FINGER_METER_FIELDS:
        value = getattr(geometry, name)
        out[f"{name}_m"] = (float(value) if np.ndim(value) == 0
                            else [float(v) for v in value])
    for name in _FINGER_RADIAN_FIELDS:
        value = getattr(geometry, name)
        out[f"{name}_rad"] = [float(v) for v in value]
    return out


def finger_geometry_from_dict(obj: dict, path: str,
                              context: str) -> FingerGeometry:
    known = ([f"{n}_m" for n in _FINGER_METER_FIELDS]
             + [f"{n}_rad" for n in _FINGER_RADIAN_FIELDS])
    _warn_unknown(obj, known, path, context)
    kwargs = {}
    for name in _FINGER_METER_FIELDS:
        kwargs[name] = _require(obj, f"{name}_m", path, context)
    for name in _FINGER_RADIAN_FIELDS:
        kwargs[name] = _require(obj, f"{name}_rad", path, context)
    kwargs["crank_range"] = tuple(kwargs["crank_range"])
    try:
        return FingerGeometry(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {context}: {exc}") from exc


def save_hand_geometry(geometry: HandGeometry, path: str) -> None:
    doc = {
        "format": HAND_FORMAT,
        "version": FORMAT_VERSION,
        "digits": {name: finger_geometry_to_dict(g)
                   for name, g in geometry.digits.items()},
        "mounts": {name: {"rotation_unit": [[float(v) for v in row]
                                            for row in rot],
                          "translation_m": [float(v) for v in trans]}
                   for name, (rot, trans) in geometry.mounts.items()},
        "coupled_limits": {name: {"abduction_half_range_rad": float(half),
                                  "full_flexion_rad": float(q2max)}
                           for name, (half, q2max)
                           in geometry.coupled_limits.entries.items()},
        "palm_keypoints": {name: [float(v) for v in point]
                           for name, point in geometry.palm_keypoints.items()},
    }
    _save_json(doc, path)


def load_hand_geometry(path: str) -> HandGeometry:
    doc = _load_json(path, HAND_FORMAT)
    _warn_unknown(doc, ("format", "version", "digits", "mounts",
                        "coupled_limits", "palm_keypoints"), path, "geometry")
    digits_obj = _require(doc, "digits", path, "geometry")
    digits = {name: finger_geometry_from_dict(obj, path, f"digit '{name}'")
              for name, obj in digits_obj.items()}
    mounts = {}
    for name, mount in _require(doc, "mounts", path, "geometry").items():
        _warn_unknown(mount, ("rotation_unit", "translation_m"), path,
                      f"mount '{name}'")
        rot = np.asarray(_require(mount, "rotation_unit", path,
                                  f"mount '{name}'"), dtype=float)
        trans = np.asarray(_require(mount, "translation_m", path,
                                    f"mount '{name}'"), dtype=float)
        mounts[name] = (rot, trans)
    limits = {}
    for name, entry in _require(doc, "coupled_limits", path,
                                "geometry").items():
        _warn_unknown(entry, ("abduction_half_range_rad", "full_flexion_rad"),
                      path, f"coupled limit '{name}'")
        limits[name] = (float(_require(entry, "abduction_half_range_rad",
                                       path, f"coupled limit '{name}'")),
                        float(_require(entry, "full_flexion_rad", path,
                                       f"coupled limit '{name}'")))
    palm = {name: np.asarray(point, dtype=float)
            for name, point in _require(doc, "palm_keypoints", path,
                                        "geometry").items()}
    try:
        return HandGeometry(digits, mounts, CoupledLimitMap(limits), palm)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


# --- retarget config ------------------------------------------------------------

_MEMBERSHIP_NAMES = {"none": Membership.NONE, "s1": Membership.S1,
                     "s2": Membership.S2}


def save_retarget_config(cfg: RetargetConfig, spec: KeyvectorSpec,
                         path: str) -> None:
    doc = {
        "format": RETARGET_FORMAT,
        "version": FORMAT_VERSION,
        "epsilon_m": float(cfg.epsilon),
        "eta1_m": float(cfg.eta1),
        "eta2_m": float(cfg.eta2),
        "lambda_smooth": float(cfg.lambda_smooth),
        "q_lower_rad": [float(v) for v in cfg.q_lower],
        "q_upper_rad": [float(v) for v in cfg.q_upper],
        "restart_residual_m": float(cfg.restart_residual),
        "solver": {
            "max_iterations": cfg.solver.max_iterations,
            "residual_tolerance": cfg.solver.residual_tolerance,
            "step_tolerance": cfg.solver.step_tolerance,
            "initial_damping": cfg.solver.initial_damping,
            "finite_difference_step": cfg.solver.finite_difference_step,
            "cost_tolerance": cfg.solver.cost_tolerance,
        },
        "keyvectors": [{
            "from": kv.from_keypoint,
            "to": kv.to_keypoint,
            "membership": kv.membership.value,
            "beta": [float(v) for v in kv.beta],
        } for kv in spec.entries],
    }
    _save_json(doc, path)


def load_retarget_config(path: str) -> Tuple[RetargetConfig, KeyvectorSpec]:
    doc = _load_json(path, RETARGET_FORMAT)
    known = ("format", "version", "epsilon_m", "eta1_m", "eta2_m",
             "lambda_smooth", "q_lower_rad", "q_upper_rad",
             "restart_residual_m", "solver", "keyvectors")
    _warn_unknown(doc, known, path, "retarget config")
    solver_obj = _require(doc, "solver", path, "retarget config")
    solver_known = ("max_iterations", "residual_tolerance", "step_tolerance",
                    "initial_damping", "finite_difference_step",
                    "cost_tolerance")
    _warn_unknown(solver_obj, solver_known, path, "solver")
    try:
        solver = SolverSettings(
            max_iterations=int(_require(solver_obj, "max_iterations", path,
                                        "solver")),
            residual_tolerance=float(_require(solver_obj, "residual_tolerance",
                                              path, "solver")),
            step_tolerance=float(_require(solver_obj, "step_tolerance", path,
                                          "solver")),
            initial_damping=float(_require(solver_obj, "initial_damping", path,
                                           "solver")),
            finite_difference_step=float(
                _require(solver_obj, "finite_difference_step", path, "solver")),
            cost_tolerance=float(solver_obj.get("cost_tolerance", 1e-12)),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: solver: {exc}") from exc
    entries = []
    for i, kv in enumerate(_as_list(_require(doc, "keyvectors", path,
                                             "retarget config"),
                                    path, "keyvectors")):
        context = f"keyvector {i}"
        _warn_unknown(kv, ("from", "to", "membership", "beta"), path, context)
        membership_name = str(_require(kv, "membership", path, context)).lower()
        if membership_name not in _MEMBERSHIP_NAMES:
            raise ConfigError(f"{path}: {context}: unknown membership "
                              f"'{membership_name}'")
        try:
            entries.append(Keyvector(
                from_keypoint=str(_require(kv, "from", path, context)),
                to_keypoint=str(_require(kv, "to", path, context)),
                membership=_MEMBERSHIP_NAMES[membership_name],
                beta=np.asarray(_require(kv, "beta", path, context),
                                dtype=float)))
        except ValueError as exc:
            raise ConfigError(f"{path}: {context}: {exc}") from exc
    try:
        spec = KeyvectorSpec(tuple(entries))
        cfg = RetargetConfig(
            epsilon=float(_require(doc, "epsilon_m", path, "retarget config")),
            eta1=float(_require(doc, "eta1_m", path, "retarget config")),
            eta2=float(_require(doc, "eta2_m", path, "retarget config")),
            lambda_smooth=float(_require(doc, "lambda_smooth", path,
                                         "retarget config")),
            q_lower=np.asarray(_require(doc, "q_lower_rad", path,
                                        "retarget config"), dtype=float),
            q_upper=np.asarray(_require(doc, "q_upper_rad", path,
                                        "retarget config"), dtype=float),
            solver=solver,
            restart_residual=float(_require(doc, "restart_residual_m", path,
                                            "retarget config")),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return cfg, spec


# --- arm model / arm IK config ---------------------------------------------------

def save_arm_model(model: ArmModel, path: str) -> None:
    doc = {
        "format": ARM_MODEL_FORMAT,
        "version": FORMAT_VERSION,
        "joint_translations_m": [[float(v) for v in row]
                                 for row in model.joint_translations],
        "joint_axes_unit": [[float(v) for v in row]
                            for row in model.joint_axes],
        "q_lower_rad": [float(v) for v in model.q_lower],
        "q_upper_rad": [float(v) for v in model.q_upper],
        "velocity_limit_rad_per_s": [float(v) for v in model.velocity_limit],
        "tool_translation_m": [float(v) for v in model.tool_translation],
        "tool_rotation_unit": [[float(v) for v in row]
                               for row in model.tool_rotation],
        "shoulder_index": model.shoulder_index,
        "elbow_index": model.elbow_index,
        "wrist_index": model.wrist_index,
    }
    _save_json(doc, path)


def load_arm_model(path: str) -> ArmModel:
    doc = _load_json(path, ARM_MODEL_FORMAT)
    known = ("format", "version", "joint_translations_m", "joint_axes_unit",
             "q_lower_rad", "q_upper_rad", "velocity_limit_rad_per_s",
             "tool_translation_m", "tool_rotation_unit", "shoulder_index",
             "elbow_index", "wrist_index")
    _warn_unknown(doc, known, path, "arm model")
    try:
        return ArmModel(
            joint_translations=_require(doc, "joint_translations_m", path,
                                        "arm model"),
            joint_axes=_require(doc, "joint_axes_unit", path, "arm model"),
            q_lower=_require(doc, "q_lower_rad", path, "arm model"),
            q_upper=_require(doc, "q_upper_rad", path, "arm model"),
            velocity_limit=_require(doc, "velocity_limit_rad_per_s", path,
                                    "arm model"),
            tool_translation=_require(doc, "tool_translation_m", path,
                                      "arm model"),
            tool_rotation=_require(doc, "tool_rotation_unit", path,
                                   "arm model"),
            shoulder_index=int(_require(doc, "shoulder_index", path,
                                        "arm model")),
            elbow_index=int(_require(doc, "elbow_index", path, "arm model")),
            wrist_index=int(_require(doc, "wrist_index", path, "arm model")),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def save_arm_ik_config(cfg: ArmIKConfig, path: str) -> None:
    def weight(w):
        return float(w) if np.ndim(w) == 0 else [float(v) for v in w]

    doc = {
        "format": ARM_IK_FORMAT,
        "version": FORMAT_VERSION,
        "lambda_scale": float(cfg.lambda_scale),
        "weight_pose": weight(cfg.w0),
        "weight_arm_angle": weight(cfg.w1),
        "weight_velocity": weight(cfg.w2),
        "weight_smoothness": weight(cfg.w3),
        "dt_s": float(cfg.dt_s),
        "velocity_damper_margin_rad": float(cfg.velocity_damper_margin_rad),
        "damper_gain": float(cfg.damper_gain),
        "reference_direction_unit": [float(v) for v in cfg.reference_direction],
        "kkt_tolerance": float(cfg.kkt_tolerance),
        "swivel_target_rad": (None if cfg.swivel_target_rad is None
                              else float(cfg.swivel_target_rad)),
    }
    _save_json(doc, path)


def load_arm_ik_config(path: str) -> ArmIKConfig:
    doc = _load_json(path, ARM_IK_FORMAT)
    known = ("format", "version", "lambda_scale", "weight_pose",
             "weight_arm_angle", "weight_velocity", "weight_smoothness",
             "dt_s", "velocity_damper_margin_rad", "damper_gain",
             "reference_direction_unit", "kkt_tolerance", "swivel_target_rad")
    _warn_unknown(doc, known, path, "arm IK config")

    def weight(value):
        return value if np.ndim(value) == 0 else np.asarray(value, dtype=float)

    target = doc.get("swivel_target_rad")
    try:
        return ArmIKConfig(
            lambda_scale=float(_require(doc, "lambda_scale", path,
                                        "arm IK config")),
            w0=weight(_require(doc, "weight_pose", path, "arm IK config")),
            w1=weight(_require(doc, "weight_arm_angle", path,
                               "arm IK config")),
            w2=weight(_require(doc, "weight_velocity", path, "arm IK config")),
            w3=weight(_require(doc, "weight_smoothness", path,
                               "arm IK config")),
            dt_s=float(_require(doc, "dt_s", path, "arm IK config")),
            velocity_damper_margin_rad=float(
                _require(doc, "velocity_damper_margin_rad", path,
                         "arm IK config")),
            damper_gain=float(_require(doc, "damper_gain", path,
                                       "arm IK config")),
            reference_direction=tuple(
                float(v) for v in _require(doc, "reference_direction_unit",
                                           path, "arm IK config")),
            kkt_tolerance=float(_require(doc, "kkt_tolerance", path,
                                         "arm IK config")),
            swivel_target_rad=None if target is None else float(target),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


# --- session -----------------------------------------------------------------

@dataclass
class SessionConfig:
    """Replay session: input streams, component configs, rates, and mode."""

    glove_stream: str
    wrist_stream: str
    hand_geometry: str
    retarget_config: str
    arm_model: str
    arm_ik_config: str
    hand_rate_hz: float = 100.0
    arm_rate_hz: float = 50.0
    mode: str = "replay"
    workers: int = 1
    input_gap_s: float = 0.05
    arm_home_rad: Optional[np.ndarray] = None
    root: str = "."

    def __post_init__(self) -> None:
        if self.hand_rate_hz <= 0.0 or self.arm_rate_hz <= 0.0:
            raise ConfigError("loop rates must be positive")
        if self.input_gap_s <= 0.0:
            raise ConfigError("input_gap_s must be positive")
        if self.mode not in ("replay", "realtime"):
            raise ConfigError(f"unknown mode '{self.mode}' "
                              f"(replay or realtime)")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.arm_home_rad is not None:
            self.arm_home_rad = np.asarray(self.arm_home_rad, dtype=float)
            if self.arm_home_rad.shape != (7,):
                raise ConfigError("arm_home_rad must have 7 entries")

    def resolve(self, name: str) -> str:
        path = getattr(self, name)
        return os.path.normpath(os.path.join(self.root, path))


def save_session_config(session: SessionConfig, path: str) -> None:
    doc = {
        "format": SESSION_FORMAT,
        "version": FORMAT_VERSION,
        "glove_stream": session.glove_stream,
        "wrist_stream": session.wrist_stream,
        "hand_geometry": session.hand_geometry,
        "retarget_config": session.retarget_config,
        "arm_model": session.arm_model,
        "arm_ik_config": session.arm_ik_config,
        "hand_rate_hz": float(session.hand_rate_hz),
        "arm_rate_hz": float(session.arm_rate_hz),
        "mode": session.mode,
        "workers": session.workers,
        "input_gap_s": float(session.input_gap_s),
        "arm_home_rad": (None if session.arm_home_rad is None
                         else [float(v) for v in session.arm_home_rad]),
    }
    _save_json(doc, path)


def load_session_config(path: str, root: Optional[str] = None) -> SessionConfig:
    doc = _load_json(path, SESSION_FORMAT)
    known = ("format", "version", "glove_stream", "wrist_stream",
             "hand_geometry", "retarget_config", "arm_model", "arm_ik_config",
             "hand_rate_hz", "arm_rate_hz", "mode", "workers", "input_gap_s",
             "arm_home_rad")
    _warn_unknown(doc, known, path, "session")
    home = doc.get("arm_home_rad")
    return SessionConfig(
        glove_stream=str(_require(doc, "glove_stream", path, "session")),
        wrist_stream=str(_require(doc, "wrist_stream", path, "session")),
        hand_geometry=str(_require(doc, "hand_geometry", path, "session")),
        retarget_config=str(_require(doc, "retarget_config", path, "session")),
        arm_model=str(_require(doc, "arm_model", path, "session")),
        arm_ik_config=str(_require(doc, "arm_ik_config", path, "session")),
        hand_rate_hz=float(doc.get("hand_rate_hz", 100.0)),
        arm_rate_hz=float(doc.get("arm_rate_hz", 50.0)),
        mode=str(doc.get("mode", "replay")),
        workers=int(doc.get("workers", 1)),
        input_gap_s=float(doc.get("input_gap_s", 0.05)),
        arm_home_rad=home,
        root=root if root is not None else os.path.dirname(os.path.abspath(path)),
    )
