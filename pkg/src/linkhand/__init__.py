"""Linkage-driven hand kinematics, retargeting, and arm tracking."""

from .solver import (
    SolverSettings,
    SolveResult,
    SolveStatus,
    ResidualProblem,
    numeric_jacobian,
    solve_root,
    solve_least_squares,
)
from .finger import (
    ActuatorState,
    FingerGeometry,
    FingerJointState,
    FingerKinematicsError,
    NoConvergence,
    OutOfTravel,
    SingularCoupling,
    TravelExceeded,
    finger_fk,
    finger_ik,
    link_keypoints,
    link_keypoints_jacobian,
    solve_dip_flex,
    dip_coupling_derivative,
    transmission_residuals,
)
from .hand import (
    DIGITS,
    FINGERS,
    KEYPOINT_LABELS,
    CoupledLimitMap,
    HandGeometry,
    HandJointState,
    ThumbActuatorState,
    clamp_command,
    coupled_mcp_limit,
    hand_fk,
    hand_fk_from_actuators,
    hand_ik,
    thumb_fk,
    thumb_ik,
    thumb_transmission_residuals,
)
from .retarget import (
    LANDMARK_LABELS,
    HumanHandFrame,
    Keyvector,
    KeyvectorSpec,
    Membership,
    RetargetConfig,
    RetargetState,
    calibrate_betas,
    default_keyvector_spec,
    extract_keyvectors,
    retarget_step,
    target_length,
    target_vector,
    weight,
)
from .armik import (
    REFERENCE_ARM_HOME,
    ArmIKConfig,
    ArmModel,
    ArmState,
    DegenerateAxis,
    arm_angle,
    integrate,
    pose_error_twist,
    reference_arm_model,
    solve_arm_qp,
    swivel_from_points,
    tool_jacobian,
    tool_pose,
    velocity_bounds,
)
from .reference import build_hand_geometry
from .streams import (
    COMMAND_LOG_COLUMNS,
    CommandLog,
    CommandLogRow,
    GloveStreamRecord,
    IoError,
    NonMonotoneTimestamp,
    ParseError,
    VersionError,
    WristStreamRecord,
    parse_command_log,
    parse_glove_stream,
    parse_stream,
    parse_wrist_stream,
    write_command_log,
    write_glove_stream,
    write_wrist_stream,
)
from .config import (
    ConfigError,
    SessionConfig,
    load_arm_ik_config,
    load_arm_model,
    load_hand_geometry,
    load_retarget_config,
    load_session_config,
    save_arm_ik_config,
    save_arm_model,
    save_hand_geometry,
    save_retarget_config,
    save_session_config,
)
from .runtime import EmptyLog, LatencyReport, latency_report, run_replay

__version__ = "0.1.0"

__all__ = [
    "SolverSettings", "SolveResult", "SolveStatus", "ResidualProblem",
    "numeric_jacobian", "solve_root", "solve_least_squares",
    "ActuatorState", "FingerGeometry", "FingerJointState",
    "FingerKinematicsError", "NoConvergence", "OutOfTravel",
    "SingularCoupling", "TravelExceeded",
    "finger_fk", "finger_ik", "link_keypoints", "link_keypoints_jacobian",
    "solve_dip_flex", "dip_coupling_derivative", "transmission_residuals",
    "DIGITS", "FINGERS", "KEYPOINT_LABELS",
    "CoupledLimitMap", "HandGeometry", "HandJointState", "ThumbActuatorState",
    "clamp_command", "coupled_mcp_limit", "hand_fk", "hand_fk_from_actuators",
    "hand_ik", "thumb_fk", "thumb_ik", "thumb_transmission_residuals",
    "LANDMARK_LABELS", "HumanHandFrame", "Keyvector", "KeyvectorSpec",
    "Membership", "RetargetConfig", "RetargetState",
    "calibrate_betas", "default_keyvector_spec", "extract_keyvectors",
    "retarget_step", "target_length", "target_vector", "weight",
    "REFERENCE_ARM_HOME", "ArmIKConfig", "ArmModel", "ArmState",
    "DegenerateAxis", "arm_angle", "integrate", "pose_error_twist",
    "reference_arm_model", "solve_arm_qp", "swivel_from_points",
    "tool_jacobian", "tool_pose", "velocity_bounds",
    "build_hand_geometry",
    "COMMAND_LOG_COLUMNS", "CommandLog", "CommandLogRow",
    "GloveStreamRecord", "IoError", "NonMonotoneTimestamp", "ParseError",
    "VersionError", "WristStreamRecord",
    "parse_command_log", "parse_glove_stream", "parse_stream",
    "parse_wrist_stream",
    "write_command_log", "write_glove_stream", "write_wrist_stream",
    "ConfigError", "SessionConfig",
    "load_arm_ik_config", "load_arm_model", "load_hand_geometry",
    "load_retarget_config", "load_session_config",
    "save_arm_ik_config", "save_arm_model", "save_hand_geometry",
    "save_retarget_config", "save_session_config",
    "EmptyLog", "LatencyReport", "latency_report", "run_replay",
]
