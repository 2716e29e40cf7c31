"""Stream and log file formats: glove landmarks, wrist poses, command logs.

Streams are line-delimited JSON with a one-line version header; command logs
are CSV with a version comment line.  Floats are serialized with shortest
round-trip repr, so write-then-parse is bit-faithful and locale-independent.
Unknown format versions are hard errors; unknown trailing fields are ignored
with a warning (forward compatibility for added columns).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .retarget import LANDMARK_LABELS, HumanHandFrame

_log = logging.getLogger(__name__)

GLOVE_FORMAT = "glove-stream"
WRIST_FORMAT = "wrist-stream"
COMMAND_LOG_FORMAT = "command-log"
FORMAT_VERSION = 1


class ParseError(RuntimeError):
    """Malformed stream content; carries the 1-based line number."""

    def __init__(self, line: int, reason: str) -> None:
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class NonMonotoneTimestamp(ParseError):
    """Timestamps must strictly increase within a stream."""


class VersionError(RuntimeError):
    """Unknown or mismatched format version."""


class IoError(RuntimeError):
    """File-level read/write failure (wraps the OS error)."""


def _quaternion_ok(q: np.ndarray) -> bool:
    return bool(abs(float(np.linalg.norm(q)) - 1.0) <= 1e-6)


@dataclass
class GloveStreamRecord:
    """One glove sample: 25 labeled landmark poses at a timestamp."""

    timestamp_s: float
    landmarks: Dict[str, Tuple[np.ndarray, np.ndarray]]

    def __post_init__(self) -> None:
        if set(self.landmarks) != set(LANDMARK_LABELS):
            missing = set(LANDMARK_LABELS) - set(self.landmarks)
            extra = set(self.landmarks) - set(LANDMARK_LABELS)
            raise ValueError(
                f"landmark labels mismatch (missing {sorted(missing)}, "
                f"unknown {sorted(extra)})")
        normalized = {}
        for label, (pos, quat) in self.landmarks.items():
            pos = np.asarray(pos, dtype=float)
            quat = np.asarray(quat, dtype=float)
            if pos.shape != (3,) or not np.all(np.isfinite(pos)):
                raise ValueError(f"landmark '{label}' position must be a "
                                 f"finite 3-vector")
            if quat.shape != (4,) or not _quaternion_ok(quat):
                raise ValueError(f"landmark '{label}' orientation must be a "
                                 f"unit quaternion (wxyz)")
            normalized[label] = (pos, quat)
        self.landmarks = normalized

    def to_frame(self) -> HumanHandFrame:
        """Positions only; orientation-based retargeting is out of scope."""
        return HumanHandFrame(
            self.timestamp_s,
            {label: pos for label, (pos, _) in self.landmarks.items()})


@dataclass
class WristStreamRecord:
    """Controller pose relative to its start pose (first record identity)."""

    timestamp_s: float
    position_m: np.ndarray
    quaternion_wxyz: np.ndarray

    def __post_init__(self) -> None:
        self.position_m = np.asarray(self.position_m, dtype=float)
        self.quaternion_wxyz = np.asarray(self.quaternion_wxyz, dtype=float)
        if self.position_m.shape != (3,) or not np.all(np.isfinite(self.position_m)):
            raise ValueError("position must be a finite 3-vector")
        if self.quaternion_wxyz.shape != (4,) or not _quaternion_ok(self.quaternion_wxyz):
            raise ValueError("orientation must be a unit quaternion (wxyz)")

    def rotation(self) -> np.ndarray:
        w, x, y, z = self.quaternion_wxyz
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])


_STATUS_FLAGS = ("ok", "hand_hold", "arm_hold", "input_gap")


@dataclass
class CommandLogRow:
    """One control tick: commands, latencies, and fault flags."""

    timestamp_s: float
    joints_rad: np.ndarray          # 20, digit-major
    actuators: np.ndarray           # 15, digit-major (thumb abduction is rad,
                                    # every other entry is meters)
    arm_velocity_rad_s: np.ndarray  # 7
    retarget_us: int
    hand_ik_us: int
    arm_us: int
    flags: Tuple[str, ...] = ("ok",)

    def __post_init__(self) -> None:
        self.joints_rad = np.asarray(self.joints_rad, dtype=float)
        self.actuators = np.asarray(self.actuators, dtype=float)
        self.arm_velocity_rad_s = np.asarray(self.arm_velocity_rad_s, dtype=float)
        if self.joints_rad.shape != (20,):
            raise ValueError("joints_rad must have shape (20,)")
        if self.actuators.shape != (15,):
            raise ValueError("actuators must have shape (15,)")
        if self.arm_velocity_rad_s.shape != (7,):
            raise ValueError("arm_velocity_rad_s must have shape (7,)")
        self.flags = tuple(self.flags)
        for flag in self.flags:
            if flag not in _STATUS_FLAGS:
                raise ValueError(f"unknown status flag '{flag}'")


@dataclass
class CommandLog:
    rows: List[CommandLogRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def append(self, row: CommandLogRow) -> None:
        if self.rows and row.timestamp_s <= self.rows[-1].timestamp_s:
            raise ValueError("command log timestamps must strictly increase")
        self.rows.append(row)


# --- JSONL streams -----------------------------------------------------------

def _format_float(x: float) -> float:
    # json emits repr(float), which round-trips exactly; pass through.
    return float(x)


def _header_line(fmt: str) -> str:
    return json.dumps({"format": fmt, "version": FORMAT_VERSION},
                      separators=(",", ":"))


def _parse_header(line: str, path: str) -> dict:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(1, f"header is not valid JSON ({exc.msg})") from exc
    if not isinstance(header, dict) or "format" not in header:
        raise ParseError(1, "header must be an object with a 'format' field")
    version = header.get("version")
    if version != FORMAT_VERSION:
        raise VersionError(
            f"{path}: unsupported {header.get('format')} version {version!r} "
            f"(supported: {FORMAT_VERSION})")
    known = {"format", "version"}
    extra = set(header) - known
    if extra:
        _log.warning("%s: ignoring unknown header fields %s", path, sorted(extra))
    return header


def _check_known_fields(obj: dict, known: Iterable[str], line: int,
                        path: str) -> None:
    extra = set(obj) - set(known)
    if extra:
        _log.warning("%s line %d: ignoring unknown fields %s",
                     path, line, sorted(extra))


def write_glove_stream(records: Sequence[GloveStreamRecord], path: str) -> None:
    lines = [_header_line(GLOVE_FORMAT)]
    for rec in records:
        lines.append(json.dumps({
            "t_s": _format_float(rec.timestamp_s),
            "landmarks": {
                label: {"p_m": [float(v) for v in pos],
                        "q_wxyz": [float(v) for v in quat]}
                for label, (pos, quat) in rec.landmarks.items()},
        }, separators=(",", ":")))
    try:
        with open(path, "w", encoding="ascii") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def write_wrist_stream(records: Sequence[WristStreamRecord], path: str) -> None:
    if records:
        first = records[0]
        if (np.max(np.abs(first.position_m)) > 1e-9
                or np.max(np.abs(first.quaternion_wxyz
                                 - np.array([1.0, 0, 0, 0]))) > 1e-9):
            raise ValueError("first wrist record must be the identity pose "
                             "(relative-to-start convention)")
    lines = [_header_line(WRIST_FORMAT)]
    for rec in records:
        lines.append(json.dumps({
            "t_s": _format_float(rec.timestamp_s),
            "p_m": [float(v) for v in rec.position_m],
            "q_wxyz": [float(v) for v in rec.quaternion_wxyz],
        }, separators=(",", ":")))
    try:
        with open(path, "w", encoding="ascii") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _read_lines(path: str) -> List[str]:
    try:
        with open(path, "r", encoding="ascii") as fh:
            return fh.read().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def _parse_glove_record(obj: dict, line: int, path: str) -> GloveStreamRecord:
    _check_known_fields(obj, ("t_s", "landmarks"), line, path)
    if "t_s" not in obj or "landmarks" not in obj:
        raise ParseError(line, "record needs 't_s' and 'landmarks'")
    landmarks_obj = obj["landmarks"]
    if not isinstance(landmarks_obj, dict):
        raise ParseError(line, "'landmarks' must be an object")
    landmarks = {}
    for label, entry in landmarks_obj.items():
        if not isinstance(entry, dict) or "p_m" not in entry or "q_wxyz" not in entry:
            raise ParseError(line, f"landmark '{label}' needs 'p_m' and 'q_wxyz'")
        _check_known_fields(entry, ("p_m", "q_wxyz"), line, path)
        landmarks[label] = (entry["p_m"], entry["q_wxyz"])
    try:
        return GloveStreamRecord(float(obj["t_s"]), landmarks)
    except (TypeError, ValueError) as exc:
        raise ParseError(line, str(exc)) from exc


def _parse_wrist_record(obj: dict, line: int, path: str) -> WristStreamRecord:
    _check_known_fields(obj, ("t_s", "p_m", "q_wxyz"), line, path)
    for key in ("t_s", "p_m", "q_wxyz"):
        if key not in obj:
            raise ParseError(line, f"record needs '{key}'")
    try:
        return WristStreamRecord(float(obj["t_s"]), obj["p_m"], obj["q_wxyz"])
    except (TypeError, ValueError) as exc:
        raise ParseError(line, str(exc)) from exc


def parse_stream(path: str) -> Union[List[GloveStreamRecord],
                                     List[WristStreamRecord]]:
    """Parse a stream file, dispatching on its header's format field."""
    lines = _read_lines(path)
    if not lines or not lines[0].strip():
        return []
    header = _parse_header(lines[0], path)
    fmt = header["format"]
    if fmt == GLOVE_FORMAT:
        parser = _parse_glove_record
    elif fmt == WRIST_FORMAT:
        parser = _parse_wrist_record
    else:
        raise ParseError(1, f"unknown stream format '{fmt}'")
    records: list = []
    last_t = -math.inf
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ParseError(lineno, f"invalid JSON ({exc.msg})") from exc
        record = parser(obj, lineno, path)
        if record.timestamp_s <= last_t:
            raise NonMonotoneTimestamp(
                lineno, f"timestamp {record.timestamp_s!r} does not increase "
                        f"past {last_t!r}")
        last_t = record.timestamp_s
        records.append(record)
    if fmt == WRIST_FORMAT and records:
        first = records[0]
        if (np.max(np.abs(first.position_m)) > 1e-9
                or np.max(np.abs(first.quaternion_wxyz
                                 - np.array([1.0, 0, 0, 0]))) > 1e-9):
            raise ParseError(2, "first wrist record must be the identity pose")
    return records


def parse_glove_stream(path: str) -> List[GloveStreamRecord]:
    records = parse_stream(path)
    if records and not isinstance(records[0], GloveStreamRecord):
        raise ParseError(1, "expected a glove stream")
    return records


def parse_wrist_stream(path: str) -> List[WristStreamRecord]:
    records = parse_stream(path)
    if records and not isinstance(records[0], WristStreamRecord):
        raise ParseError(1, "expected a wrist stream")
    return records


# --- command log (CSV) --------------------------------------------------------

_JOINT_NAMES = ("spread", "mcp", "pip", "dip")
_DIGITS = ("thumb", "index", "middle", "ring", "pinky")
_ACTUATOR_NAMES = {
    "thumb": ("abduction_rad", "flex_m", "pip_m"),
    "index": ("mcp_a_m", "mcp_b_m", "pip_m"),
    "middle": ("mcp_a_m", "mcp_b_m", "pip_m"),
    "ring": ("mcp_a_m", "mcp_b_m", "pip_m"),
    "pinky": ("mcp_a_m", "mcp_b_m", "pip_m"),
}


def _command_log_columns() -> List[str]:
    cols = ["t_s"]
    cols += [f"q_{d}_{j}_rad" for d in _DIGITS for j in _JOINT_NAMES]
    cols += [f"act_{d}_{name}" for d in _DIGITS for name in _ACTUATOR_NAMES[d]]
    cols += [f"qd_arm_{i}_rad_per_s" for i in range(7)]
    cols += ["retarget_us", "hand_ik_us", "arm_us", "status"]
    return cols


COMMAND_LOG_COLUMNS = _command_log_columns()


def write_command_log(log: CommandLog, path: str) -> None:
    lines = [f"# format={COMMAND_LOG_FORMAT} version={FORMAT_VERSION}",
             ",".join(COMMAND_LOG_COLUMNS)]
    for row in log.rows:
        fields = [repr(row.timestamp_s)]
        fields += [repr(float(v)) for v in row.joints_rad]
        fields += [repr(float(v)) for v in row.actuators]
        fields += [repr(float(v)) for v in row.arm_velocity_rad_s]
        fields += [str(int(row.retarget_us)), str(int(row.hand_ik_us)),
                   str(int(row.arm_us)), "+".join(row.flags)]
        lines.append(",".join(fields))
    try:
        with open(path, "w", encoding="ascii") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def parse_command_log(path: str) -> CommandLog:
    lines = _read_lines(path)
    if not lines:
        return CommandLog()
    head = lines[0].strip()
    if not head.startswith("# format="):
        raise ParseError(1, "missing command-log version comment")
    parts = dict(p.split("=", 1) for p in head[2:].split() if "=" in p)
    if parts.get("format") != COMMAND_LOG_FORMAT:
        raise ParseError(1, f"not a command log (format "
                            f"{parts.get('format')!r})")
    if parts.get("version") != str(FORMAT_VERSION):
        raise VersionError(f"{path}: unsupported command-log version "
                           f"{parts.get('version')!r}")
    if len(lines) < 2:
        return CommandLog()
    header = lines[1].split(",")
    expected = COMMAND_LOG_COLUMNS
    if header[:len(expected)] != expected:
        raise ParseError(2, "command-log column header mismatch")
    if len(header) > len(expected):
        _log.warning("%s: ignoring unknown trailing columns %s",
                     path, header[len(expected):])
    log = CommandLog()
    for lineno, raw in enumerate(lines[2:], start=3):
        if not raw.strip():
            continue
        fields = raw.split(",")
        if len(fields) < len(expected):
            raise ParseError(lineno, f"expected {len(expected)} columns, "
                                     f"got {len(fields)}")
        try:
            t = float(fields[0])
            joints = np.array([float(v) for v in fields[1:21]])
            actuators = np.array([float(v) for v in fields[21:36]])
            arm = np.array([float(v) for v in fields[36:43]])
            retarget_us = int(fields[43])
            hand_us = int(fields[44])
            arm_us = int(fields[45])
            flags = tuple(fields[46].split("+"))
            row = CommandLogRow(t, joints, actuators, arm, retarget_us,
                                hand_us, arm_us, flags)
        except (TypeError, ValueError) as exc:
            raise ParseError(lineno, str(exc)) from exc
        try:
            log.append(row)
        except ValueError as exc:
            raise NonMonotoneTimestamp(lineno, str(exc)) from exc
    return log
