"""Replay pipeline: glove frames to hand commands, wrist poses to arm velocities.

The command loop runs at the configured hand rate with zero-order hold on the
most recent glove frame; the arm task recomputes at the arm rate and holds its
command between arm ticks.  On a solver failure or a stale input the previous
command is repeated verbatim and the row is flagged.  Replay mode records zero
latencies so logs are bitwise reproducible; realtime mode paces ticks by the
wall clock and records measured latencies.
"""

from __future__ import annotations

import bisect
import math
import time
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .armik import (ArmState, DegenerateAxis, arm_angle, integrate,
                    pose_error_twist, solve_arm_qp, tool_jacobian, tool_pose,
                    velocity_bounds)
from .config import (SessionConfig, load_arm_ik_config, load_arm_model,
                     load_hand_geometry, load_retarget_config)
from .finger import NoConvergence, TravelExceeded
from .hand import DIGITS, HandJointState, clamp_command, hand_ik
from .retarget import RetargetState, retarget_step
from .streams import (CommandLog, CommandLogRow, parse_glove_stream,
                      parse_wrist_stream)

__all__ = ["run_replay", "latency_report", "LatencyReport", "EmptyLog",
           "CommandLog", "CommandLogRow"]

HAND_BUDGET_US = 10_000    # 100 Hz loop
ARM_BUDGET_US = 20_000     # 50 Hz loop


class EmptyLog(RuntimeError):
    """Latency summary requested for a log with no rows."""


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def _actuator_array(acts: Dict[str, object]) -> np.ndarray:
    return np.concatenate([acts[d].as_array() for d in DIGITS])


def _zoh_index(times: List[float], t: float) -> int:
    """Index of the most recent sample at or before t (-1 if none)."""
    return bisect.bisect_right(times, t) - 1


@dataclass
class _HandStage:
    """Retarget + transmission IK with hold-last fault policy."""

    geometry: object
    spec: object
    cfg: object
    workers: int
    state: RetargetState
    warm: Optional[Dict[str, object]] = None
    joints: Optional[np.ndarray] = None
    actuators: Optional[np.ndarray] = None
    retarget_ns: int = 0
    hand_ik_ns: int = 0

    def start(self) -> None:
        rest = clamp_command(HandJointState.rest(), self.geometry)
        self.joints = rest.as_array()
        acts = hand_ik(rest, self.geometry, workers=self.workers)
        self.warm = acts
        self.actuators = _actuator_array(acts)

    def step(self, frame) -> bool:
        """Advance on a fresh frame; False leaves the held command in place."""
        try:
            began = time.perf_counter_ns()
            q_cmd = retarget_step(frame, self.spec, self.cfg, self.state,
                                  self.geometry)
            mid = time.perf_counter_ns()
            acts = hand_ik(q_cmd, self.geometry, warm=self.warm,
                           workers=self.workers)
            self.retarget_ns = mid - began
            self.hand_ik_ns = time.perf_counter_ns() - mid
        except (NoConvergence, TravelExceeded):
            return False
        self.warm = acts
        self.joints = q_cmd.as_array()
        self.actuators = _actuator_array(acts)
        return True


@dataclass
class _ArmStage:
    """Differential IK toward the wrist-relative tool target."""

    model: object
    cfg: object
    state: ArmState
    home_pose: Tuple[np.ndarray, np.ndarray]
    swivel_target: float
    q_dot: np.ndarray

    def step(self, wrist_record, dt: float) -> bool:
        rot_rel = wrist_record.rotation()
        target = (rot_rel @ self.home_pose[0],
                  self.home_pose[1] + wrist_record.position_m)
        try:
            angle, jac_angle = arm_angle(self.state.q, self.model, self.cfg)
        except DegenerateAxis:
            return False
        delta_x = pose_error_twist(tool_pose(self.state.q, self.model), target)
        delta_angle = _wrap_angle(self.swivel_target - angle)
        bounds = velocity_bounds(self.state.q, self.model, self.cfg)
        try:
            q_dot = solve_arm_qp(tool_jacobian(self.state.q, self.model),
                                 delta_x, jac_angle, delta_angle, self.state,
                                 bounds, self.cfg)
        except RuntimeError:
            return False
        self.state = integrate(self.state, q_dot, dt)
        self.q_dot = q_dot
        return True


def _make_arm_stage(session: SessionConfig, model, cfg,
                    arm_dt: float) -> _ArmStage:
    # The damper lookahead is one arm period regardless of the configured dt.
    cfg = replace(cfg, dt_s=arm_dt)
    if session.arm_home_rad is not None:
        q_home = np.asarray(session.arm_home_rad, dtype=float)
    else:
        q_home = 0.5 * (model.q_lower + model.q_upper)
    state = ArmState.at(q_home, model)
    swivel0, _ = arm_angle(q_home, model, cfg)
    target = (cfg.swivel_target_rad if cfg.swivel_target_rad is not None
              else swivel0)
    return _ArmStage(model=model, cfg=cfg, state=state,
                     home_pose=tool_pose(q_home, model), swivel_target=target,
                     q_dot=np.zeros(7))


def run_replay(session: SessionConfig) -> CommandLog:
    """Replay the session's streams into a command log.

    One row per hand tick from the first to the last glove timestamp.  The
    arm command updates on arm-rate boundaries and is held between them; an
    empty wrist stream leaves the arm columns at zero.  Rows where a stage
    held its previous command carry hand_hold / arm_hold flags, plus
    input_gap when the cause was a stale input rather than a solver failure.
    """
    geometry = load_hand_geometry(session.resolve("hand_geometry"))
    retarget_cfg, spec = load_retarget_config(
        session.resolve("retarget_config"))
    arm_model = load_arm_model(session.resolve("arm_model"))
    arm_cfg = load_arm_ik_config(session.resolve("arm_ik_config"))
    glove = parse_glove_stream(session.resolve("glove_stream"))
    wrist = parse_wrist_stream(session.resolve("wrist_stream"))

    log = CommandLog([])
    if not glove:
        return log

    realtime = session.mode == "realtime"
    hand_dt = 1.0 / session.hand_rate_hz
    arm_dt = 1.0 / session.arm_rate_hz
    glove_times = [rec.timestamp_s for rec in glove]
    wrist_times = [rec.timestamp_s for rec in wrist]
    t0 = glove_times[0]
    ticks = int(math.floor((glove_times[-1] - t0) / hand_dt + 1e-9)) + 1

    hand = _HandStage(geometry=geometry, spec=spec, cfg=retarget_cfg,
                      workers=session.workers, state=RetargetState())
    hand.start()
    arm = _make_arm_stage(session, arm_model, arm_cfg, arm_dt)
    next_arm_t = t0
    wall0 = time.perf_counter()

    for k in range(ticks):
        t = t0 + k * hand_dt
        if realtime:
            lag = (t - t0) - (time.perf_counter() - wall0)
            if lag > 0.0:
                time.sleep(lag)
        flags = set()
        retarget_us = hand_ik_us = arm_us = 0

        idx = _zoh_index(glove_times, t)
        if t - glove_times[idx] > session.input_gap_s:
            flags.update(("hand_hold", "input_gap"))
        elif hand.step(glove[idx].to_frame()):
            if realtime:
                retarget_us = hand.retarget_ns // 1000
                hand_ik_us = hand.hand_ik_ns // 1000
        else:
            flags.add("hand_hold")

        if wrist and t >= next_arm_t - 1e-9:
            while next_arm_t <= t + 1e-9:
                next_arm_t += arm_dt
            widx = _zoh_index(wrist_times, t)
            if widx < 0 or t - wrist_times[widx] > session.input_gap_s:
                flags.update(("arm_hold", "input_gap"))
            else:
                began = time.perf_counter_ns()
                if arm.step(wrist[widx], arm_dt):
                    if realtime:
                        arm_us = (time.perf_counter_ns() - began) // 1000
                else:
                    flags.add("arm_hold")

        log.append(CommandLogRow(
            timestamp_s=t,
            joints_rad=hand.joints.copy(),
            actuators=hand.actuators.copy(),
            arm_velocity_rad_s=arm.q_dot.copy(),
            retarget_us=int(retarget_us),
            hand_ik_us=int(hand_ik_us),
            arm_us=int(arm_us),
            flags=tuple(sorted(flags)) if flags else ("ok",),
        ))
    return log


@dataclass
class StageStats:
    median_us: float
    p99_us: float


@dataclass
class LatencyReport:
    """Per-stage latency percentiles and loop budget verdicts."""

    stages: Dict[str, StageStats]
    hand_tick_p99_us: float
    arm_p99_us: float
    hand_within_budget: bool
    arm_within_budget: bool

    def render(self) -> str:
        lines = ["stage         median_us      p99_us"]
        for name, s in self.stages.items():
            lines.append(f"{name:<12}{s.median_us:>12.1f}{s.p99_us:>12.1f}")
        lines.append(f"hand tick p99 {self.hand_tick_p99_us:.1f} us "
                     f"(budget {HAND_BUDGET_US} us): "
                     f"{'ok' if self.hand_within_budget else 'OVER'}")
        lines.append(f"arm tick p99 {self.arm_p99_us:.1f} us "
                     f"(budget {ARM_BUDGET_US} us): "
                     f"{'ok' if self.arm_within_budget else 'OVER'}")
        return "\n".join(lines)


def latency_report(log: CommandLog) -> LatencyReport:
    """Median/p99 per stage plus 100 Hz and 50 Hz budget verdicts."""
    if not log.rows:
        raise EmptyLog("latency report needs at least one row")
    cols = {
        "retarget": np.array([r.retarget_us for r in log.rows], dtype=float),
        "hand_ik": np.array([r.hand_ik_us for r in log.rows], dtype=float),
        "arm": np.array([r.arm_us for r in log.rows], dtype=float),
    }
    stages = {name: StageStats(float(np.median(v)),
                               float(np.percentile(v, 99.0)))
              for name, v in cols.items()}
    hand_tick = cols["retarget"] + cols["hand_ik"]
    hand_p99 = float(np.percentile(hand_tick, 99.0))
    arm_p99 = stages["arm"].p99_us
    return LatencyReport(stages=stages, hand_tick_p99_us=hand_p99,
                         arm_p99_us=arm_p99,
                         hand_within_budget=hand_p99 < HAND_BUDGET_US,
                         arm_within_budget=arm_p99 < ARM_BUDGET_US)
