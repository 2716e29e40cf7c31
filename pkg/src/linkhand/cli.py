"""Command-line surface: kinematics queries, replay, distances, benchmarks.

Exit codes: 0 success, 2 input parse failure (missing or malformed stream or
log), 3 configuration error, 4 solver non-convergence, 5 out-of-travel
actuator command, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from typing import Dict, List, Optional, Sequence

import numpy as np

from .armik import (ArmIKConfig, ArmState, reference_arm_model, solve_arm_qp,
                    tool_jacobian, velocity_bounds)
from .config import (ConfigError, load_hand_geometry, load_retarget_config,
                     load_session_config)
from .finger import (ActuatorState, FingerJointState, NoConvergence,
                     OutOfTravel, TravelExceeded, finger_fk, finger_ik,
                     transmission_residuals)
from .hand import (DIGITS, HandJointState, ThumbActuatorState, clamp_command,
                   hand_fk, hand_ik, thumb_fk, thumb_ik,
                   thumb_transmission_residuals)
from .retarget import (LANDMARK_LABELS, HumanHandFrame, RetargetConfig,
                       RetargetState, default_keyvector_spec, retarget_step)
from .runtime import latency_report, run_replay
from .streams import (IoError, ParseError, VersionError, parse_command_log,
                      parse_glove_stream, write_command_log)

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_CONFIG = 3
EXIT_NO_CONVERGENCE = 4
EXIT_OUT_OF_TRAVEL = 5
EXIT_USAGE = 64

FORMATS = ("text", "csv", "json-lines")


class UnknownPair(RuntimeError):
    """Fingertip pair not in the digit set."""


class _Parser(argparse.ArgumentParser):
    """argparse that exits 64 on bad flags instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _resolve(root: str, path: str) -> str:
    return os.path.normpath(os.path.join(root, path))


def _emit(rows: List[Dict[str, object]], columns: List[str],
          fmt: str, out=None) -> None:
    """Uniform row output: aligned text, csv, or one JSON object per line."""
    out = out or sys.stdout
    if fmt == "json-lines":
        for row in rows:
            out.write(json.dumps({c: row[c] for c in columns}) + "\n")
        return
    cells = [[repr(row[c]) if isinstance(row[c], float) else str(row[c])
              for c in columns] for row in rows]
    if fmt == "csv":
        out.write(",".join(columns) + "\n")
        for line in cells:
            out.write(",".join(line) + "\n")
        return
    widths = [max(len(c), *(len(line[i]) for line in cells)) if cells
              else len(c) for i, c in enumerate(columns)]
    out.write("  ".join(c.ljust(w) for c, w in zip(columns, widths)) + "\n")
    for line in cells:
        out.write("  ".join(v.ljust(w) for v, w in zip(line, widths)) + "\n")


def _parse_floats(text: str, expect: int, what: str) -> List[float]:
    parts = [p for p in text.replace(" ", "").split(",") if p]
    if len(parts) != expect:
        raise ConfigError(f"{what} needs {expect} comma-separated values, "
                          f"got {len(parts)}")
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"{what}: {exc}") from exc


# --- fk / ik -------------------------------------------------------------------

def cmd_fk(args) -> int:
    g = load_hand_geometry(_resolve(args.config, args.hand))
    fg = g.digits[args.digit]
    vals = _parse_floats(args.d, 3, "--d")
    if args.digit == "thumb":
        d = ThumbActuatorState(*vals)
        q = thumb_fk(d, fg)
        res = thumb_transmission_residuals(q, d, fg)
    else:
        d = ActuatorState(*vals)
        q = finger_fk(d, fg)
        res = transmission_residuals(q, d, fg)
    row = {"digit": args.digit,
           "q_spread_rad": q.spread, "q_mcp_rad": q.mcp_flex,
           "q_pip_rad": q.pip_flex, "q_dip_rad": q.dip_flex,
           "residual_max": max(abs(v) for v in res.values())}
    _emit([row], list(row), args.format)
    return EXIT_OK


def cmd_ik(args) -> int:
    g = load_hand_geometry(_resolve(args.config, args.hand))
    fg = g.digits[args.digit]
    vals = _parse_floats(args.q, 4, "--q")
    q = FingerJointState(*vals)
    if args.digit == "thumb":
        d = thumb_ik(q, fg)
        res = thumb_transmission_residuals(thumb_fk(d, fg), d, fg)
        row = {"digit": args.digit, "abduction_rad": d.abduction,
               "flex_m": d.flex, "pip_m": d.pip}
    else:
        d = finger_ik(q, fg)
        res = transmission_residuals(finger_fk(d, fg), d, fg)
        row = {"digit": args.digit, "mcp_a_m": d.mcp_a, "mcp_b_m": d.mcp_b,
               "pip_m": d.pip}
    row["residual_max"] = max(abs(v) for v in res.values())
    _emit([row], list(row), args.format)
    return EXIT_OK


# --- replay --------------------------------------------------------------------

def cmd_replay(args) -> int:
    session = load_session_config(_resolve(args.config, args.session))
    if args.workers is not None:
        session.workers = args.workers
    log = run_replay(session)
    out_path = _resolve(args.config, args.out)
    write_command_log(log, out_path)
    if not log.rows:
        print(f"empty stream: wrote empty log to {out_path}")
        return EXIT_OK
    report = latency_report(log)
    if args.format == "json-lines":
        rows = [{"stage": name, "median_us": s.median_us, "p99_us": s.p99_us}
                for name, s in report.stages.items()]
        rows.append({"stage": "hand_tick", "p99_us": report.hand_tick_p99_us,
                     "within_budget": report.hand_within_budget})
        rows.append({"stage": "arm_tick", "p99_us": report.arm_p99_us,
                     "within_budget": report.arm_within_budget})
        for row in rows:
            print(json.dumps(row))
    elif args.format == "csv":
        rows = [{"stage": name, "median_us": s.median_us, "p99_us": s.p99_us}
                for name, s in report.stages.items()]
        _emit(rows, ["stage", "median_us", "p99_us"], "csv")
    else:
        print(f"{len(log.rows)} rows -> {out_path}")
        print(report.render())
    return EXIT_OK


# --- distances -----------------------------------------------------------------

def _parse_pairs(text: str) -> List[tuple]:
    pairs = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        parts = item.split("-")
        if len(parts) != 2 or not all(p in DIGITS for p in parts):
            raise UnknownPair(f"unknown fingertip pair '{item}' "
                              f"(digits: {', '.join(DIGITS)})")
        pairs.append((parts[0], parts[1]))
    if not pairs:
        raise UnknownPair("no fingertip pairs given")
    return pairs


def cmd_distances(args) -> int:
    session = load_session_config(_resolve(args.config, args.session))
    pairs = _parse_pairs(args.pairs)
    g = load_hand_geometry(session.resolve("hand_geometry"))
    log = parse_command_log(_resolve(args.config, args.log))
    glove = parse_glove_stream(session.resolve("glove_stream"))
    glove_times = [rec.timestamp_s for rec in glove]

    import bisect
    rows = []
    for r in log.rows:
        pts = hand_fk(HandJointState.from_array(r.joints_rad), g)
        idx = max(bisect.bisect_right(glove_times, r.timestamp_s) - 1, 0)
        human = glove[idx].to_frame().positions
        row: Dict[str, object] = {"t_s": r.timestamp_s}
        for a, b in pairs:
            row[f"human_{a}_{b}_m"] = float(np.linalg.norm(
                human[f"{a}_tip"] - human[f"{b}_tip"]))
            row[f"robot_{a}_{b}_m"] = float(np.linalg.norm(
                pts[f"{a}_tip"] - pts[f"{b}_tip"]))
        rows.append(row)
    columns = ["t_s"] + [f"{side}_{a}_{b}_m" for a, b in pairs
                         for side in ("human", "robot")]
    fmt = "csv" if args.format == "text" else args.format
    if args.out:
        out_path = _resolve(args.config, args.out)
        with open(out_path, "w", encoding="ascii") as fh:
            _emit(rows, columns, fmt, out=fh)
        print(f"{len(rows)} rows -> {out_path}")
    else:
        _emit(rows, columns, fmt)
    return EXIT_OK


# --- bench ---------------------------------------------------------------------

def _percentiles(samples_us: List[float]) -> Dict[str, float]:
    arr = np.asarray(samples_us, dtype=float)
    return {"median_us": float(np.median(arr)),
            "p99_us": float(np.percentile(arr, 99.0))}


def _feasible_joint_path(g, digit: str, steps: int,
                         rng: np.random.Generator) -> List[FingerJointState]:
    """Smooth clamped joint path for warm-start benchmarking."""
    fg = g.digits[digit]
    idx = DIGITS.index(digit)
    lo, hi = fg.q_lower, fg.q_upper
    # random low-frequency sweep through the joint box, clamped per tick
    phases = rng.uniform(0.0, 2.0 * math.pi, size=4)
    rates = rng.uniform(0.5, 1.5, size=4)
    path = []
    for k in range(steps):
        s = k / max(steps - 1, 1)
        u = 0.5 + 0.5 * np.sin(2.0 * math.pi * rates * s + phases)
        q_digit = lo + u * (hi - lo)
        q_full = np.zeros(20)
        q_full[4 * idx:4 * idx + 4] = q_digit
        clamped = clamp_command(HandJointState.from_array(q_full), g)
        path.append(clamped.digits[digit])
    return path


def cmd_bench(args) -> int:
    g = load_hand_geometry(_resolve(args.config, args.hand))
    rng = np.random.default_rng(args.seed)
    iters = args.iterations
    report: Dict[str, Dict[str, Dict[str, float]]] = {}

    fg = g.digits["index"]

    # finger IK then FK along a smooth path: warm uses the previous output
    path = _feasible_joint_path(g, "index", iters + 1, rng)
    acts = []
    for q in path:
        try:
            acts.append(finger_ik(q, fg))
        except (NoConvergence, TravelExceeded):
            acts.append(acts[-1] if acts else ActuatorState(0.0, 0.0, 0.0))
    warm_fk, warm_ik, cold_fk, cold_ik = [], [], [], []
    q_prev: Optional[FingerJointState] = None
    d_prev: Optional[ActuatorState] = None
    for k in range(1, len(path)):
        began = time.perf_counter_ns()
        q_sol = finger_fk(acts[k], fg, warm=q_prev)
        warm_fk.append((time.perf_counter_ns() - began) / 1000.0)
        q_prev = q_sol
        began = time.perf_counter_ns()
        d_sol = finger_ik(path[k], fg, warm=d_prev)
        warm_ik.append((time.perf_counter_ns() - began) / 1000.0)
        d_prev = d_sol
        began = time.perf_counter_ns()
        finger_fk(acts[k], fg)
        cold_fk.append((time.perf_counter_ns() - began) / 1000.0)
        began = time.perf_counter_ns()
        finger_ik(path[k], fg)
        cold_ik.append((time.perf_counter_ns() - began) / 1000.0)
    report["finger_fk"] = {"warm": _percentiles(warm_fk),
                           "cold": _percentiles(cold_fk)}
    report["finger_ik"] = {"warm": _percentiles(warm_ik),
                           "cold": _percentiles(cold_ik)}

    # full-hand transmission IK tick (15 actuators)
    hand_ticks = max(iters // 2, 50)
    paths = {d: _feasible_joint_path(g, d, hand_ticks + 1, rng)
             for d in DIGITS}
    warm_tick = []
    warm_map = None
    for k in range(1, hand_ticks + 1):
        q_full = HandJointState({d: paths[d][k] for d in DIGITS})
        began = time.perf_counter_ns()
        warm_map = hand_ik(q_full, g, warm=warm_map)
        warm_tick.append((time.perf_counter_ns() - began) / 1000.0)
    report["hand_ik_tick"] = {"warm": _percentiles(warm_tick)}

    # one retargeting command step on self-consistent frames
    retarget_iters = min(max(iters // 10, 10), 60)
    if args.retarget:
        cfg, spec = load_retarget_config(_resolve(args.config, args.retarget))
    else:
        cfg = RetargetConfig.for_hand(g)
        spec = default_keyvector_spec()
    state = RetargetState()
    samples = []
    hand_path = {d: _feasible_joint_path(g, d, retarget_iters + 1, rng)
                 for d in DIGITS}
    for k in range(retarget_iters):
        q_full = HandJointState({d: hand_path[d][k] for d in DIGITS})
        pts = hand_fk(q_full, g)
        positions = {}
        for label in LANDMARK_LABELS:
            digit, part = label.rsplit("_", 1)
            positions[label] = (g.mounts[digit][1].copy() if part == "cmc"
                                else pts[f"{digit}_{part}"].copy())
        frame = HumanHandFrame(k * 0.01, positions)
        began = time.perf_counter_ns()
        try:
            retarget_step(frame, spec, cfg, state, g)
        except NoConvergence:
            continue
        samples.append((time.perf_counter_ns() - began) / 1000.0)
    report["retarget_step"] = {"warm": _percentiles(samples)}

    # arm QP on random instances
    model = reference_arm_model()
    arm_cfg = ArmIKConfig()
    qp = []
    for _ in range(iters):
        q = rng.uniform(model.q_lower, model.q_upper)
        state_arm = ArmState(q, rng.uniform(-0.5, 0.5, 7))
        jac = tool_jacobian(q, model)
        dx = rng.uniform(-0.05, 0.05, 6)
        ja = rng.uniform(-1.0, 1.0, (1, 7))
        da = rng.uniform(-0.5, 0.5)
        bounds = velocity_bounds(q, model, arm_cfg)
        began = time.perf_counter_ns()
        solve_arm_qp(jac, dx, ja, da, state_arm, bounds, arm_cfg)
        qp.append((time.perf_counter_ns() - began) / 1000.0)
    report["arm_qp"] = {"warm": _percentiles(qp)}

    rows = []
    for stage, modes in report.items():
        for mode, stats in modes.items():
            rows.append({"stage": stage, "mode": mode,
                         "median_us": stats["median_us"],
                         "p99_us": stats["p99_us"]})
    _emit(rows, ["stage", "mode", "median_us", "p99_us"], args.format)
    return EXIT_OK


# --- geometry validation ---------------------------------------------------------

def cmd_validate_geometry(args) -> int:
    g = load_hand_geometry(_resolve(args.config, args.hand))
    rows = []
    for digit in DIGITS:
        residuals = g.digits[digit].validate(tol=args.tol)
        for chain, value in residuals.items():
            rows.append({"digit": digit, "chain": chain, "residual": value})
    _emit(rows, ["digit", "chain", "residual"], args.format)
    return EXIT_OK


# --- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="linkhand", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    def common(p):
        p.add_argument("--config", default=".",
                       help="root for relative paths (default: cwd)")
        p.add_argument("--format", choices=FORMATS, default="text")

    p = sub.add_parser("fk", help="joint angles from actuator displacements")
    common(p)
    p.add_argument("--hand", required=True, help="hand geometry config")
    p.add_argument("--digit", choices=DIGITS, default="index")
    p.add_argument("--d", required=True,
                   help="three actuator values, comma separated "
                        "(thumb: abduction_rad,flex_m,pip_m; "
                        "fingers: mcp_a_m,mcp_b_m,pip_m)")
    p.set_defaults(run=cmd_fk)

    p = sub.add_parser("ik", help="actuator displacements from joint angles")
    common(p)
    p.add_argument("--hand", required=True)
    p.add_argument("--digit", choices=DIGITS, default="index")
    p.add_argument("--q", required=True,
                   help="four joint angles rad: spread,mcp,pip,dip")
    p.set_defaults(run=cmd_ik)

    p = sub.add_parser("replay", help="replay a recorded session to a log")
    common(p)
    p.add_argument("--session", required=True, help="session config")
    p.add_argument("--out", required=True, help="command log output path")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(run=cmd_replay)

    p = sub.add_parser("distances",
                       help="fingertip distance CSV from a replay log")
    common(p)
    p.add_argument("--session", required=True)
    p.add_argument("--log", required=True, help="command log from replay")
    p.add_argument("--pairs", default="thumb-index,thumb-middle",
                   help="digit pairs, e.g. thumb-index,thumb-middle")
    p.add_argument("--out", default=None, help="output path (default stdout)")
    p.set_defaults(run=cmd_distances)

    p = sub.add_parser("bench", help="solver latency distributions")
    common(p)
    p.add_argument("--hand", required=True)
    p.add_argument("--retarget", default=None, help="retarget config")
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(run=cmd_bench)

    p = sub.add_parser("validate-geometry",
                       help="rest-configuration residuals of every chain")
    common(p)
    p.add_argument("--hand", required=True)
    p.add_argument("--tol", type=float, default=1e-12)
    p.set_defaults(run=cmd_validate_geometry)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.run(args)
    except (OutOfTravel, TravelExceeded) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OUT_OF_TRAVEL
    except NoConvergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    except UnknownPair as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, VersionError, IoError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
