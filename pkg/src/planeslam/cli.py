"""Command-line entry point: ``planeslam <subcommand> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .audit import jacobian_audit
from .exceptions import ConfigError, PlaneSlamError
from .factors import optimize
from .geometry import CameraIntrinsics
from .io import dump_json, read_problem, read_tum_trajectory, write_tum_trajectory
from .pipeline import PipelineConfig, load_config, run_pipeline
from .sim import evaluate_ate, generate_scene, preset_scene, render_frame, trajectory

JACOBIAN_TOL = 1e-5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _global_flags() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="TOML config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="planeslam", parents=[common],
                     description="Plane SLAM toolkit for planar-ambiguous scenes.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    sub.add_parser("simulate", parents=[common], help="write a simulated scene and frames")

    p = sub.add_parser("run", parents=[common], help="run the full pipeline")
    p.add_argument("--odom", choices=["gt-noise", "const-velocity"])
    p.add_argument("--association-mode", choices=["integrated", "params-only"])
    p.add_argument("--frames", type=int)

    p = sub.add_parser("associate", parents=[common], help="associate planes of one frame")
    p.add_argument("--frame", type=int, default=1, help="frame index (map built from the earlier frames)")
    p.add_argument("--trace", action="store_true", help="print every gate decision")

    p = sub.add_parser("optimize", parents=[common], help="solve a serialized pose problem")
    p.add_argument("problem", help="pose problem JSON file")
    p.add_argument("--log", action="store_true", help="print the per-iteration log")

    p = sub.add_parser("evaluate", parents=[common], help="ATE between two TUM trajectories")
    p.add_argument("estimated")
    p.add_argument("groundtruth")
    p.add_argument("--max-dt", type=float, default=0.02)

    p = sub.add_parser("check-jacobians", parents=[common], help="finite-difference Jacobian audit")
    p.add_argument("--instances", type=int, default=100)
    return parser


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _out_dir(args, default="out") -> Path:
    return Path(getattr(args, "out", None) or default)


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    frames_dir = out / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    spec = preset_scene(cfg.scene.preset, cfg.scene.book_height, cfg.seed)
    spec.map_point_density = cfg.scene.map_point_density
    scene = generate_scene(spec)
    dump_json({"planes": [{"label": p.label, "class_id": p.class_id,
                           "n": p.plane.n.tolist(), "d": p.plane.d,
                           "vertices": p.corners.tolist()} for p in scene.planes],
               "objects": [dataclasses.asdict(o) for o in scene.objects],
               "map_points": scene.map_points.tolist(),
               "point_labels": scene.point_labels.tolist()}, out / "scene.json")
    poses = trajectory(cfg.trajectory)
    written = 0
    for k, (t, T) in enumerate(poses):
        try:
            frame, truth = render_frame(scene, T, cfg.intrinsics, cfg.noise,
                                        rng_seed=int(np.random.default_rng([cfg.seed, k]).integers(2**31)),
                                        frame_id=k, timestamp=t)
        except PlaneSlamError as err:
            logging.warning("frame %d not written: %s", k, err)
            continue
        arrays = {"timestamp": np.array(t), "T_cw_gt": T.matrix(),
                  "plane_labels": np.array(truth.obs_labels),
                  "boxes": np.array([[*b.box.as_array(), b.class_id, b.score]
                                     for b in frame.boxes]).reshape(-1, 6),
                  "points": np.array([[pid, *uv, *p] for pid, uv, p in
                                      frame.point_observations]).reshape(-1, 6)}
        for i, obs in enumerate(frame.observations):
            arrays[f"cloud_{i}"] = obs.cloud
            arrays[f"edges_{i}"] = obs.edge_points
        np.savez_compressed(frames_dir / f"frame_{k:04d}.npz", **arrays)
        written += 1
    write_tum_trajectory([(t, T.inverse()) for t, T in poses], out / "groundtruth.txt")
    print(f"wrote {len(scene.planes)} planes and {written} frames to {out}")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    if args.odom:
        cfg.odometry.mode = args.odom
    if args.association_mode:
        cfg.association.mode = args.association_mode
    if args.frames is not None:
        cfg.trajectory.frames = args.frames
    report = run_pipeline(cfg, _out_dir(args))
    ate = "n/a" if report.ate_rmse is None else f"{report.ate_rmse:.6f}"
    print(f"frames {len(report.frames)} skipped {report.skipped}")
    print(f"precision {report.precision:.4f} recall {report.recall:.4f}")
    print(f"landmarks {report.final_landmarks} (true planes {report.true_planes})")
    print(f"ate_rmse {ate}")
    return 0


def cmd_associate(args) -> int:
    cfg = _config(args)
    if args.frame < 0:
        raise UsageError("--frame must be non-negative")
    if args.frame >= cfg.trajectory.frames:
        raise UsageError(f"--frame must be below the trajectory length {cfg.trajectory.frames}")
    captured = {}

    def grab(k, frame, result):
        if k == args.frame:
            captured["result"] = result

    run_pipeline(cfg, on_association=grab, stop_after=args.frame)
    result = captured.get("result")
    if result is None:
        print(f"frame {args.frame} was skipped", file=sys.stderr)
        return 1
    if args.trace:
        for line in result.trace_lines():
            print(line)
    for m in result.matches:
        print(f"match obs={m.obs_index} lm={m.landmark_id} score={m.score:.4f}")
    print(f"unmatched {' '.join(map(str, result.unmatched_frame)) or '-'}")
    return 0


def cmd_optimize(args) -> int:
    problem, intr = read_problem(args.problem)
    if intr is not None:
        K = CameraIntrinsics(**intr)
    else:
        K = _config(args).intrinsics
    result = optimize(problem, K)
    if args.log:
        print("iter lambda cost step_norm")
        for line in result.log:
            print(line)
    q = result.T_cw.quaternion()
    print("T_cw t " + " ".join(f"{v:.9f}" for v in result.T_cw.translation))
    print("T_cw q " + " ".join(f"{v:.9f}" for v in q))
    print(f"cost {result.final_cost:.6e} iterations {result.iterations} converged {result.converged}")
    if getattr(args, "out", None):
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        dump_json({"R": result.T_cw.rotation.tolist(), "t": result.T_cw.translation.tolist(),
                   "cost": result.final_cost, "iterations": result.iterations,
                   "converged": result.converged}, out / "solution.json")
    return 0


def cmd_evaluate(args) -> int:
    est = read_tum_trajectory(args.estimated)
    gt = read_tum_trajectory(args.groundtruth)
    rmse, std, errors = evaluate_ate(est, gt, args.max_dt)
    print(f"pairs {len(errors)}")
    print(f"rmse {rmse:.6f}")
    print(f"stddev {std:.6f}")
    return 0


def cmd_check_jacobians(args) -> int:
    worst, seconds = jacobian_audit(args.instances, getattr(args, "seed", 0))
    ok = True
    for kind, err in worst.items():
        passed = err < JACOBIAN_TOL
        ok &= passed
        print(f"{kind:<20s} max_rel_error {err:.3e} {'ok' if passed else 'FAIL'}")
    print(f"{args.instances} instances per kind in {seconds:.2f} s")
    return 0 if ok else 1


COMMANDS = {"simulate": cmd_simulate, "run": cmd_run, "associate": cmd_associate,
            "optimize": cmd_optimize, "evaluate": cmd_evaluate,
            "check-jacobians": cmd_check_jacobians}

USER_ERRORS = (UsageError, ConfigError, PlaneSlamError, FileNotFoundError,
               IsADirectoryError, PermissionError, json.JSONDecodeError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"planeslam: error: {err}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except USER_ERRORS as err:
        print(f"planeslam: error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - reported as an internal error
        logging.getLogger(__name__).exception("internal error")
        print(f"planeslam: internal error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
