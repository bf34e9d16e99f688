"""Per-frame pipeline: odometry guess, plane processing, association, pose solve, mapping.

Ground-truth labels from the simulator stay in this module's bookkeeping
(``_Truth``) and are never handed to the algorithm stages.
"""

from __future__ import annotations

import logging
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .association import AssociationConfig, associate_planes, associate_point_plane
from .exceptions import ConfigError, PlaneSlamError
from .factors import (FactorConfig, PoseProblem, SolverSettings, build_problem,
                      factor_counts, optimize, pose_point)
from .geometry import CameraIntrinsics, RigidTransform, point_plane_distance
from .io import (dataclass_from_dict, dump_json, read_toml, write_map_json,
                 write_map_ply, write_tum_trajectory)
from .mapping import MapConfig, PlaneMap, export_map, fuse_landmarks, insert_or_update
from .processing import (ProcessingConfig, Quality, process_observation,
                         select_planes)
from .sim import (DEFAULT_INTRINSICS, NoiseSpec, TrajectorySpec, evaluate_ate,
                  generate_scene, preset_scene, render_frame, trajectory)

log = logging.getLogger(__name__)

STAGES = ("render", "process", "associate", "optimize", "map", "fuse")


@dataclass
class SceneConfig:
    preset: str = "ambiguous-desk"
    book_height: float = 0.02
    map_point_density: float = 300.0


@dataclass
class OdometryConfig:
    mode: str = "gt-noise"
    sigma_t: float = 0.005
    sigma_r_deg: float = 0.3

    def __post_init__(self):
        if self.mode not in ("gt-noise", "const-velocity"):
            raise ValueError(f"odometry mode must be gt-noise or const-velocity, got {self.mode!r}")
        if self.sigma_t < 0 or self.sigma_r_deg < 0:
            raise ValueError("odometry sigmas must be non-negative")


@dataclass
class OutputConfig:
    trajectory: str = "trajectory.txt"
    groundtruth: str = "groundtruth.txt"
    map_json: str = "map.json"
    map_ply: str = "map.ply"
    report: str = "report.json"
    timing: str = "timing.json"


@dataclass
class PipelineConfig:
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    odometry: OdometryConfig = field(default_factory=OdometryConfig)
    intrinsics: CameraIntrinsics = field(default_factory=lambda: DEFAULT_INTRINSICS)
    processing: ProcessingConfig = field(default_factory=ProcessingConfig)
    association: AssociationConfig = field(default_factory=AssociationConfig)
    factors: FactorConfig = field(default_factory=FactorConfig)
    solver: SolverSettings = field(default_factory=SolverSettings)
    mapping: MapConfig = field(default_factory=MapConfig)
    unstructured_classes: list = field(default_factory=lambda: [3])
    output: OutputConfig = field(default_factory=OutputConfig)


def load_config(path) -> PipelineConfig:
    """Read a TOML config; unknown keys raise ``ConfigError`` naming the key path."""
    return config_from_dict(read_toml(path))


def config_from_dict(data: dict) -> PipelineConfig:
    cfg = dataclass_from_dict(PipelineConfig, data)
    if any(not isinstance(c, int) for c in cfg.unstructured_classes):
        raise ConfigError("unstructured_classes: expected integers")
    return cfg


@dataclass
class FrameRecord:
    frame: int
    timestamp: float
    skipped: bool
    error: str
    observations: int
    matches: int
    correct: int
    positives: int
    precision: float
    recall: float
    trans_error: float
    rot_error_deg: float
    landmarks: int
    factors: dict


@dataclass
class RunReport:
    frames: list = field(default_factory=list)
    ate_rmse: Optional[float] = None
    ate_std: Optional[float] = None
    precision: float = 1.0
    recall: float = 1.0
    final_landmarks: int = 0
    true_planes: int = 0
    wrong_fusions: int = 0
    contaminated_landmarks: int = 0
    duplicate_landmarks: int = 0
    fusions: int = 0
    skipped: int = 0
    timing: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Deterministic part of the report (timing is kept apart)."""
        out = asdict(self)
        out.pop("timing")
        return out

    @property
    def landmark_counts(self):
        return [f.landmarks for f in self.frames]


class _Truth:
    """Evaluation-only ledger of which true plane each landmark has absorbed."""

    def __init__(self):
        self.support = {}
        self.wrong_fusions = 0

    def label(self, lid):
        sup = self.support.get(lid)
        if not sup:
            return None
        return min(sup.items(), key=lambda kv: (-kv[1], kv[0]))[0]

    def add(self, lid, label):
        self.support.setdefault(lid, Counter())[label] += 1

    def fuse(self, kept, removed):
        if self.label(kept) != self.label(removed):
            self.wrong_fusions += 1
        self.support.setdefault(kept, Counter()).update(self.support.pop(removed, Counter()))


def _odometry_noise(rng, cfg: OdometryConfig) -> RigidTransform:
    xi = np.concatenate([rng.normal(0.0, np.radians(cfg.sigma_r_deg), 3),
                         rng.normal(0.0, cfg.sigma_t, 3)])
    return RigidTransform.exp(xi)


def _initial_pose(k, gt, est, rng, cfg: OdometryConfig) -> RigidTransform:
    if k == 0:
        return _odometry_noise(rng, cfg) @ gt[0]
    if cfg.mode == "gt-noise":
        delta = gt[k] @ gt[k - 1].inverse()
        return _odometry_noise(rng, cfg) @ delta @ est[k - 1]
    if k == 1:
        return est[0]
    return est[k - 1] @ est[k - 2].inverse() @ est[k - 1]


def _point_plane_pairs(frame, T_cw, K, dist_max):
    """Each map point goes to the nearest plane that accepts it."""
    pairs = []
    for pid, _, p_w in frame.point_observations:
        best = None
        for i, obs in enumerate(frame.observations):
            if associate_point_plane(p_w, obs, T_cw, K, dist_max):
                dist = abs(point_plane_distance(T_cw.apply(p_w), obs.plane))
                if best is None or dist < best[0]:
                    best = (dist, i)
        if best is not None:
            pairs.append((pid, best[1]))
    return pairs


def _track(frame, T_init, K, cfg: PipelineConfig) -> RigidTransform:
    """Refine the odometry guess on map-point reprojections alone."""
    f = cfg.factors
    factors = [pose_point(uv, p_w, f.w_point, f.delta_point)
               for _, uv, p_w in frame.point_observations]
    if not factors:
        return T_init
    return optimize(PoseProblem(T_init, factors, cfg.solver), K).T_cw


def run_pipeline(cfg: PipelineConfig, out_dir=None, on_association=None,
                 stop_after: Optional[int] = None) -> RunReport:
    """Run the full simulated pipeline; writes artifacts when ``out_dir`` is given.

    ``on_association(k, frame, result)`` is called after each frame's plane
    association, before the pose solve. ``stop_after`` ends the run after
    that frame index.
    """
    K = cfg.intrinsics
    spec = preset_scene(cfg.scene.preset, cfg.scene.book_height, cfg.seed)
    spec.map_point_density = cfg.scene.map_point_density
    scene = generate_scene(spec)
    poses = trajectory(cfg.trajectory)
    if stop_after is not None:
        poses = poses[:stop_after + 1]
    gt = [T for _, T in poses]
    unstructured = set(cfg.unstructured_classes)

    map_ = PlaneMap(cfg.mapping)
    truth = _Truth()
    report = RunReport(true_planes=len(scene.planes))
    timing = {s: 0.0 for s in STAGES}
    est = []
    total_correct = total_matches = total_pos = 0

    for k, (stamp, T_gt) in enumerate(poses):
        rng = np.random.default_rng([cfg.seed, k])
        T_init = _initial_pose(k, gt, est, rng, cfg.odometry)
        t0 = time.perf_counter()
        try:
            frame, labels = render_frame(scene, T_gt, K, cfg.noise,
                                         rng_seed=int(rng.integers(2**31)),
                                         frame_id=k, timestamp=stamp)
        except PlaneSlamError as err:
            log.warning("frame %d skipped: %s", k, err)
            est.append(T_init)
            report.frames.append(_skip_record(k, stamp, err, T_init, T_gt, len(map_)))
            continue
        timing["render"] += time.perf_counter() - t0
        try:
            t0 = time.perf_counter()
            T_track = _track(frame, T_init, K, cfg)
            frame.T_cw = T_track
            timing["optimize"] += time.perf_counter() - t0

            t0 = time.perf_counter()
            processed = [process_observation(o, frame.boxes, K, cfg.processing, rng_seed=k)
                         for o in frame.observations]
            selected = select_planes(processed, K, frame.boxes, cfg.processing, unstructured)
            keep = [i for i, o in enumerate(selected) if o.quality == Quality.GOOD]
            frame.observations = [selected[i] for i in keep]
            obs_labels = [labels.obs_labels[i] for i in keep]
            frame.point_plane = _point_plane_pairs(frame, T_track, K,
                                                   cfg.association.point_plane_dist_max)
            timing["process"] += time.perf_counter() - t0

            t0 = time.perf_counter()
            coords = {pid: p_w for pid, _, p_w in frame.point_observations}
            obs_points = [np.array([coords[p] for p, j in frame.point_plane if j == i]
                                   ).reshape(-1, 3) for i in range(len(frame.observations))]
            result = associate_planes(frame.observations, list(map_.landmarks.values()),
                                      T_track, K, cfg.association, obs_points,
                                      map_.landmark_points())
            if cfg.noise.association_withhold > 0:
                result.matches = [m for m in result.matches
                                  if rng.random() >= cfg.noise.association_withhold]
            frame.matches = result
            timing["associate"] += time.perf_counter() - t0
            if on_association is not None:
                on_association(k, frame, result)

            t0 = time.perf_counter()
            problem = build_problem(frame, result, map_.landmarks, K, cfg.factors, cfg.solver)
            frame.T_cw = optimize(problem, K).T_cw
            timing["optimize"] += time.perf_counter() - t0
        except PlaneSlamError as err:
            log.warning("frame %d skipped: %s", k, err)
            est.append(T_init)
            report.frames.append(_skip_record(k, stamp, err, T_init, T_gt, len(map_)))
            continue

        # evaluation only: score matches against the labels
        present = {truth.label(lid) for lid in map_.landmarks}
        correct = sum(1 for m in result.matches
                      if obs_labels[m.obs_index] == truth.label(m.landmark_id))
        positives = sum(1 for lab in obs_labels if lab in present)
        total_correct += correct
        total_matches += len(result.matches)
        total_pos += positives

        t0 = time.perf_counter()
        insert_or_update(map_, frame, result, K, cfg.processing)
        timing["map"] += time.perf_counter() - t0
        for m in result.matches:
            truth.add(m.landmark_id, obs_labels[m.obs_index])
        for i, lid in map_.last_created.items():
            truth.add(lid, obs_labels[i])

        if cfg.mapping.fuse_every > 0 and (k + 1) % cfg.mapping.fuse_every == 0:
            t0 = time.perf_counter()
            for kept, removed in fuse_landmarks(map_, cfg.association):
                truth.fuse(kept, removed)
                report.fusions += 1
            timing["fuse"] += time.perf_counter() - t0

        est.append(frame.T_cw)
        terr, rerr = _pose_error(frame.T_cw, T_gt)
        report.frames.append(FrameRecord(
            k, stamp, False, "", len(frame.observations), len(result.matches), correct,
            positives, correct / len(result.matches) if result.matches else 1.0,
            min(correct, positives) / positives if positives else 1.0,
            terr, rerr, len(map_), factor_counts(problem.factors)))

    report.precision = total_correct / total_matches if total_matches else 1.0
    report.recall = min(total_correct, total_pos) / total_pos if total_pos else 1.0
    report.final_landmarks = len(map_)
    report.skipped = sum(1 for f in report.frames if f.skipped)
    report.wrong_fusions = truth.wrong_fusions
    report.contaminated_landmarks = sum(
        1 for lid in map_.landmarks if len(truth.support.get(lid, ())) > 1)
    labels_alive = [truth.label(lid) for lid in map_.landmarks]
    report.duplicate_landmarks = len(labels_alive) - len(set(labels_alive))
    if len(est) >= 2:
        traj_est = [(t, T.inverse()) for (t, _), T in zip(poses, est)]
        traj_gt = [(t, T.inverse()) for t, T in poses]
        rmse, std, _ = evaluate_ate(traj_est, traj_gt)
        report.ate_rmse, report.ate_std = rmse, std
    n = max(len(poses), 1)
    report.timing = {s: timing[s] / n for s in STAGES}

    if out_dir is not None:
        write_outputs(cfg, report, poses, est, map_, out_dir)
    return report


def _pose_error(T_est: RigidTransform, T_gt: RigidTransform):
    trans = float(np.linalg.norm(T_est.center() - T_gt.center()))
    R = T_est.rotation @ T_gt.rotation.T
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    return trans, float(np.degrees(np.arccos(c)))


def _skip_record(k, stamp, err, T_est, T_gt, n_landmarks):
    terr, rerr = _pose_error(T_est, T_gt)
    return FrameRecord(k, stamp, True, f"{type(err).__name__}: {err}", 0, 0, 0, 0,
                       1.0, 1.0, terr, rerr, n_landmarks, {})


def write_outputs(cfg: PipelineConfig, report: RunReport, poses, est, map_, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    o = cfg.output
    write_tum_trajectory([(t, T.inverse()) for (t, _), T in zip(poses, est)],
                         out / o.trajectory)
    write_tum_trajectory([(t, T.inverse()) for t, T in poses], out / o.groundtruth)
    snapshot = export_map(map_)
    write_map_json(snapshot, out / o.map_json)
    write_map_ply(snapshot, out / o.map_ply)
    dump_json(_rounded(report.to_dict()), out / o.report)
    dump_json({"seconds_per_frame": report.timing}, out / o.timing)


def _rounded(obj, digits=12):
    """Round floats so report files do not depend on last-bit noise in formatting."""
    if isinstance(obj, float):
        return round(obj, digits)
    if isinstance(obj, dict):
        return {k: _rounded(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_rounded(v, digits) for v in obj]
    return obj


__all__ = ["PipelineConfig", "SceneConfig", "OdometryConfig", "OutputConfig",
           "RunReport", "FrameRecord", "load_config", "config_from_dict",
           "run_pipeline", "write_outputs"]
