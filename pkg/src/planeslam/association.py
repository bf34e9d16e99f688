"""Plane data association: geometric gates, semantics, IoU and the rank test."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import InsufficientSamples, NotVisible
from .geometry import (CameraIntrinsics, PixelBox, Plane, RigidTransform,
                       as_points, box_iou, point_plane_distance, project_points)
from .processing import PlaneObservation

NP_MEANS = ("u_mean", "rank_sum_mean")
MODES = ("integrated", "params-only")


@dataclass
class AssociationConfig:
    beta_T: float = math.radians(10.0)
    d_T: float = 0.05
    d_T_prime: float = 0.02
    R_T: float = 0.8
    iou_assoc_min: float = 0.3
    alpha: float = 0.05
    z_crit: float = 1.96
    np_min_samples: int = 10
    np_mean: str = "u_mean"
    mode: str = "integrated"
    point_plane_dist_max: float = 0.01

    def __post_init__(self):
        for name in ("beta_T", "d_T", "d_T_prime", "R_T", "iou_assoc_min",
                     "z_crit", "np_min_samples", "point_plane_dist_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.R_T <= 1.0:
            raise ValueError("R_T must lie in (0, 1]")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.np_mean not in NP_MEANS:
            raise ValueError(f"np_mean must be one of {NP_MEANS}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


# --- geometric gates -------------------------------------------------------

def normal_angle(pi_c: Plane, pi_w: Plane, T_cw: RigidTransform) -> float:
    n_cw = T_cw.rotation.T @ pi_c.n
    c = abs(float(n_cw @ pi_w.n)) / (np.linalg.norm(n_cw) * np.linalg.norm(pi_w.n))
    return math.acos(min(1.0, c))


def angle_gate(pi_c: Plane, pi_w: Plane, T_cw: RigidTransform, beta_T) -> bool:
    return normal_angle(pi_c, pi_w, T_cw) < beta_T


def offset_residual(pi_c: Plane, pi_w: Plane, T_cw: RigidTransform) -> float:
    n_c, d_c = pi_c.n, pi_c.d
    if (T_cw.rotation.T @ n_c) @ pi_w.n < 0:
        n_c, d_c = -n_c, -d_c
    return abs(float(T_cw.translation @ n_c + d_c - pi_w.d))


def offset_gate(pi_c: Plane, pi_w: Plane, T_cw: RigidTransform, d_T) -> bool:
    return offset_residual(pi_c, pi_w, T_cw) < d_T


def edge_point_gate(edge_points_c, pi_w: Plane, T_cw: RigidTransform,
                    d_T_prime, R_T):
    """``(passed, fraction)`` of camera-frame edge points close to ``pi_w``."""
    B = as_points(edge_points_c)
    if len(B) == 0:
        return False, 0.0
    p_w = (B - T_cw.translation) @ T_cw.rotation
    fraction = float(np.mean(np.abs(p_w @ pi_w.n + pi_w.d) < d_T_prime))
    return fraction > R_T, fraction


# --- rank test --------------------------------------------------------------

@dataclass(frozen=True)
class RankTestAxis:
    U_c: float
    U_w: float
    W: float
    mean: float
    variance: float
    z: float
    passed: bool


def midranks(values):
    """Ranks with ties replaced by their average; also returns tie-group sizes."""
    v = np.asarray(values, dtype=float).reshape(-1)
    _, inverse, counts = np.unique(v, return_inverse=True, return_counts=True)
    start = np.cumsum(counts) - counts
    return (start + (counts + 1) / 2.0)[inverse.reshape(-1)], counts


def mann_whitney_axis(xc, xw, z_crit=1.96, np_mean="u_mean") -> RankTestAxis:
    """One-dimensional two-sample rank test with tie-corrected variance."""
    xc = np.asarray(xc, dtype=float).reshape(-1)
    xw = np.asarray(xw, dtype=float).reshape(-1)
    I, J = len(xc), len(xw)
    if I == 0 or J == 0:
        raise InsufficientSamples("both samples must be non-empty")
    ranks, ties = midranks(np.concatenate([xc, xw]))
    U_c = float(ranks[:I].sum() - I * (I + 1) / 2.0)
    U_w = float(ranks[I:].sum() - J * (J + 1) / 2.0)
    assert abs(U_c + U_w - I * J) <= 1e-9 * max(1.0, I * J), "U_c + U_w != IJ"
    W = min(U_c, U_w)
    N = I + J
    if np_mean == "u_mean":
        mean = I * J / 2.0
    else:
        mean = I * (N + 1) / 2.0
    t = ties.astype(float)
    tie_term = (np.sum(t ** 3) - np.sum(t)) if N > 1 else 0.0
    variance = I * J * (N + 1) / 12.0
    if N > 1:
        variance -= I * J * tie_term / (12.0 * N * (N - 1))
    if variance <= 1e-12:
        return RankTestAxis(U_c, U_w, W, mean, variance, 0.0, True)
    z = abs(mean - W) / math.sqrt(variance)
    return RankTestAxis(U_c, U_w, W, mean, variance, z, z < z_crit)


def mann_whitney_gate(Mc, Mw, cfg: AssociationConfig):
    """Per-axis rank tests on two 3D point sets; all axes must pass.

    Returns ``(passed, [(W, z) for x, y, z])``.
    """
    Mc, Mw = as_points(Mc), as_points(Mw)
    if len(Mc) < cfg.np_min_samples or len(Mw) < cfg.np_min_samples:
        raise InsufficientSamples(
            f"sample sizes {len(Mc)}, {len(Mw)} below {cfg.np_min_samples}")
    axes = [mann_whitney_axis(Mc[:, a], Mw[:, a], cfg.z_crit, cfg.np_mean)
            for a in range(3)]
    return all(ax.passed for ax in axes), [(ax.W, ax.z) for ax in axes]


# --- projection boxes and point association --------------------------------

def landmark_anchor_points(lm) -> np.ndarray:
    st = getattr(lm, "structure", None)
    if st is not None and st.has_vertices:
        return np.asarray(st.vertices)
    if len(lm.edge_points):
        return as_points(lm.edge_points)
    return as_points(lm.cloud)


def project_landmark_box(lm, T_cw: RigidTransform, K: CameraIntrinsics) -> PixelBox:
    """Image box of the landmark's vertices (or edge points), clipped to the image."""
    pts = landmark_anchor_points(lm)
    if len(pts) == 0:
        raise NotVisible("landmark has no vertices or edge points")
    uv, front = project_points(T_cw.apply(pts), K)
    if not front.any():
        raise NotVisible("landmark is entirely behind the camera")
    return PixelBox.from_pixels(uv[front]).clip(K)


def associate_point_plane(p_w, obs: PlaneObservation, T_cw: RigidTransform,
                          K: CameraIntrinsics, dist_max) -> bool:
    p_c = T_cw.apply(np.asarray(p_w, dtype=float))
    if abs(point_plane_distance(p_c, obs.plane)) >= dist_max:
        return False
    if obs.class_id == -1:
        return True
    uv, front = project_points(p_c, K)
    return bool(front[0] and obs.det_box.contains(uv)[0])


# --- plane-plane association -----------------------------------------------

@dataclass
class GateTrace:
    obs_index: int
    landmark_id: int
    rule: str
    angle: float
    angle_ok: bool
    offset: Optional[float] = None
    offset_ok: Optional[bool] = None
    edge_fraction: Optional[float] = None
    edge_ok: Optional[bool] = None
    iou: Optional[float] = None
    iou_ok: Optional[bool] = None
    np_ok: Optional[bool] = None
    np_stats: Optional[list] = None
    candidate: bool = False
    score: float = 0.0
    matched: bool = False

    def to_line(self) -> str:
        def flag(v):
            return "-" if v is None else ("pass" if v else "fail")

        def num(v, fmt=".4f"):
            return "-" if v is None else format(v, fmt)

        parts = [f"obs={self.obs_index}", f"lm={self.landmark_id}",
                 f"rule={self.rule}",
                 f"angle={math.degrees(self.angle):.3f}deg:{flag(self.angle_ok)}",
                 f"offset={num(self.offset)}:{flag(self.offset_ok)}",
                 f"edge={num(self.edge_fraction, '.3f')}:{flag(self.edge_ok)}",
                 f"iou={num(self.iou, '.3f')}:{flag(self.iou_ok)}",
                 f"np={flag(self.np_ok)}"]
        if self.np_stats:
            parts.append("Wz=" + ",".join(f"{a}:{W:.1f}/{z:.3f}" for a, (W, z)
                                          in zip("xyz", self.np_stats)))
        parts.append(f"candidate={int(self.candidate)}")
        parts.append(f"matched={int(self.matched)}")
        return " ".join(parts)


@dataclass
class Match:
    obs_index: int
    landmark_id: int
    score: float


@dataclass
class AssociationResult:
    matches: list = field(default_factory=list)
    unmatched_frame: list = field(default_factory=list)
    traces: list = field(default_factory=list)

    def landmark_for(self, obs_index):
        for m in self.matches:
            if m.obs_index == obs_index:
                return m.landmark_id
        return None

    def trace_lines(self):
        return [t.to_line() for t in self.traces]


def _obs_box(obs: PlaneObservation, K):
    if obs.det_box is not None:
        return obs.det_box
    return obs.projected_box(K)


def _geometric(obs, lm, T_cw, cfg, tr):
    tr.offset = offset_residual(obs.plane, lm.plane, T_cw)
    tr.offset_ok = tr.offset < cfg.d_T
    tr.edge_ok, tr.edge_fraction = edge_point_gate(
        obs.edge_points, lm.plane, T_cw, cfg.d_T_prime, cfg.R_T)
    tr.score = tr.edge_fraction
    return tr.offset_ok or tr.edge_ok


def _iou(obs, lm, T_cw, K, cfg, tr):
    box = _obs_box(obs, K)
    try:
        lm_box = project_landmark_box(lm, T_cw, K)
    except NotVisible:
        lm_box = None
    tr.iou = 0.0 if box is None or lm_box is None else box_iou(lm_box, box)
    tr.iou_ok = tr.iou >= cfg.iou_assoc_min
    return tr.iou_ok


def evaluate_pair(i, obs, lm, T_cw, K, cfg, obs_points=None, lm_points=None):
    """Run the gate cascade for one (observation, landmark) pair."""
    tr = GateTrace(i, lm.id, "", normal_angle(obs.plane, lm.plane, T_cw), False)
    tr.angle_ok = tr.angle < cfg.beta_T
    c_obs, c_lm = obs.class_id, lm.class_id
    if cfg.mode == "params-only":
        tr.rule = "params-only"
    elif c_obs == -1 and c_lm == -1:
        tr.rule = "geometric"
    elif c_obs != -1 and c_lm != -1:
        tr.rule = "semantic"
    else:
        tr.rule = "mixed"
    if not tr.angle_ok:
        return tr

    if tr.rule in ("params-only", "geometric"):
        tr.candidate = _geometric(obs, lm, T_cw, cfg, tr)
    elif tr.rule == "mixed":
        geo = _geometric(obs, lm, T_cw, cfg, tr)
        tr.candidate = _iou(obs, lm, T_cw, K, cfg, tr) and geo
    else:
        if c_obs != c_lm or not _iou(obs, lm, T_cw, K, cfg, tr):
            return tr
        tr.score = tr.iou
        tr.candidate = True
        if (obs_points is not None and lm_points is not None
                and len(obs_points) >= cfg.np_min_samples
                and len(lm_points) >= cfg.np_min_samples):
            tr.np_ok, tr.np_stats = mann_whitney_gate(obs_points, lm_points, cfg)
            tr.candidate = tr.np_ok
    return tr


def resolve_one_to_one(traces):
    """Greedy one-to-one selection by descending score."""
    cands = [t for t in traces if t.candidate]
    cands.sort(key=lambda t: (-t.score, t.offset if t.offset is not None else 0.0,
                              t.obs_index, t.landmark_id))
    used_obs, used_lm, matches = set(), set(), []
    for t in cands:
        if t.obs_index in used_obs or t.landmark_id in used_lm:
            continue
        used_obs.add(t.obs_index)
        used_lm.add(t.landmark_id)
        t.matched = True
        matches.append(Match(t.obs_index, t.landmark_id, t.score))
    matches.sort(key=lambda m: m.obs_index)
    return matches


def associate_planes(observations, landmarks, T_cw: RigidTransform,
                     K: CameraIntrinsics, cfg: Optional[AssociationConfig] = None,
                     obs_points=None, landmark_points=None) -> AssociationResult:
    """Match frame planes to map landmarks.

    ``obs_points[i]`` / ``landmark_points[id]`` hold the world coordinates of
    the map points associated with each plane; the rank test runs only when
    both are provided and large enough.
    """
    cfg = cfg or AssociationConfig()
    traces = []
    for i, obs in enumerate(observations):
        Mc = None if obs_points is None else obs_points[i]
        for lm in landmarks:
            Mw = None if landmark_points is None else landmark_points.get(lm.id)
            traces.append(evaluate_pair(i, obs, lm, T_cw, K, cfg, Mc, Mw))
    matches = resolve_one_to_one(traces)
    matched = {m.obs_index for m in matches}
    assert len(matched) == len(matches)
    assert len({m.landmark_id for m in matches}) == len(matches)
    unmatched = [i for i in range(len(observations)) if i not in matched]
    return AssociationResult(matches, unmatched, traces)


__all__ = [
    "AssociationConfig", "angle_gate", "offset_gate", "edge_point_gate",
    "mann_whitney_axis", "mann_whitney_gate", "midranks", "box_iou",
    "project_landmark_box", "associate_point_plane", "associate_planes",
    "AssociationResult", "GateTrace", "Match", "normal_angle",
    "offset_residual", "evaluate_pair", "resolve_one_to_one",
]


def footprint_iou(lm_a, lm_b) -> float:
    """IoU of two landmarks' extents measured in ``lm_a``'s plane coordinates."""
    e1, e2 = lm_a.plane.basis()
    boxes = []
    for lm in (lm_a, lm_b):
        pts = landmark_anchor_points(lm)
        if len(pts) == 0:
            return 0.0
        boxes.append(PixelBox.from_pixels(np.column_stack([pts @ e1, pts @ e2])))
    return box_iou(*boxes)


def landmark_pair_compatible(lm_a, lm_b, cfg: AssociationConfig,
                             points_a=None, points_b=None) -> bool:
    """World-frame plane-plane rule between two landmarks (``lm_b`` plays the observation)."""
    identity = RigidTransform.identity()
    if normal_angle(lm_b.plane, lm_a.plane, identity) >= cfg.beta_T:
        return False

    def geometric():
        if offset_residual(lm_b.plane, lm_a.plane, identity) < cfg.d_T:
            return True
        return edge_point_gate(lm_b.edge_points, lm_a.plane, identity,
                               cfg.d_T_prime, cfg.R_T)[0]

    if cfg.mode == "params-only" or (lm_a.class_id == -1 and lm_b.class_id == -1):
        return geometric()
    if lm_a.class_id != -1 and lm_b.class_id != -1:
        if lm_a.class_id != lm_b.class_id:
            return False
        if footprint_iou(lm_a, lm_b) < cfg.iou_assoc_min:
            return False
        if (points_a is not None and points_b is not None
                and len(points_a) >= cfg.np_min_samples
                and len(points_b) >= cfg.np_min_samples):
            return mann_whitney_gate(points_b, points_a, cfg)[0]
        return True
    return footprint_iou(lm_a, lm_b) >= cfg.iou_assoc_min and geometric()
