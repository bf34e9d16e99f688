"""Plane processing: refitting, semantic tagging, edge lines, vertices, selection."""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .exceptions import (DegenerateCloud, NoLinesFound, ParallelLines,
                         VertexExtractionFailed)
from .geometry import (CameraIntrinsics, Line3D, PixelBox, Plane,
                       RigidTransform, as_points, box_iou, fit_plane_lsq,
                       in_image, plane_basis, project_points)


class Quality(str, enum.Enum):
    GOOD = "Good"
    BAD = "Bad"


@dataclass
class ProcessingConfig:
    refit_distance: float = 0.01
    refit_iterations: int = 200
    edge_grid: float = 0.05
    iou_min: float = 0.3
    inbox_fraction_min: float = 0.6
    line_distance: float = 0.02
    line_min_inliers: int = 20
    max_lines: int = 8
    line_iterations: int = 200
    parallel_dot_min: float = 0.985
    parallel_dot_max: float = 0.999
    parallel_separation_min: float = 0.05
    foot_gap_max: float = 0.03
    vertex_plane_distance_max: float = 0.05
    box_margin_px: float = 3.0
    far_depth_max: float = 5.0
    inlier_ratio_min: float = 0.8
    edge_margin_px: float = 20.0
    unstructured_fraction_max: float = 0.5


@dataclass(frozen=True)
class DetectionBox:
    box: PixelBox
    class_id: int
    score: float = 1.0

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError("detection class ids are non-negative")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("detection score must lie in [0, 1]")


@dataclass
class PlaneStructure:
    edge_lines: list = field(default_factory=list)
    vertices: Optional[np.ndarray] = None

    @property
    def has_vertices(self) -> bool:
        return self.vertices is not None and len(self.vertices) == 4

    def has_parallel_pair(self, dot_min: float = 0.985) -> bool:
        return bool(parallel_pairs(self.edge_lines, dot_min))

    def transformed(self, T: RigidTransform) -> "PlaneStructure":
        verts = None if self.vertices is None else T.apply(self.vertices)
        return PlaneStructure([L.transformed(T) for L in self.edge_lines], verts)


@dataclass
class PlaneObservation:
    """A plane seen in one frame, expressed in that camera's frame."""

    plane: Plane
    cloud: np.ndarray
    edge_points: np.ndarray
    class_id: int = -1
    det_box: Optional[PixelBox] = None
    inlier_ratio: float = 1.0
    quality: Quality = Quality.GOOD
    structure: Optional[PlaneStructure] = None

    def __post_init__(self):
        self.cloud = as_points(self.cloud)
        self.edge_points = as_points(self.edge_points)
        if self.class_id < -1:
            raise ValueError("class_id must be >= -1")
        if self.class_id != -1 and self.det_box is None:
            raise ValueError("a classified plane needs its detection box")

    def projected_box(self, K: CameraIntrinsics,
                      pose: Optional[RigidTransform] = None) -> Optional[PixelBox]:
        pts = self.edge_points if len(self.edge_points) else self.cloud
        if pose is not None:
            pts = pose.apply(pts)
        uv, front = project_points(pts, K)
        if not front.any():
            return None
        return PixelBox.from_pixels(uv[front])


def refit_plane(cloud, distance_threshold=0.01, iterations=200, rng_seed=0):
    """Consensus plane fit followed by least-squares refinement on inliers.

    Returns ``(plane, inlier_ratio, inlier_cloud)``.
    """
    p = as_points(cloud)
    n_pts = len(p)
    if n_pts < 3:
        raise DegenerateCloud(f"need at least 3 points, got {n_pts}")
    centered = p - p.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s[1] / math.sqrt(n_pts) <= 1e-9:
        raise DegenerateCloud("points are collinear")

    rng = np.random.default_rng(rng_seed)
    idx = rng.integers(0, n_pts, size=(iterations, 3))
    a, b, c = p[idx[:, 0]], p[idx[:, 1]], p[idx[:, 2]]
    normals = np.cross(b - a, c - a)
    norms = np.linalg.norm(normals, axis=1)
    valid = norms > 1e-12
    normals[valid] /= norms[valid, None]
    offsets = -np.einsum("ij,ij->i", normals, a)
    dist = np.abs(p @ normals[valid].T + offsets[valid])
    if dist.size == 0:
        raise DegenerateCloud("no valid plane hypothesis")
    counts = (dist < distance_threshold).sum(axis=0)
    best = int(np.argmax(counts))
    inliers = dist[:, best] < distance_threshold
    if inliers.sum() < 3:
        raise DegenerateCloud("best hypothesis has fewer than 3 inliers")

    plane = fit_plane_lsq(p[inliers])
    for _ in range(2):
        refined = np.abs(plane.distance(p)) < distance_threshold
        if refined.sum() < 3:
            break
        inliers = refined
        plane = fit_plane_lsq(p[inliers])
    return plane, float(inliers.sum()) / n_pts, p[inliers]


def extract_edge_points(cloud, grid_resolution=0.05):
    """Boundary points of a roughly planar cloud via a 2D occupancy grid.

    A cell is on the boundary when fewer than 8 of its neighbours are
    occupied; each boundary cell contributes its point farthest from the
    cloud centroid.
    """
    p = as_points(cloud)
    if len(p) <= 1:
        return p.copy()
    centroid = p.mean(axis=0)
    centered = p - centroid
    _, s, Vt = np.linalg.svd(centered, full_matrices=False)
    if len(s) == 3 and s[1] > 1e-9 * max(1.0, s[0]):
        e1, e2 = plane_basis(Vt[2])
    else:
        e1 = Vt[0]
        e2 = plane_basis(e1)[0]
    uv = np.column_stack([centered @ e1, centered @ e2])
    cells = np.floor(uv / grid_resolution).astype(np.int64)
    occupied = {tuple(c) for c in cells}
    radius = np.linalg.norm(uv, axis=1)
    best = {}
    for i, c in enumerate(map(tuple, cells)):
        j = best.get(c)
        if j is None or radius[i] > radius[j]:
            best[c] = i
    out = []
    for c in sorted(best):
        neighbours = sum((c[0] + dx, c[1] + dy) in occupied
                         for dx in (-1, 0, 1) for dy in (-1, 0, 1)
                         if dx or dy)
        if neighbours < 8:
            out.append(best[c])
    return p[out]


def associate_plane_with_box(obs: PlaneObservation, boxes: Sequence[DetectionBox],
                             pose: RigidTransform, K: CameraIntrinsics,
                             iou_min=0.3, inbox_fraction_min=0.6) -> int:
    """Class id of the detection box best overlapping the plane, else -1."""
    return _best_box(obs, boxes, pose, K, iou_min, inbox_fraction_min)[0]


def _best_box(obs, boxes, pose, K, iou_min, inbox_fraction_min):
    if not boxes or len(obs.edge_points) == 0:
        return -1, None
    uv, front = project_points(pose.apply(obs.edge_points), K)
    if not front.any():
        return -1, None
    uv = uv[front]
    proj = PixelBox.from_pixels(uv)
    best_iou, best = -1.0, None
    for det in boxes:
        iou = box_iou(proj, det.box)
        frac = float(det.box.contains(uv).mean())
        if iou >= iou_min and frac >= inbox_fraction_min and iou > best_iou:
            best_iou, best = iou, det
    if best is None:
        return -1, None
    return best.class_id, best.box


def _line_from_inliers(points, n):
    c = points.mean(axis=0)
    _, _, Vt = np.linalg.svd(points - c, full_matrices=False)
    V = Vt[0] - (Vt[0] @ n) * n
    return Line3D(c, V)


def _refine_line(points, n, distance_threshold, rounds=5):
    """PCA line, then refits on points within 3 robust sigmas.

    Points of the neighbouring edges near a corner sit inside the consensus
    threshold and would pull the line inward; trimming removes them.
    """
    line = _line_from_inliers(points, n)
    floor = 1e-3 * distance_threshold
    for _ in range(rounds):
        r = line.distance(points)
        keep = r <= max(3.0 * 1.4826 * float(np.median(r)), floor)
        if keep.sum() < 2 or keep.all():
            break
        points = points[keep]
        line = _line_from_inliers(points, n)
    return line


def extract_edge_lines(edge_points, plane: Plane, distance_threshold=0.02,
                       min_inliers=20, max_lines=8, rng_seed=0,
                       iterations=200):
    """Sequential consensus line fitting on edge points projected to ``plane``."""
    p = as_points(edge_points)
    if len(p) < 2 * min_inliers:
        raise NoLinesFound(f"{len(p)} edge points, need at least {2 * min_inliers}")
    n = plane.n
    remaining = p - np.outer(plane.distance(p), n)
    rng = np.random.default_rng(rng_seed)
    e1, e2 = plane_basis(n)
    lines = []
    while len(lines) < max_lines and len(remaining) >= min_inliers:
        m = len(remaining)
        X, Y = remaining @ e1, remaining @ e2
        idx = rng.integers(0, m, size=(iterations, 2))
        dx = X[idx[:, 1]] - X[idx[:, 0]]
        dy = Y[idx[:, 1]] - Y[idx[:, 0]]
        norms = np.hypot(dx, dy)
        valid = norms > 1e-9
        if not valid.any():
            break
        a = idx[valid, 0]
        dx, dy = dx[valid] / norms[valid], dy[valid] / norms[valid]
        perp = np.abs(dx[:, None] * (Y[None, :] - Y[a][:, None])
                      - dy[:, None] * (X[None, :] - X[a][:, None]))
        counts = (perp < distance_threshold).sum(axis=1)
        best = int(np.argmax(counts))
        if counts[best] < min_inliers:
            break
        inliers = perp[best] < distance_threshold
        line = _line_from_inliers(remaining[inliers], n)
        refined = line.distance(remaining) < distance_threshold
        if refined.sum() >= min_inliers:
            inliers = refined
            line = _refine_line(remaining[inliers], n, distance_threshold)
        lines.append(line)
        remaining = remaining[~inliers]
    if not lines:
        raise NoLinesFound("no line reached the minimum inlier count")
    return lines


def common_perpendicular(Li: Line3D, Lj: Line3D, parallel_dot_max=0.999):
    """Feet ``(P_pi, P_pj)`` of the common perpendicular of two lines."""
    c = float(Li.V @ Lj.V)
    if abs(c) >= parallel_dot_max:
        raise ParallelLines(f"|Vi . Vj| = {abs(c):.6f} >= {parallel_dot_max}")
    w = Li.P - Lj.P
    k_j = (w @ Lj.V - (w @ Li.V) * c) / (Lj.V @ Lj.V - c * c)
    P_pj = Lj.P + k_j * Lj.V
    P_pi = Li.P + ((P_pj - Li.P) @ Li.V) * Li.V
    return P_pi, P_pj


def parallel_pairs(lines, dot_min=0.985, separation_min=0.0):
    pairs = []
    for i, j in itertools.combinations(range(len(lines)), 2):
        if abs(lines[i].V @ lines[j].V) >= dot_min:
            if lines[i].distance(lines[j].P) > separation_min:
                pairs.append((i, j))
    return pairs


def order_ccw(points, normal):
    """Order points counterclockwise about ``normal``, smallest azimuth first."""
    pts = as_points(points)
    c = pts.mean(axis=0)
    e1, e2 = plane_basis(normal)
    ang = np.arctan2((pts - c) @ e2, (pts - c) @ e1)
    return pts[np.argsort(ang, kind="stable")]


def _try_vertices(lines, a, b, plane, det_box, pose, K, cfg):
    feet = []
    for i in a:
        for j in b:
            try:
                P_pi, P_pj = common_perpendicular(lines[i], lines[j],
                                                  cfg.parallel_dot_max)
            except ParallelLines as err:
                raise VertexExtractionFailed(0, str(err)) from err
            gap = float(np.linalg.norm(P_pi - P_pj))
            if not gap < cfg.foot_gap_max:
                raise VertexExtractionFailed(
                    1, f"foot gap {gap:.4f} m >= {cfg.foot_gap_max} m")
            feet.append((P_pi, P_pj))
    for P_pi, P_pj in feet:
        dist = np.abs(plane.distance(np.array([P_pi, P_pj])))
        if dist.max() > cfg.vertex_plane_distance_max:
            raise VertexExtractionFailed(
                2, f"foot {dist.max():.4f} m from the plane")
    for P_pi, P_pj in feet:
        uv, front = project_points(pose.apply(np.array([P_pi, P_pj])), K)
        if not front.all() or not det_box.pad(cfg.box_margin_px).contains(uv).all():
            raise VertexExtractionFailed(3, "foot projects outside the detection box")
    mids = np.array([(P_pi + P_pj) / 2.0 for P_pi, P_pj in feet])
    return order_ccw(mids, plane.n)


def extract_vertices(lines, plane: Plane, det_box: PixelBox,
                     pose: RigidTransform, K: CameraIntrinsics,
                     cfg: Optional[ProcessingConfig] = None) -> np.ndarray:
    """Four plane corners from two pairs of parallel edge lines.

    ``pose`` maps the frame of ``lines``/``plane`` into the camera.
    """
    cfg = cfg or ProcessingConfig()
    if len(lines) < 2:
        raise VertexExtractionFailed(0, "fewer than two edge lines")
    pairs = parallel_pairs(lines, cfg.parallel_dot_min, cfg.parallel_separation_min)
    combos = []
    for a, b in itertools.combinations(pairs, 2):
        if set(a) & set(b):
            continue
        cross = max(abs(lines[i].V @ lines[j].V) for i in a for j in b)
        if cross < cfg.parallel_dot_min:
            combos.append((cross, a, b))
    if not combos:
        raise VertexExtractionFailed(0, "no two non-parallel pairs of parallel lines")
    combos.sort(key=lambda c: c[0])
    first_error = None
    for _, a, b in combos:
        try:
            return _try_vertices(lines, a, b, plane, det_box, pose, K, cfg)
        except VertexExtractionFailed as err:
            first_error = first_error or err
    raise first_error


def process_observation(obs: PlaneObservation, boxes, K: CameraIntrinsics,
                        cfg: Optional[ProcessingConfig] = None, rng_seed=0):
    """Refit, tag, and (for tagged planes) extract edge lines and vertices.

    ``obs`` is in the camera frame. Failures of the structure stages leave
    the structure incomplete; ``select_planes`` turns that into ``Bad``.
    """
    cfg = cfg or ProcessingConfig()
    identity = RigidTransform.identity()
    plane, ratio, inlier_cloud = refit_plane(
        obs.cloud, cfg.refit_distance, cfg.refit_iterations, rng_seed)
    edges = obs.edge_points
    if len(edges):
        edges = edges[np.abs(plane.distance(edges)) < max(cfg.refit_distance,
                                                         cfg.line_distance)]
    out = replace(obs, plane=plane, cloud=inlier_cloud, edge_points=edges,
                  inlier_ratio=ratio, class_id=-1, det_box=None,
                  structure=PlaneStructure())
    class_id, box = _best_box(out, boxes, identity, K,
                              cfg.iou_min, cfg.inbox_fraction_min)
    if class_id == -1:
        return out
    out.class_id, out.det_box = class_id, box
    try:
        lines = extract_edge_lines(edges, plane, cfg.line_distance,
                                   cfg.line_min_inliers, cfg.max_lines,
                                   rng_seed, cfg.line_iterations)
    except NoLinesFound:
        return out
    out.structure.edge_lines = lines
    try:
        out.structure.vertices = extract_vertices(lines, plane, box, identity, K, cfg)
    except VertexExtractionFailed:
        pass
    return out


def selection_reasons(obs: PlaneObservation, K: CameraIntrinsics, boxes,
                      cfg: ProcessingConfig, unstructured_classes) -> list:
    """Numbers of the selection criteria that ``obs`` violates."""
    reasons = []
    if len(obs.cloud) and obs.cloud.mean(axis=0)[2] > cfg.far_depth_max:
        reasons.append(1)
    if obs.inlier_ratio < cfg.inlier_ratio_min:
        reasons.append(2)
    uv, front = project_points(obs.edge_points, K)
    uv = uv[front]
    if obs.class_id != -1:
        st = obs.structure or PlaneStructure()
        near_border = True
        if len(uv):
            m = cfg.edge_margin_px
            box = PixelBox.from_pixels(uv)
            near_border = (box.x_min < m or box.y_min < m
                           or box.x_max > K.width - m or box.y_max > K.height - m)
        if (near_border or not st.has_parallel_pair(cfg.parallel_dot_min)
                or not st.has_vertices):
            reasons.append(3)
    unstructured = [b.box for b in boxes if b.class_id in unstructured_classes]
    if unstructured and len(uv):
        inside = np.zeros(len(uv), dtype=bool)
        for box in unstructured:
            inside |= box.contains(uv)
        if inside.mean() > cfg.unstructured_fraction_max:
            reasons.append(4)
    return reasons


def select_planes(observations, K: CameraIntrinsics, boxes=(),
                  cfg: Optional[ProcessingConfig] = None,
                  unstructured_classes=frozenset()):
    """Copies of ``observations`` with ``quality`` set per the four criteria."""
    cfg = cfg or ProcessingConfig()
    out = []
    for obs in observations:
        bad = selection_reasons(obs, K, boxes, cfg, set(unstructured_classes))
        out.append(replace(obs, quality=Quality.BAD if bad else Quality.GOOD))
    return out


__all__ = [
    "Quality", "ProcessingConfig", "DetectionBox", "PlaneStructure",
    "PlaneObservation", "refit_plane", "extract_edge_points",
    "associate_plane_with_box", "extract_edge_lines", "common_perpendicular",
    "extract_vertices", "select_planes", "process_observation",
    "selection_reasons", "order_ccw", "parallel_pairs", "in_image",
]
