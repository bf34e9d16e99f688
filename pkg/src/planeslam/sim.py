"""Synthetic planar-ambiguous desk scenes, camera trajectories and ATE evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import InvalidSpec, NoMatches, NothingVisible
from .geometry import (MIN_DEPTH, CameraIntrinsics, PixelBox, Plane,
                       RigidTransform, fit_plane_lsq, in_image, look_at,
                       project_points)
from .mapping import Frame
from .processing import DetectionBox, PlaneObservation

DEFAULT_INTRINSICS = CameraIntrinsics(525.0, 525.0, 319.5, 239.5, 640, 480)


@dataclass
class ObjectSpec:
    class_id: int
    center: list
    dims: list
    yaw: float = 0.0
    structured: bool = True


@dataclass
class SceneSpec:
    table_center: list = field(default_factory=lambda: [0.0, 0.0, 0.75])
    table_extent: list = field(default_factory=lambda: [1.2, 0.8])
    objects: list = field(default_factory=list)
    map_point_density: float = 300.0
    cloud_spacing: float = 0.012
    edge_spacing: float = 0.0025
    rng_seed: int = 0


@dataclass
class TrajectorySpec:
    kind: str = "orbit"
    radius: float = 1.3
    height: float = 0.75
    frames: int = 100
    rate: float = 30.0
    look_at: list = field(default_factory=lambda: [0.0, 0.0, 0.75])
    start_angle: float = -math.pi / 2.0
    arc: float = 2.0 * math.pi
    t0: float = 0.0


@dataclass
class NoiseSpec:
    depth_sigma: float = 0.0
    pixel_sigma: float = 0.0
    detection_dropout: float = 0.0
    association_withhold: float = 0.0
    outlier_fraction: float = 0.0

    def __post_init__(self):
        for name in ("detection_dropout", "association_withhold", "outlier_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidSpec(f"{name} must lie in [0, 1]")
        if self.depth_sigma < 0 or self.pixel_sigma < 0:
            raise InvalidSpec("noise sigmas must be non-negative")


DEFAULT_NOISE = NoiseSpec(depth_sigma=0.003, pixel_sigma=1.0, detection_dropout=0.1,
                          association_withhold=0.0, outlier_fraction=0.05)


def book(center_xy, dims=(0.3, 0.2, 0.02), yaw=0.0, class_id=1):
    return ObjectSpec(class_id, list(center_xy), list(dims), yaw, True)


def preset_scene(name: str, book_height: float = 0.02, rng_seed: int = 0) -> SceneSpec:
    """Named scenes: ``ambiguous-desk``, ``book-stack``, ``empty-table``."""
    if name == "ambiguous-desk":
        objects = [
            book((-0.35, 0.15), (0.30, 0.20, book_height), 0.1),
            book((0.05, -0.18), (0.26, 0.18, book_height), -0.3),
            book((0.38, 0.18), (0.24, 0.17, book_height), 0.5),
            ObjectSpec(2, [-0.30, -0.20], [0.20, 0.15, 0.10], 0.2, True),
            ObjectSpec(3, [0.42, -0.22], [0.14, 0.14, 0.30], 0.0, False),
        ]
    elif name == "book-stack":
        objects = [book((-0.3, 0.1), (0.3, 0.2, 0.01)),
                   book((0.05, -0.15), (0.28, 0.2, 0.03), 0.4),
                   book((0.35, 0.15), (0.25, 0.18, 0.05), -0.2)]
    elif name == "empty-table":
        objects = []
    else:
        raise InvalidSpec(f"unknown scene preset {name!r}")
    return SceneSpec(objects=objects, rng_seed=rng_seed)


@dataclass
class ScenePlane:
    label: int
    plane: Plane
    corners: np.ndarray
    class_id: int
    object_index: Optional[int] = None


@dataclass
class Scene:
    spec: SceneSpec
    planes: list
    objects: list
    map_points: np.ndarray
    point_labels: np.ndarray


def _rectangle(center, extent, yaw, z):
    c, s = math.cos(yaw), math.sin(yaw)
    hx, hy = extent[0] / 2.0, extent[1] / 2.0
    local = [(-hx, -hy), (hx, -hy), (hx, hy), (-hx, hy)]
    return np.array([[center[0] + c * x - s * y, center[1] + s * x + c * y, z]
                     for x, y in local])


def _inside_rect(xy, corners) -> np.ndarray:
    inside = np.ones(len(xy), dtype=bool)
    for k in range(4):
        a, b = corners[k, :2], corners[(k + 1) % 4, :2]
        edge = b - a
        inside &= (edge[0] * (xy[:, 1] - a[1]) - edge[1] * (xy[:, 0] - a[0])) >= 0
    return inside


def _grid_on_rect(corners, spacing):
    o = corners[0]
    ex, ey = corners[1] - o, corners[3] - o
    lx, ly = np.linalg.norm(ex), np.linalg.norm(ey)
    nx, ny = max(int(lx / spacing), 1), max(int(ly / spacing), 1)
    a = (np.arange(nx) + 0.5) / nx
    b = (np.arange(ny) + 0.5) / ny
    A, B = np.meshgrid(a, b, indexing="ij")
    return o + A.reshape(-1, 1) * ex + B.reshape(-1, 1) * ey


def _perimeter(corners, spacing):
    pts = []
    for k in range(4):
        a, b = corners[k], corners[(k + 1) % 4]
        n = max(int(round(np.linalg.norm(b - a) / spacing)), 1)
        t = np.arange(n) / n
        pts.append(a + t[:, None] * (b - a))
    return np.vstack(pts)


def generate_scene(spec: SceneSpec) -> Scene:
    """Ground-truth planes (table + structured object tops) and map points."""
    tc = np.asarray(spec.table_center, dtype=float)
    ext = np.asarray(spec.table_extent, dtype=float)
    if tc.shape != (3,) or ext.shape != (2,) or (ext <= 0).any():
        raise InvalidSpec("table needs a 3D center and two positive extents")
    if spec.map_point_density < 0:
        raise InvalidSpec("map point density must be non-negative")
    table = _rectangle(tc, ext, 0.0, tc[2])
    planes = [ScenePlane(0, Plane([0, 0, 1], -tc[2]), table, -1)]
    footprints = []
    for k, obj in enumerate(spec.objects):
        dims = np.asarray(obj.dims, dtype=float)
        if dims.shape != (3,) or (dims <= 0).any():
            raise InvalidSpec(f"object {k} needs three positive dimensions")
        if obj.class_id < 0:
            raise InvalidSpec(f"object {k} has a negative class id")
        base = _rectangle(obj.center, dims[:2], obj.yaw, tc[2])
        if not _inside_rect(base[:, :2], table).all():
            raise InvalidSpec(f"object {k} does not rest on the table")
        footprints.append(base)
        if obj.structured:
            top = base.copy()
            top[:, 2] = tc[2] + dims[2]
            planes.append(ScenePlane(len(planes), Plane([0, 0, 1], -top[0, 2]),
                                     top, obj.class_id, k))

    rng = np.random.default_rng(spec.rng_seed)
    pts, labels = [], []
    for sp in planes:
        c = sp.corners
        ex, ey = c[1] - c[0], c[3] - c[0]
        area = np.linalg.norm(ex) * np.linalg.norm(ey)
        count = int(round(area * spec.map_point_density))
        uv = rng.random((count, 2))
        p = c[0] + uv[:, :1] * ex + uv[:, 1:] * ey
        if sp.label == 0:
            for fp in footprints:
                p = p[~_inside_rect(p[:, :2], fp)]
        pts.append(p)
        labels.append(np.full(len(p), sp.label))
    map_points = np.vstack(pts) if pts else np.zeros((0, 3))
    return Scene(spec, planes, list(spec.objects), map_points,
                 np.concatenate(labels).astype(int))


def object_corners(scene: Scene, k: int) -> np.ndarray:
    obj = scene.objects[k]
    z0 = scene.spec.table_center[2]
    base = _rectangle(obj.center, obj.dims[:2], obj.yaw, z0)
    top = base.copy()
    top[:, 2] = z0 + obj.dims[2]
    return np.vstack([base, top])


def trajectory(spec: TrajectorySpec):
    """List of ``(timestamp, T_cw)`` ground-truth poses."""
    if spec.frames < 0:
        raise InvalidSpec("frame count must be non-negative")
    if spec.height <= 0:
        raise InvalidSpec("the camera must stay above the table")
    target = np.asarray(spec.look_at, dtype=float)
    poses = []
    for k in range(spec.frames):
        if spec.kind == "stationary":
            angle = spec.start_angle
        elif spec.kind in ("orbit", "arc"):
            span = spec.arc if spec.kind == "arc" else 2.0 * math.pi
            angle = spec.start_angle + span * k / max(spec.frames, 1)
        else:
            raise InvalidSpec(f"unknown trajectory kind {spec.kind!r}")
        eye = target + np.array([spec.radius * math.cos(angle),
                                 spec.radius * math.sin(angle), spec.height])
        poses.append((spec.t0 + k / spec.rate, look_at(eye, target)))
    return poses


@dataclass
class FrameTruth:
    """Evaluation-only labels; never passed to the algorithm modules."""

    T_cw: RigidTransform
    obs_labels: list
    box_labels: list
    point_labels: dict


def _visible(p_c, K):
    uv, front = project_points(p_c, K)
    return front & in_image(uv, K)


def _depth_noise(p_c, sigma, rng):
    if sigma <= 0 or len(p_c) == 0:
        return p_c
    ray = p_c / np.linalg.norm(p_c, axis=1, keepdims=True)
    return p_c + rng.normal(0.0, sigma, size=(len(p_c), 1)) * ray


def render_frame(scene: Scene, T_cw: RigidTransform, K: CameraIntrinsics = DEFAULT_INTRINSICS,
                 noise: Optional[NoiseSpec] = None, rng_seed: int = 0,
                 frame_id: int = 0, timestamp: float = 0.0, min_points: int = 60):
    """Simulate one RGB-D frame. Returns ``(Frame, FrameTruth)``."""
    noise = noise or NoiseSpec()
    rng = np.random.default_rng(rng_seed)
    spec = scene.spec
    footprints = [object_corners(scene, k)[:4] for k in range(len(scene.objects))]

    observations, labels = [], []
    for sp in scene.planes:
        grid = _grid_on_rect(sp.corners, spec.cloud_spacing)
        if sp.label == 0:
            for fp in footprints:
                grid = grid[~_inside_rect(grid[:, :2], fp)]
        p_c = T_cw.apply(grid)
        p_c = p_c[_visible(p_c, K)]
        if len(p_c) < min_points:
            continue
        edges = T_cw.apply(_perimeter(sp.corners, spec.edge_spacing))
        edges = edges[_visible(edges, K)]
        p_c = _depth_noise(p_c, noise.depth_sigma, rng)
        edges = _depth_noise(edges, noise.depth_sigma, rng)
        observations.append(PlaneObservation(fit_plane_lsq(p_c), p_c, edges))
        labels.append(sp.label)
    if not observations:
        raise NothingVisible(f"frame {frame_id}: no plane in view")

    boxes, box_labels = [], []
    for k, obj in enumerate(scene.objects):
        corners = object_corners(scene, k)
        if obj.structured:
            corners = corners[4:]
        p_c = T_cw.apply(corners)
        if (p_c[:, 2] <= MIN_DEPTH).any():
            continue
        uv, _ = project_points(p_c, K)
        box = PixelBox.from_pixels(uv)
        if box.x_max < 0 or box.y_max < 0 or box.x_min > K.width or box.y_min > K.height:
            continue
        if noise.pixel_sigma > 0:
            jitter = rng.normal(0.0, noise.pixel_sigma, 4)
            a = box.as_array() + jitter
            box = PixelBox(min(a[0], a[2]), min(a[1], a[3]), max(a[0], a[2]), max(a[1], a[3]))
        box = box.clip(K)
        if rng.random() < noise.detection_dropout:
            continue
        boxes.append(DetectionBox(box, obj.class_id, 0.9))
        box_labels.append(k)

    point_obs, point_labels = [], {}
    p_c = T_cw.apply(scene.map_points) if len(scene.map_points) else np.zeros((0, 3))
    vis = np.flatnonzero(_visible(p_c, K)) if len(p_c) else []
    for pid in vis:
        uv = np.array([K.fx * p_c[pid, 0] / p_c[pid, 2] + K.cx,
                       K.fy * p_c[pid, 1] / p_c[pid, 2] + K.cy])
        if noise.pixel_sigma > 0:
            uv = uv + rng.normal(0.0, noise.pixel_sigma, 2)
        if noise.outlier_fraction > 0 and rng.random() < noise.outlier_fraction:
            uv = rng.random(2) * [K.width, K.height]
        point_obs.append((int(pid), uv, scene.map_points[pid].copy()))
        point_labels[int(pid)] = int(scene.point_labels[pid])

    frame = Frame(frame_id, timestamp, T_cw, observations, boxes, point_obs)
    return frame, FrameTruth(T_cw, labels, box_labels, point_labels)


# --- absolute trajectory error ---------------------------------------------

def match_timestamps(est_times, gt_times, max_dt=0.02):
    """Greedy nearest-neighbour pairing of timestamps, each used at most once."""
    pairs = []
    for i, t in enumerate(est_times):
        diffs = np.abs(np.asarray(gt_times) - t)
        for j in np.argsort(diffs, kind="stable")[:2]:
            if diffs[j] <= max_dt:
                pairs.append((diffs[j], i, int(j)))
    pairs.sort()
    used_e, used_g, out = set(), set(), []
    for _, i, j in pairs:
        if i not in used_e and j not in used_g:
            used_e.add(i)
            used_g.add(j)
            out.append((i, j))
    return sorted(out)


def align_rigid(src, dst):
    """Rotation ``R`` and translation ``t`` minimizing ``sum |R src + t - dst|^2``."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    C = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_d - R @ mu_s


def evaluate_ate(estimated, ground_truth, max_dt=0.02):
    """ATE after rigid alignment. Trajectories are lists of ``(t, T_wc)``.

    Returns ``(rmse, stddev, per_frame_errors)``.
    """
    pairs = match_timestamps([t for t, _ in estimated], [t for t, _ in ground_truth], max_dt)
    if len(pairs) < 2:
        raise NoMatches(f"only {len(pairs)} timestamp pairs matched")
    est = np.array([estimated[i][1].translation for i, _ in pairs])
    gt = np.array([ground_truth[j][1].translation for _, j in pairs])
    R, t = align_rigid(est, gt)
    errors = np.linalg.norm(est @ R.T + t - gt, axis=1)
    return float(np.sqrt(np.mean(errors ** 2))), float(np.std(errors)), errors
