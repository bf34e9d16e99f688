"""Global plane map: landmark creation, merging, fusion and snapshots."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .association import AssociationConfig, landmark_pair_compatible
from .exceptions import NoLinesFound, VertexExtractionFailed
from .geometry import (CameraIntrinsics, Plane, RigidTransform,
                       as_points, fit_plane_lsq, in_image, project_points,
                       transform_plane, voxel_downsample)
from .processing import (PlaneStructure, ProcessingConfig, Quality,
                         extract_edge_lines, extract_vertices)

log = logging.getLogger(__name__)


@dataclass
class MapConfig:
    voxel: float = 0.02
    edge_voxel: float = 0.005
    covisible_min: int = 3
    fuse_every: int = 5


@dataclass
class PlaneLandmark:
    id: int
    plane: Plane
    cloud: np.ndarray
    edge_points: np.ndarray
    class_id: int = -1
    structure: Optional[PlaneStructure] = None
    covisible: dict = field(default_factory=dict)
    observations: int = 1
    associated_points: set = field(default_factory=set)


@dataclass
class Frame:
    id: int
    timestamp: float
    T_cw: RigidTransform
    observations: list = field(default_factory=list)
    boxes: list = field(default_factory=list)
    point_observations: list = field(default_factory=list)
    point_plane: list = field(default_factory=list)
    matches: object = None


class PlaneMap:
    """Landmarks keyed by id plus the world positions of known map points."""

    def __init__(self, cfg: Optional[MapConfig] = None):
        self.cfg = cfg or MapConfig()
        self.landmarks = {}
        self.points = {}
        self.point_votes = {}
        self.last_created = {}
        self._next_id = 0

    def __len__(self):
        return len(self.landmarks)

    def new_id(self) -> int:
        lid = self._next_id
        self._next_id += 1
        return lid

    def point_coords(self, ids) -> np.ndarray:
        return as_points([self.points[i] for i in sorted(ids) if i in self.points])

    def vote(self, pid, lid, count=1):
        votes = self.point_votes.setdefault(pid, {})
        votes[lid] = votes.get(lid, 0) + count

    def owner(self, pid):
        """Landmark that most often claimed map point ``pid`` (lowest id on ties)."""
        votes = self.point_votes.get(pid)
        if not votes:
            return None
        return min(votes.items(), key=lambda kv: (-kv[1], kv[0]))[0]

    def refresh_point_ownership(self):
        for lm in self.landmarks.values():
            lm.associated_points = set()
        for pid in self.point_votes:
            lid = self.owner(pid)
            if lid in self.landmarks:
                self.landmarks[lid].associated_points.add(pid)

    def landmark_points(self) -> dict:
        return {lid: self.point_coords(lm.associated_points)
                for lid, lm in self.landmarks.items()}


def _frame_point_ids(frame: Frame, obs_index: int) -> set:
    return {pid for pid, i in frame.point_plane if i == obs_index}


def _refresh_structure(lm: PlaneLandmark, det_box, T_cw, K, proc: ProcessingConfig):
    try:
        lines = extract_edge_lines(lm.edge_points, lm.plane, proc.line_distance,
                                   proc.line_min_inliers, proc.max_lines,
                                   0, proc.line_iterations)
        verts = extract_vertices(lines, lm.plane, det_box, T_cw, K, proc)
    except (NoLinesFound, VertexExtractionFailed):
        return
    lm.structure = PlaneStructure(lines, verts)


def landmark_in_view(lm: PlaneLandmark, T_cw: RigidTransform, K: CameraIntrinsics) -> bool:
    pts = lm.edge_points if len(lm.edge_points) else lm.cloud
    uv, front = project_points(T_cw.apply(pts), K)
    return bool((front & in_image(uv, K)).any())


def _touch_covisibility(map_: PlaneMap, ids):
    for a, b in itertools.combinations(sorted(ids), 2):
        la, lb = map_.landmarks[a], map_.landmarks[b]
        la.covisible[b] = la.covisible.get(b, 0) + 1
        lb.covisible[a] = lb.covisible.get(a, 0) + 1


def insert_or_update(map_: PlaneMap, frame: Frame, matches, K: CameraIntrinsics,
                     proc: Optional[ProcessingConfig] = None) -> PlaneMap:
    """Merge matched observations into landmarks and create landmarks for the rest.

    Returns ``map_`` (updated in place); ``map_.last_created`` maps the
    observation index of each new landmark to its id.
    """
    proc = proc or ProcessingConfig()
    cfg = map_.cfg
    T_wc = frame.T_cw.inverse()
    for pid, _, p_w in frame.point_observations:
        map_.points.setdefault(pid, np.asarray(p_w, dtype=float))

    matched = {m.obs_index: m.landmark_id for m in matches.matches}
    created = {}
    for i, obs in enumerate(frame.observations):
        if obs.quality != Quality.GOOD:
            continue
        cloud_w = T_wc.apply(obs.cloud)
        edges_w = T_wc.apply(obs.edge_points) if len(obs.edge_points) else obs.edge_points
        pids = _frame_point_ids(frame, i)
        lid = matched.get(i)
        if lid is None:
            lid = map_.new_id()
            structure = None
            if obs.structure is not None and obs.structure.has_vertices:
                structure = obs.structure.transformed(T_wc)
            map_.landmarks[lid] = PlaneLandmark(
                lid, transform_plane(obs.plane, T_wc),
                voxel_downsample(cloud_w, cfg.voxel),
                voxel_downsample(edges_w, cfg.edge_voxel),
                obs.class_id, structure)
            for pid in pids:
                map_.vote(pid, lid)
            created[i] = lid
            continue
        lm = map_.landmarks[lid]
        lm.cloud = voxel_downsample(np.vstack([lm.cloud, cloud_w]), cfg.voxel)
        if len(edges_w):
            lm.edge_points = voxel_downsample(np.vstack([lm.edge_points, edges_w]),
                                              cfg.edge_voxel)
        lm.plane = fit_plane_lsq(lm.cloud)
        for pid in pids:
            map_.vote(pid, lid)
        lm.observations += 1
        if lm.class_id == -1 and obs.class_id != -1:
            lm.class_id = obs.class_id
        if lm.class_id != -1 and obs.det_box is not None:
            _refresh_structure(lm, obs.det_box, frame.T_cw, K, proc)
    map_.last_created = created
    map_.refresh_point_ownership()

    in_view = [lid for lid, lm in map_.landmarks.items()
               if landmark_in_view(lm, frame.T_cw, K)]
    _touch_covisibility(map_, in_view)
    return map_


def _merge(map_: PlaneMap, keep: PlaneLandmark, gone: PlaneLandmark):
    cfg = map_.cfg
    keep.cloud = voxel_downsample(np.vstack([keep.cloud, gone.cloud]), cfg.voxel)
    keep.edge_points = voxel_downsample(
        np.vstack([keep.edge_points, gone.edge_points]), cfg.edge_voxel)
    keep.plane = fit_plane_lsq(keep.cloud)
    keep.observations += gone.observations
    if keep.class_id == -1:
        keep.class_id = gone.class_id
    if (keep.structure is None or not keep.structure.has_vertices) and gone.structure:
        keep.structure = gone.structure
    for other, count in gone.covisible.items():
        if other == keep.id:
            continue
        keep.covisible[other] = max(keep.covisible.get(other, 0), count)
        lm = map_.landmarks[other]
        lm.covisible.pop(gone.id, None)
        lm.covisible[keep.id] = keep.covisible[other]
    keep.covisible.pop(gone.id, None)
    del map_.landmarks[gone.id]
    for votes in map_.point_votes.values():
        if gone.id in votes:
            votes[keep.id] = votes.get(keep.id, 0) + votes.pop(gone.id)
    map_.refresh_point_ownership()


def fuse_landmarks(map_: PlaneMap, cfg: Optional[AssociationConfig] = None):
    """Merge covisible landmarks that pass the plane-plane rule, to a fixpoint.

    The younger (larger id) landmark merges into the older one. Returns the
    list of ``(kept_id, removed_id)``.
    """
    cfg = cfg or AssociationConfig()
    merged = []
    changed = True
    while changed:
        changed = False
        for a in sorted(map_.landmarks):
            la = map_.landmarks[a]
            for b in sorted(la.covisible):
                if b <= a or la.covisible[b] < map_.cfg.covisible_min:
                    continue
                lb = map_.landmarks[b]
                if landmark_pair_compatible(
                        la, lb, cfg, map_.point_coords(la.associated_points),
                        map_.point_coords(lb.associated_points)):
                    _merge(map_, la, lb)
                    merged.append((a, b))
                    changed = True
                    break
            if changed:
                break
    return merged


# --- snapshots --------------------------------------------------------------

def _floats(a):
    return [float(x) for x in np.asarray(a, dtype=float).reshape(-1)]


def export_map(map_: PlaneMap) -> dict:
    """Deterministic, JSON-ready snapshot of the map."""
    records = []
    for lid in sorted(map_.landmarks):
        lm = map_.landmarks[lid]
        st = lm.structure
        verts = [] if st is None or not st.has_vertices else [_floats(v) for v in st.vertices]
        records.append({
            "id": int(lid),
            "n": _floats(lm.plane.n),
            "d": float(lm.plane.d),
            "class_id": int(lm.class_id),
            "vertices": verts,
            "num_points": int(len(lm.cloud)),
            "cloud": [_floats(p) for p in lm.cloud],
            "edge_points": [_floats(p) for p in lm.edge_points],
            "observations": int(lm.observations),
            "associated_points": sorted(int(i) for i in lm.associated_points),
            "covisible": {str(k): int(v) for k, v in sorted(lm.covisible.items())},
        })
    points = [[int(pid)] + _floats(map_.points[pid]) for pid in sorted(map_.points)]
    return {"landmarks": records, "points": points, "next_id": int(map_._next_id)}


def import_map(snapshot: dict, cfg: Optional[MapConfig] = None) -> PlaneMap:
    map_ = PlaneMap(cfg)
    for rec in snapshot.get("landmarks", []):
        verts = rec.get("vertices") or []
        structure = PlaneStructure([], np.array(verts)) if len(verts) == 4 else None
        lm = PlaneLandmark(
            rec["id"], Plane.from_canonical(rec["n"], rec["d"]),
            as_points(rec.get("cloud", [])), as_points(rec.get("edge_points", [])),
            rec["class_id"], structure,
            {int(k): v for k, v in rec.get("covisible", {}).items()},
            rec.get("observations", 1), set(rec.get("associated_points", [])))
        map_.landmarks[lm.id] = lm
        for pid in lm.associated_points:
            map_.vote(pid, lm.id)
    for pid, x, y, z in snapshot.get("points", []):
        map_.points[int(pid)] = np.array([x, y, z], dtype=float)
    ids = [rec["id"] for rec in snapshot.get("landmarks", [])]
    map_._next_id = snapshot.get("next_id", max(ids) + 1 if ids else 0)
    return map_


__all__ = ["MapConfig", "PlaneLandmark", "Frame", "PlaneMap", "insert_or_update",
           "fuse_landmarks", "export_map", "import_map", "landmark_in_view"]
