"""Single-pose factor graph: residuals, analytic Jacobians and a robust LM solver.

The pose is perturbed on the left, ``T <- exp(xi) T`` with
``xi = (omega, v)``, so a camera-frame point moves by
``d p_c = -[p_c]x omega + v`` to first order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import FactorNotEvaluable, NoFactors
from .geometry import (MIN_DEPTH, CameraIntrinsics, PixelBox, Plane,
                       RigidTransform, as_points, as_vec3, minimal_params,
                       normal_angles, normal_angles_jacobian, skew, so3_exp,
                       transform_plane_raw, wrap_angle)

log = logging.getLogger(__name__)

POSE_POINT = "PosePoint"
POSE_PLANE = "PosePlane"
BOX_PLANE = "BoxPlane"
POINT_PLANE = "PointPlane"
PLANE_PARALLEL = "PlaneParallel"
PLANE_PERPENDICULAR = "PlanePerpendicular"

FACTOR_KINDS = (POSE_POINT, POSE_PLANE, BOX_PLANE, POINT_PLANE,
                PLANE_PARALLEL, PLANE_PERPENDICULAR)
RESIDUAL_DIM = {POSE_POINT: 2, POSE_PLANE: 3, BOX_PLANE: 4, POINT_PLANE: 1,
                PLANE_PARALLEL: 2, PLANE_PERPENDICULAR: 2}


@dataclass
class Factor:
    """One residual term. Only the fields relevant to ``kind`` are set."""

    kind: str
    weight: float = 1.0
    huber_delta: float = 1.0
    u_obs: Optional[np.ndarray] = None
    p_w: Optional[np.ndarray] = None
    pi_c: Optional[Plane] = None
    pi_w: Optional[Plane] = None
    box_obs: Optional[PixelBox] = None
    vertices_w: Optional[np.ndarray] = None
    n_c: Optional[np.ndarray] = None
    n_w: Optional[np.ndarray] = None
    R_perp: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in FACTOR_KINDS:
            raise ValueError(f"unknown factor kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return RESIDUAL_DIM[self.kind]


def pose_point(u_obs, p_w, weight=1.0, huber_delta=2.0) -> Factor:
    return Factor(POSE_POINT, weight, huber_delta,
                  u_obs=np.asarray(u_obs, dtype=float), p_w=as_vec3(p_w))


def pose_plane(pi_c: Plane, pi_w: Plane, weight=100.0, huber_delta=0.02) -> Factor:
    return Factor(POSE_PLANE, weight, huber_delta, pi_c=pi_c, pi_w=pi_w)


def box_plane(box_obs: PixelBox, vertices_w, weight=0.01, huber_delta=2.0) -> Factor:
    return Factor(BOX_PLANE, weight, huber_delta, box_obs=box_obs,
                  vertices_w=as_points(vertices_w))


def point_plane(pi_c: Plane, p_w, weight=400.0, huber_delta=0.02) -> Factor:
    return Factor(POINT_PLANE, weight, huber_delta, pi_c=pi_c, p_w=as_vec3(p_w))


def plane_parallel(n_c, n_w, weight=50.0, huber_delta=0.02) -> Factor:
    return Factor(PLANE_PARALLEL, weight, huber_delta,
                  n_c=as_vec3(n_c), n_w=as_vec3(n_w))


def perpendicular_rotation(n_c, n_w_in_camera) -> Optional[np.ndarray]:
    """90 degree rotation about ``n_c x n_w``; None when the normals are parallel."""
    axis = np.cross(n_c, n_w_in_camera)
    norm = np.linalg.norm(axis)
    if norm < 1e-6:
        return None
    return so3_exp(axis / norm * (math.pi / 2.0))


def plane_perpendicular(n_c, n_w, R_perp, weight=50.0, huber_delta=0.02) -> Factor:
    return Factor(PLANE_PERPENDICULAR, weight, huber_delta, n_c=as_vec3(n_c),
                  n_w=as_vec3(n_w), R_perp=np.asarray(R_perp, dtype=float))


# --- residuals and Jacobians ------------------------------------------------

def _point_jacobian(p_c) -> np.ndarray:
    return np.hstack([-skew(p_c), np.eye(3)])


def _projection_jacobian(p_c, K: CameraIntrinsics) -> np.ndarray:
    x, y, z = p_c
    return np.array([[K.fx / z, 0.0, -K.fx * x / (z * z)],
                     [0.0, K.fy / z, -K.fy * y / (z * z)]])


def _project(p_c, K):
    if p_c[2] <= MIN_DEPTH:
        raise FactorNotEvaluable(f"point depth {p_c[2]:.3g} behind the camera")
    return np.array([K.fx * p_c[0] / p_c[2] + K.cx, K.fy * p_c[1] / p_c[2] + K.cy])


def _aligned_plane(f: Factor, T: RigidTransform):
    n, d = transform_plane_raw(f.pi_w, T)
    if n @ f.pi_c.n < 0:
        n, d = -n, -d
    return n, d


def _angle_residual(a, b):
    return np.array([wrap_angle(a[0] - b[0]), wrap_angle(a[1] - b[1])])


def _box_projection(f: Factor, T, K):
    p_c = T.apply(f.vertices_w)
    if (p_c[:, 2] <= MIN_DEPTH).any():
        raise FactorNotEvaluable("box vertex behind the camera")
    uv = np.column_stack([K.fx * p_c[:, 0] / p_c[:, 2] + K.cx,
                          K.fy * p_c[:, 1] / p_c[:, 2] + K.cy])
    active = [int(np.argmin(uv[:, 0])), int(np.argmin(uv[:, 1])),
              int(np.argmax(uv[:, 0])), int(np.argmax(uv[:, 1]))]
    return p_c, uv, active


def residual(f: Factor, T_cw: RigidTransform, K: CameraIntrinsics) -> np.ndarray:
    R = T_cw.rotation
    if f.kind == POSE_POINT:
        return f.u_obs - _project(T_cw.apply(f.p_w), K)
    if f.kind == POSE_PLANE:
        n, d = _aligned_plane(f, T_cw)
        phi_c, psi_c, d_c = minimal_params(f.pi_c)
        r = _angle_residual((phi_c, psi_c), normal_angles(n))
        return np.append(r, d_c - d)
    if f.kind == BOX_PLANE:
        _, uv, active = _box_projection(f, T_cw, K)
        pred = np.array([uv[active[0], 0], uv[active[1], 1],
                         uv[active[2], 0], uv[active[3], 1]])
        return f.box_obs.as_array() - pred
    if f.kind == POINT_PLANE:
        return np.array([f.pi_c.n @ T_cw.apply(f.p_w) + f.pi_c.d])
    if f.kind == PLANE_PARALLEL:
        return _angle_residual(normal_angles(f.n_c), normal_angles(R @ f.n_w))
    # PLANE_PERPENDICULAR
    return _angle_residual(normal_angles(f.R_perp @ f.n_c), normal_angles(R @ f.n_w))


def jacobian(f: Factor, T_cw: RigidTransform, K: CameraIntrinsics) -> np.ndarray:
    """Derivative of ``residual`` w.r.t. the left tangent perturbation."""
    R = T_cw.rotation
    J = np.zeros((f.dim, 6))
    if f.kind == POSE_POINT:
        p_c = T_cw.apply(f.p_w)
        if p_c[2] <= MIN_DEPTH:
            raise FactorNotEvaluable("point behind the camera")
        return -_projection_jacobian(p_c, K) @ _point_jacobian(p_c)
    if f.kind == POSE_PLANE:
        n, _ = _aligned_plane(f, T_cw)
        J[:2, :3] = normal_angles_jacobian(n) @ skew(n)
        J[2, 3:] = n
        return J
    if f.kind == BOX_PLANE:
        p_c, _, active = _box_projection(f, T_cw, K)
        for row, (k, coord) in enumerate(zip(active, (0, 1, 0, 1))):
            Jp = _projection_jacobian(p_c[k], K)[coord] @ _point_jacobian(p_c[k])
            J[row] = -Jp
        return J
    if f.kind == POINT_PLANE:
        p_c = T_cw.apply(f.p_w)
        return (f.pi_c.n @ _point_jacobian(p_c)).reshape(1, 6)
    m = R @ f.n_w
    J[:, :3] = normal_angles_jacobian(m) @ skew(m)
    return J


# --- robust cost and solver ------------------------------------------------

def huber_cost(e: float, delta: float) -> float:
    """Huber applied to the residual norm: ``e^2`` inside, linear outside."""
    return e * e if e <= delta else 2.0 * delta * e - delta * delta


def huber_weight(e: float, delta: float) -> float:
    return 1.0 if e <= delta else delta / e


@dataclass
class SolverSettings:
    max_iterations: int = 50
    lambda_init: float = 1e-4
    lambda_scale: float = 10.0
    convergence_tol: float = 1e-10
    cost_floor: float = 1e-24


@dataclass
class PoseProblem:
    T_cw: RigidTransform
    factors: list = field(default_factory=list)
    solver: SolverSettings = field(default_factory=SolverSettings)


@dataclass
class OptimizeResult:
    T_cw: RigidTransform
    final_cost: float
    iterations: int
    converged: bool
    costs: list = field(default_factory=list)
    log: list = field(default_factory=list)
    skipped: int = 0

    def __iter__(self):
        return iter((self.T_cw, self.final_cost, self.iterations, self.converged))


def _point_batch(factors, T_cw, K, with_jacobian=True):
    """Vectorized PosePoint residuals, Jacobians, weights and validity."""
    u = np.array([f.u_obs for f in factors], dtype=float)
    p_c = T_cw.apply(np.array([f.p_w for f in factors], dtype=float))
    z = p_c[:, 2]
    valid = z > MIN_DEPTH
    zs = np.where(valid, z, 1.0)
    r = u - np.column_stack([K.fx * p_c[:, 0] / zs + K.cx, K.fy * p_c[:, 1] / zs + K.cy])
    w = np.array([f.weight for f in factors])
    delta = np.array([f.huber_delta for f in factors])
    if not with_jacobian:
        return r, None, w, delta, valid
    x, y = p_c[:, 0], p_c[:, 1]
    Jproj = np.zeros((len(factors), 2, 3))
    Jproj[:, 0, 0] = K.fx / zs
    Jproj[:, 0, 2] = -K.fx * x / (zs * zs)
    Jproj[:, 1, 1] = K.fy / zs
    Jproj[:, 1, 2] = -K.fy * y / (zs * zs)
    Jpt = np.zeros((len(factors), 3, 6))
    Jpt[:, 0, 1], Jpt[:, 0, 2] = z, -y
    Jpt[:, 1, 0], Jpt[:, 1, 2] = -z, x
    Jpt[:, 2, 0], Jpt[:, 2, 1] = y, -x
    Jpt[:, :, 3:] = np.eye(3)
    return r, -np.einsum("nij,njk->nik", Jproj, Jpt), w, delta, valid


def _huber_arrays(e, delta):
    inside = e <= delta
    cost = np.where(inside, e * e, 2.0 * delta * e - delta * delta)
    weight = np.where(inside, 1.0, delta / np.maximum(e, 1e-300))
    return cost, weight


def _split(factors):
    points = [f for f in factors if f.kind == POSE_POINT]
    return points, [f for f in factors if f.kind != POSE_POINT]


def evaluate_cost(factors, T_cw, K, skipped=None) -> float:
    points, others = _split(factors)
    total = 0.0
    if points:
        r, _, w, delta, valid = _point_batch(points, T_cw, K, with_jacobian=False)
        cost, _ = _huber_arrays(np.linalg.norm(r, axis=1), delta)
        total += float(np.sum((w * cost)[valid]))
        if skipped is not None:
            skipped.extend(f for f, ok in zip(points, valid) if not ok)
    for f in others:
        try:
            e = float(np.linalg.norm(residual(f, T_cw, K)))
        except FactorNotEvaluable:
            if skipped is not None:
                skipped.append(f)
            continue
        total += f.weight * huber_cost(e, f.huber_delta)
    return total


def _normal_equations(factors, T_cw, K):
    H = np.zeros((6, 6))
    g = np.zeros(6)
    used = 0
    points, others = _split(factors)
    if points:
        r, J, w, delta, valid = _point_batch(points, T_cw, K)
        _, hw = _huber_arrays(np.linalg.norm(r, axis=1), delta)
        wt = (w * hw)[valid]
        J, r = J[valid], r[valid]
        H += np.einsum("n,nji,njk->ik", wt, J, J)
        g += np.einsum("n,nji,nj->i", wt, J, r)
        used += int(valid.sum())
    for f in others:
        try:
            r = residual(f, T_cw, K)
            J = jacobian(f, T_cw, K)
        except FactorNotEvaluable as err:
            log.debug("skipping %s factor: %s", f.kind, err)
            continue
        w = f.weight * huber_weight(float(np.linalg.norm(r)), f.huber_delta)
        H += w * J.T @ J
        g += w * J.T @ r
        used += 1
    return H, g, used


def optimize(problem: PoseProblem, K: CameraIntrinsics) -> OptimizeResult:
    """Levenberg-Marquardt on the Huber-robustified cost of ``problem``."""
    if not problem.factors:
        raise NoFactors("the problem has no factors")
    s = problem.solver
    T = problem.T_cw
    skipped = []
    cost = evaluate_cost(problem.factors, T, K, skipped)
    if len(skipped) == len(problem.factors):
        raise NoFactors("no factor is evaluable at the initial pose")
    lam = s.lambda_init
    costs, lines = [cost], []
    converged = False
    it = 0
    while it < s.max_iterations:
        if cost <= s.cost_floor:
            converged = True
            break
        it += 1
        H, g, _ = _normal_equations(problem.factors, T, K)
        damping = np.maximum(np.diag(H), 1e-9 * max(1.0, np.abs(H).max()))
        accepted = False
        while lam < 1e16:
            step = np.linalg.solve(H + lam * np.diag(damping), -g)
            T_new = T.retract(step)
            new_cost = evaluate_cost(problem.factors, T_new, K)
            if new_cost < cost:
                accepted = True
                break
            lam *= s.lambda_scale
        if not accepted:
            lines.append(f"{it} {lam:.3e} {cost:.12e} 0.000000e+00")
            converged = True
            break
        rel = (cost - new_cost) / max(cost, 1e-300)
        T, cost = T_new, new_cost
        costs.append(cost)
        lines.append(f"{it} {lam:.3e} {cost:.12e} {np.linalg.norm(step):.6e}")
        lam = max(lam / s.lambda_scale, 1e-12)
        if rel < s.convergence_tol:
            converged = True
            break
    return OptimizeResult(T, cost, it, converged, costs, lines, len(skipped))


# --- problem construction ---------------------------------------------------

@dataclass
class FactorConfig:
    w_point: float = 1.0
    w_plane: float = 100.0
    w_box: float = 0.01
    w_point_plane: float = 400.0
    w_parallel: float = 50.0
    w_perpendicular: float = 50.0
    delta_point: float = 2.0
    delta_plane: float = 0.02
    delta_box: float = 2.0
    delta_point_plane: float = 0.02
    delta_parallel: float = 0.02
    delta_perpendicular: float = 0.02
    angle_struct_tol: float = math.radians(5.0)


def build_problem(frame, matches, landmarks, K: CameraIntrinsics,
                  cfg: Optional[FactorConfig] = None,
                  solver: Optional[SolverSettings] = None) -> PoseProblem:
    """Assemble every factor kind for one frame around its initial pose.

    ``landmarks`` maps landmark id to landmark. ``frame.point_observations``
    holds ``(point_id, pixel, p_w)`` and ``frame.point_plane`` holds
    ``(point_id, obs_index)`` pairs.
    """
    cfg = cfg or FactorConfig()
    T0 = frame.T_cw
    factors = []
    positions = {}
    for pid, uv, p_w in frame.point_observations:
        positions[pid] = p_w
        factors.append(pose_point(uv, p_w, cfg.w_point, cfg.delta_point))

    matched = [(m.obs_index, landmarks[m.landmark_id]) for m in matches.matches]
    for i, lm in matched:
        obs = frame.observations[i]
        factors.append(pose_plane(obs.plane, lm.plane, cfg.w_plane, cfg.delta_plane))
        st = lm.structure
        if (lm.class_id != -1 and st is not None and st.has_vertices
                and obs.det_box is not None):
            factors.append(box_plane(obs.det_box, st.vertices, cfg.w_box, cfg.delta_box))

    for pid, i in frame.point_plane:
        if pid in positions:
            factors.append(point_plane(frame.observations[i].plane, positions[pid],
                                       cfg.w_point_plane, cfg.delta_point_plane))

    for a in range(len(matched)):
        for b in range(a + 1, len(matched)):
            i, lm_a = matched[a]
            _, lm_b = matched[b]
            n_c = frame.observations[i].plane.n
            c = abs(float(lm_a.plane.n @ lm_b.plane.n))
            angle = math.acos(min(1.0, c))
            n_w = lm_b.plane.n
            m = T0.rotation @ n_w
            if angle < cfg.angle_struct_tol:
                if m @ n_c < 0:
                    n_w = -n_w
                factors.append(plane_parallel(n_c, n_w, cfg.w_parallel,
                                              cfg.delta_parallel))
            elif abs(angle - math.pi / 2.0) < cfg.angle_struct_tol:
                R_perp = perpendicular_rotation(n_c, m)
                if R_perp is not None:
                    factors.append(plane_perpendicular(
                        n_c, n_w, R_perp, cfg.w_perpendicular,
                        cfg.delta_perpendicular))
    return PoseProblem(T0, factors, solver or SolverSettings())


def factor_counts(factors) -> dict:
    counts = {k: 0 for k in FACTOR_KINDS}
    for f in factors:
        counts[f.kind] += 1
    return counts
