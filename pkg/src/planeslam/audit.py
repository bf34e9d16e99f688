"""Finite-difference audit of the analytic factor Jacobians."""

from __future__ import annotations

import time

import numpy as np
from scipy.spatial.transform import Rotation

from .factors import (BOX_PLANE, FACTOR_KINDS, PLANE_PARALLEL, PLANE_PERPENDICULAR,
                      POINT_PLANE, POSE_PLANE, POSE_POINT, box_plane, jacobian,
                      perpendicular_rotation, plane_parallel, plane_perpendicular,
                      point_plane, pose_plane, pose_point, residual)
from .geometry import (PixelBox, Plane, RigidTransform, project_points,
                       transform_plane, wrap_angle)
from .sim import DEFAULT_INTRINSICS

ABS_FLOOR = 1e-3


def _random_pose(rng) -> RigidTransform:
    R = Rotation.random(random_state=rng).as_matrix()
    return RigidTransform(R, rng.uniform(-1.0, 1.0, 3))


def _unit_away_from_poles(rng, zmax=0.9):
    while True:
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        if abs(v[2]) < zmax and np.hypot(v[0], v[1]) > 1e-3:
            return v


def _world_normal_for(T, n_c):
    return T.rotation.T @ n_c


def random_factor(kind, rng, K=DEFAULT_INTRINSICS):
    """A random, generic instance of ``kind`` and a pose where it is smooth."""
    T = _random_pose(rng)
    T_wc = T.inverse()
    if kind == POSE_POINT:
        p_c = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.4, 0.4), rng.uniform(1.0, 3.0)])
        uv, _ = project_points(p_c, K)
        return pose_point(uv[0] + rng.normal(0, 2.0, 2), T_wc.apply(p_c)), T
    if kind == POSE_PLANE:
        n_c = _unit_away_from_poles(rng)
        pi_c = Plane(n_c, rng.uniform(0.3, 2.0))
        pi_w = transform_plane(pi_c, T_wc)
        noisy = Plane(pi_c.n + rng.normal(0, 0.02, 3), pi_c.d + rng.normal(0, 0.02))
        return pose_plane(noisy, pi_w), T
    if kind == BOX_PLANE:
        c = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(1.0, 2.5)])
        R = Rotation.random(random_state=rng).as_matrix()
        hx, hy = rng.uniform(0.05, 0.2, 2)
        corners = c + np.array([[-hx, -hy, 0], [hx, -hy, 0], [hx, hy, 0], [-hx, hy, 0]]) @ R.T
        uv, _ = project_points(corners, K)
        box = PixelBox.from_pixels(uv + rng.normal(0, 3.0, uv.shape))
        return box_plane(box, T_wc.apply(corners)), T
    if kind == POINT_PLANE:
        pi_c = Plane(_unit_away_from_poles(rng), rng.uniform(0.3, 2.0))
        p_c = rng.uniform(-1, 1, 3) + np.array([0, 0, 2.0])
        return point_plane(pi_c, T_wc.apply(p_c)), T
    if kind == PLANE_PARALLEL:
        n_c = _unit_away_from_poles(rng)
        m = _unit_away_from_poles(rng) * 0.05 + n_c
        return plane_parallel(n_c, _world_normal_for(T, m / np.linalg.norm(m))), T
    if kind == PLANE_PERPENDICULAR:
        n_c = _unit_away_from_poles(rng)
        while True:
            m = _unit_away_from_poles(rng)
            m = m - (m @ n_c) * n_c
            m /= np.linalg.norm(m)
            if abs(m[2]) < 0.9:
                break
        R_perp = perpendicular_rotation(n_c, m)
        return plane_perpendicular(n_c, _world_normal_for(T, m), R_perp), T
    raise ValueError(kind)


def numeric_jacobian(f, T, K, eps=1e-6):
    J = np.zeros((f.dim, 6))
    for k in range(6):
        step = np.zeros(6)
        step[k] = eps
        diff = residual(f, T.retract(step), K) - residual(f, T.retract(-step), K)
        if f.kind in (POSE_PLANE, PLANE_PARALLEL, PLANE_PERPENDICULAR):
            diff[:2] = [wrap_angle(a) for a in diff[:2]]
        J[:, k] = diff / (2 * eps)
    return J


def relative_error(analytic, numeric) -> float:
    """Largest row-wise ``|a_i - n_i| / max(|n_i|, ABS_FLOOR)`` (one row per residual entry)."""
    num = np.linalg.norm(analytic - numeric, axis=1)
    den = np.maximum(np.linalg.norm(numeric, axis=1), ABS_FLOOR)
    return float(np.max(num / den))


def jacobian_audit(instances=100, seed=0, K=DEFAULT_INTRINSICS):
    """Max relative error per factor kind over random instances.

    Returns ``(errors_by_kind, seconds)``.
    """
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = {}
    for kind in FACTOR_KINDS:
        err = 0.0
        for _ in range(instances):
            f, T = random_factor(kind, rng, K)
            err = max(err, relative_error(jacobian(f, T, K), numeric_jacobian(f, T, K)))
        worst[kind] = err
    return worst, time.perf_counter() - start


__all__ = ["jacobian_audit", "random_factor", "numeric_jacobian", "relative_error"]
