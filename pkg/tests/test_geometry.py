import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from planeslam.exceptions import BehindCamera, DegeneratePlane
from planeslam.geometry import (CameraIntrinsics, Line3D, PixelBox, Plane, RigidTransform,
                                box_iou, fit_plane_lsq, look_at, make_plane, minimal_params,
                                normal_from_angles, point_plane_distance, project_point,
                                project_points, transform_plane, voxel_downsample)

from conftest import random_pose
from oracles import points_on_plane

finite = st.floats(-5, 5, allow_nan=False)
vec3 = arrays(np.float64, 3, elements=finite)


# make_plane ---------------------------------------------------------------

def test_make_plane_normalizes_and_flips_sign():
    pi = make_plane([0, 0, 2, -2])
    assert np.allclose(pi.n, [0, 0, -1])
    assert pi.d == pytest.approx(1.0)


def test_make_plane_zero_offset_tie_rule():
    a = make_plane([0, 0, 1, 0])
    b = make_plane([0, 0, -1, 0])
    assert a.d == 0.0 and b.d == 0.0
    assert np.array_equal(a.n, b.n)
    assert np.allclose(a.n, [0, 0, 1])  # lexicographically larger of the pair


def test_make_plane_degenerate():
    with pytest.raises(DegeneratePlane):
        make_plane([0, 0, 0, 1])


@given(arrays(np.float64, 4, elements=finite))
def test_make_plane_same_point_set(raw):
    if np.linalg.norm(raw[:3]) < 1e-3:
        with pytest.raises(DegeneratePlane) if np.linalg.norm(raw[:3]) <= 1e-12 else _noop():
            make_plane(raw)
        return
    pi = make_plane(raw)
    assert abs(np.linalg.norm(pi.n) - 1) < 1e-9
    assert pi.d >= 0
    # the foot of the raw plane lies on the canonical one
    n = raw[:3]
    foot = -raw[3] * n / (n @ n)
    assert abs(point_plane_distance(foot, pi)) < 1e-9


class _noop:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


# transform_plane ------------------------------------------------------------

def _point_oracle(pi_w, T, rng):
    pts = points_on_plane(pi_w.n, pi_w.d, rng, count=10)
    pi_c = transform_plane(pi_w, T)
    return np.abs(pi_c.distance(T.apply(pts))).max(), pi_c


def test_transform_plane_identity():
    pi = make_plane([0, 0, 1, -1])
    assert transform_plane(pi, RigidTransform.identity()).allclose(pi)


def test_transform_plane_translation_example(rng):
    T = RigidTransform(np.eye(3), [0, 0, 1])
    err, pi_c = _point_oracle(make_plane([0, 0, 1, 0]), T, rng)
    assert err < 1e-9
    assert np.allclose(pi_c.n, [0, 0, -1]) and pi_c.d == pytest.approx(1.0)


def test_transform_plane_rotation_example(rng):
    R = Rotation.from_euler("x", 90, degrees=True).as_matrix()
    T = RigidTransform(R, np.zeros(3))
    pi_w = make_plane([0, 0, 1, -2])
    err, pi_c = _point_oracle(pi_w, T, rng)
    assert err < 1e-9
    assert abs(abs(pi_c.n @ (R @ [0, 0, 1])) - 1) < 1e-12


def test_transform_plane_round_trip_1000():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        pi = Plane(rng.normal(size=3), rng.uniform(-3, 3))
        T = random_pose(rng, 3.0)
        back = transform_plane(transform_plane(pi, T), T.inverse())
        if pi.d < 1e-9:
            continue  # canonical sign is ambiguous at d = 0 up to rounding
        assert back.allclose(pi, atol=1e-9)


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1))
def test_plane_point_consistency(seed):
    rng = np.random.default_rng(seed)
    pi = Plane(rng.normal(size=3) + 1e-3, rng.uniform(-2, 2))
    err, _ = _point_oracle(pi, random_pose(rng, 2.0), rng)
    assert err < 1e-9


# minimal parameterization --------------------------------------------------

@pytest.mark.parametrize("n,d,expected", [
    ((1, 0, 0), 2, (0, 0, 2)),
    ((0, 0, 1), 0, (0, math.pi / 2, 0)),
    ((1 / math.sqrt(2), 1 / math.sqrt(2), 0), 1, (math.pi / 4, 0, 1)),
])
def test_minimal_params_examples(n, d, expected):
    assert np.allclose(minimal_params(Plane(n, d)), expected, atol=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_minimal_params_reconstruction(seed):
    rng = np.random.default_rng(seed)
    pi = Plane(rng.normal(size=3), rng.uniform(0, 2))
    if abs(pi.n[2]) >= 1 - 1e-6:
        return
    phi, psi, d = minimal_params(pi)
    assert -math.pi < phi <= math.pi and -math.pi / 2 <= psi <= math.pi / 2
    assert np.allclose(normal_from_angles(phi, psi), pi.n, atol=1e-9)
    assert d == pi.d


# projection -------------------------------------------------------------------

def test_project_point_examples(K):
    assert np.allclose(project_point([0, 0, 1], K), [320, 240])
    assert np.allclose(project_point([1, 0, 2], K), [570, 240])
    with pytest.raises(BehindCamera):
        project_point([0, 0, -1], K)
    with pytest.raises(BehindCamera):
        project_point([0, 0, 1e-7], K)


@given(vec3, st.floats(1e-3, 1e3))
def test_project_point_scale_invariant(p, lam):
    K = CameraIntrinsics(500, 500, 320, 240, 640, 480)
    p = p.copy()
    p[2] = abs(p[2]) + 0.1
    assert np.allclose(project_point(lam * p, K), project_point(p, K), rtol=1e-9, atol=1e-7)


def test_project_points_matches_scalar(K, rng):
    p = rng.uniform(-1, 1, (50, 3))
    uv, front = project_points(p, K)
    for i in range(50):
        if front[i]:
            assert np.allclose(uv[i], project_point(p[i], K))
        else:
            assert np.isnan(uv[i]).all()


# distance ------------------------------------------------------------------

@pytest.mark.parametrize("p,expected", [((0, 0, 1), 0.0), ((0, 0, 3), -2.0), ((5, 7, 1), 0.0)])
def test_point_plane_distance_examples(p, expected):
    assert point_plane_distance(p, make_plane([0, 0, -1, 1])) == pytest.approx(expected)


# types ----------------------------------------------------------------------

def test_type_invariants():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        CameraIntrinsics(500, 500, 700, 240, 640, 480)
    with pytest.raises(ValueError):
        CameraIntrinsics(-1, 500, 320, 240, 640, 480)
    with pytest.raises(ValueError):
        PixelBox(10, 0, 5, 1)
    L = Line3D([0, 0, 0], [0, 3, 4])
    assert abs(np.linalg.norm(L.V) - 1) < 1e-12


def test_rigid_transform_algebra(rng):
    A, B = random_pose(rng), random_pose(rng)
    p = rng.normal(size=(5, 3))
    assert np.allclose((A @ B).apply(p), A.apply(B.apply(p)))
    assert (A @ A.inverse()).allclose(RigidTransform.identity(), atol=1e-12)
    q = A.quaternion()
    assert q[3] >= 0
    assert RigidTransform.from_quaternion(q, A.translation).allclose(A, atol=1e-12)
    assert RigidTransform.from_matrix(A.matrix()).allclose(A)


def test_exp_retract_small_step(rng):
    T = random_pose(rng)
    xi = np.array([0.0, 0.0, 0.0, 0.1, -0.2, 0.3])
    assert np.allclose(T.retract(xi).translation, T.translation + xi[3:])


def test_look_at_centres_target():
    K = CameraIntrinsics(500, 500, 320, 240, 640, 480)
    T = look_at([1, 2, 3], [0, 0, 0.5])
    assert np.allclose(project_point(T.apply([0, 0, 0.5]), K), [320, 240])
    assert np.allclose(T.center(), [1, 2, 3])
    # straight down still works
    T = look_at([0, 0, 2], [0, 0, 0])
    assert np.allclose(T.apply([0, 0, 0]), [0, 0, 2])


def test_fit_plane_lsq_and_voxel(rng):
    pi = Plane([1, 2, 3], 0.7)
    pts = points_on_plane(pi.n, pi.d, rng, count=100)
    assert fit_plane_lsq(pts).allclose(pi, atol=1e-9)
    grid = np.array([[0.01, 0.01, 0], [0.02, 0.02, 0], [0.5, 0.5, 0]])
    down = voxel_downsample(grid, 0.1)
    assert len(down) == 2 and np.allclose(down[0], [0.015, 0.015, 0])


def test_box_iou():
    a = PixelBox(0, 0, 10, 10)
    assert box_iou(a, a) == 1.0
    assert box_iou(a, PixelBox(5, 0, 15, 10)) == pytest.approx(50 / 150)
    assert box_iou(a, PixelBox(20, 20, 30, 30)) == 0.0
    assert box_iou(PixelBox(0, 0, 0, 0), PixelBox(0, 0, 0, 0)) == 0.0
