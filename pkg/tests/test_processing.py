import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from planeslam.exceptions import (DegenerateCloud, NoLinesFound, ParallelLines,
                                  VertexExtractionFailed)
from planeslam.geometry import Line3D, PixelBox, Plane, RigidTransform, project_points
from planeslam.processing import (DetectionBox, PlaneObservation, PlaneStructure,
                                  ProcessingConfig, Quality, associate_plane_with_box,
                                  common_perpendicular, extract_edge_lines,
                                  extract_edge_points, extract_vertices, refit_plane,
                                  select_planes, selection_reasons)

from conftest import random_pose, random_unit
from oracles import closest_points_lsq

IDENTITY = RigidTransform.identity()
CORNERS = np.array([[-0.5, -0.5, 2.0], [0.5, -0.5, 2.0], [0.5, 0.5, 2.0], [-0.5, 0.5, 2.0]])
SQUARE_PLANE = Plane([0, 0, 1], -2.0)


def square_perimeter(per_side=50, corners=CORNERS):
    pts = []
    for a, b in zip(corners, np.roll(corners, -1, axis=0)):
        s = np.linspace(0, 1, per_side, endpoint=False)
        pts.append(a + s[:, None] * (b - a))
    return np.vstack(pts)


def side_lines(corners=CORNERS):
    return [Line3D(a, b - a) for a, b in zip(corners, np.roll(corners, -1, axis=0))]


def box_of(points, K):
    uv, _ = project_points(points, K)
    return PixelBox.from_pixels(uv)


def same_up_to_cycle(a, b, atol):
    return any(np.allclose(np.roll(a, k, axis=0), b, atol=atol) for k in range(len(a)))


# refit_plane ---------------------------------------------------------------

def _plane_z1(rng, n=200):
    return np.column_stack([rng.uniform(-1, 1, (n, 2)), np.ones(n)])


def test_refit_exact(rng):
    plane, ratio, inl = refit_plane(_plane_z1(rng), 0.01, 200, 0)
    assert plane.allclose(Plane([0, 0, 1], -1), atol=1e-12)
    assert ratio == 1.0 and len(inl) == 200


def test_refit_with_outliers(rng):
    cloud = _plane_z1(rng)
    # outliers inside a unit ball, kept clear of the plane itself
    out = []
    while len(out) < 50:
        q = rng.uniform(-1, 1, 3)
        if np.linalg.norm(q) <= 1 and abs(q[2]) > 0.05:
            out.append(q + [0, 0, 1])
    plane, ratio, _ = refit_plane(np.vstack([cloud, out]), 0.01, 200, 0)
    assert np.arccos(min(1, abs(plane.n[2]))) < 1e-3
    assert abs(plane.d - 1) < 1e-3
    assert ratio == pytest.approx(0.8, abs=0.01)


def test_refit_collinear():
    with pytest.raises(DegenerateCloud):
        refit_plane(np.outer(np.arange(10.0), [1, 2, 3]))
    with pytest.raises(DegenerateCloud):
        refit_plane(np.zeros((2, 3)))


def test_refit_deterministic_and_monotone(rng):
    cloud = _plane_z1(rng) + rng.normal(0, 0.002, (200, 3))
    a = refit_plane(cloud, 0.01, 200, 5)
    b = refit_plane(cloud, 0.01, 200, 5)
    assert np.array_equal(a[0].as_array(), b[0].as_array()) and a[1] == b[1]
    extra = rng.uniform(-1, 1, (30, 3)) + [0, 0, 1.5]
    assert refit_plane(np.vstack([cloud, extra]), 0.01, 200, 5)[1] <= a[1]


# edge points ------------------------------------------------------------------

def test_edge_points_square():
    g = np.arange(0, 1.0001, 0.01)
    xx, yy = np.meshgrid(g, g)
    cloud = np.column_stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)])
    edges = extract_edge_points(cloud, 0.05)
    assert 0 < len(edges) < len(cloud) / 4
    border = np.minimum.reduce([edges[:, 0], 1 - edges[:, 0], edges[:, 1], 1 - edges[:, 1]])
    assert border.max() <= 0.05 + 1e-12
    # subset of the input
    assert all((np.abs(cloud - e).sum(1) < 1e-12).any() for e in edges)


def test_edge_points_single_and_segment():
    p = np.array([[1.0, 2.0, 3.0]])
    assert np.array_equal(extract_edge_points(p, 0.05), p)
    seg = np.column_stack([np.linspace(0, 1, 101), np.zeros(101), np.zeros(101)])
    edges = extract_edge_points(seg, 0.05)
    # a 1 m segment spans at most 21 cells of 0.05 m, every one a boundary cell
    assert 20 <= len(edges) <= 21
    assert len(np.unique(edges[:, 0])) == len(edges)


# box association -----------------------------------------------------------------

def _obs_with_edges(edges):
    return PlaneObservation(SQUARE_PLANE, edges, edges)


def test_associate_box_rules(K):
    edges = square_perimeter()
    obs = _obs_with_edges(edges)
    exact = box_of(edges, K)
    assert associate_plane_with_box(obs, [DetectionBox(exact, 4)], IDENTITY, K) == 4
    assert associate_plane_with_box(obs, [], IDENTITY, K) == -1
    b = exact.as_array()
    w = b[2] - b[0]
    # covering box: IoU 0.6 with everything inside; partial box: IoU 0.3
    big = PixelBox(b[0] - (w / np.sqrt(0.6) - w) / 2, b[1] - (w / np.sqrt(0.6) - w) / 2,
                   b[2] + (w / np.sqrt(0.6) - w) / 2, b[3] + (w / np.sqrt(0.6) - w) / 2)
    small = PixelBox(b[0], b[1], b[0] + 0.3 * w, b[3])
    from planeslam.geometry import box_iou
    assert box_iou(exact, big) == pytest.approx(0.6)
    assert box_iou(exact, small) == pytest.approx(0.3)
    got = associate_plane_with_box(obs, [DetectionBox(small, 1), DetectionBox(big, 2)],
                                   IDENTITY, K, iou_min=0.3, inbox_fraction_min=0.0)
    assert got == 2


# edge lines --------------------------------------------------------------------

def test_edge_lines_square():
    lines = extract_edge_lines(square_perimeter(50), SQUARE_PLANE, 0.02, 20, 8, 0)
    assert len(lines) == 4
    for a, b in itertools.combinations(lines, 2):
        c = abs(a.V @ b.V)
        assert c > 1 - 1e-9 or c < 1e-9
    for L in lines:
        assert abs(L.V @ SQUARE_PLANE.n) < np.sin(0.05)
        # each fitted line matches one analytic side
        assert min(max(S.distance(L.P), 1 - abs(S.V @ L.V)) for S in side_lines()) < 1e-9


def test_edge_lines_circle_and_segment():
    t = np.linspace(0, 2 * np.pi, 200, endpoint=False)
    circle = np.column_stack([np.cos(t), np.sin(t), np.full_like(t, 2.0)])
    with pytest.raises(NoLinesFound):
        extract_edge_lines(circle, SQUARE_PLANE, 0.001, 50, 8, 0)
    seg = np.column_stack([np.linspace(-1, 1, 60), np.zeros(60), np.full(60, 2.0)])
    lines = extract_edge_lines(seg, SQUARE_PLANE, 0.02, 20, 8, 0)
    assert len(lines) == 1 and np.allclose(abs(lines[0].V[0]), 1)
    with pytest.raises(NoLinesFound):
        extract_edge_lines(seg[:10], SQUARE_PLANE, 0.02, 20, 8, 0)


# common perpendicular -----------------------------------------------------------

def test_common_perpendicular_examples():
    x, y = np.eye(3)[0], np.eye(3)[1]
    a, b = common_perpendicular(Line3D(np.zeros(3), x), Line3D(np.zeros(3), y))
    assert np.allclose(a, 0) and np.allclose(b, 0)
    a, b = common_perpendicular(Line3D(np.zeros(3), x), Line3D([0, 0, 1], y))
    assert np.allclose(a, [0, 0, 0]) and np.allclose(b, [0, 0, 1])
    with pytest.raises(ParallelLines):
        common_perpendicular(Line3D(np.zeros(3), x), Line3D([0, 1, 0], x))


@settings(max_examples=300)
@given(st.integers(0, 2**32 - 1))
def test_common_perpendicular_properties(seed):
    rng = np.random.default_rng(seed)
    Li = Line3D(rng.uniform(-2, 2, 3), random_unit(rng))
    Lj = Line3D(rng.uniform(-2, 2, 3), random_unit(rng))
    if abs(Li.V @ Lj.V) >= 0.999:
        return
    a, b = common_perpendicular(Li, Lj)
    assert abs((a - b) @ Li.V) < 1e-9 and abs((a - b) @ Lj.V) < 1e-9
    b2, a2 = common_perpendicular(Lj, Li)
    assert np.allclose(a, a2, atol=1e-9) and np.allclose(b, b2, atol=1e-9)
    ra, rb = closest_points_lsq(Li.P, Li.V, Lj.P, Lj.V)
    assert np.allclose(a, ra, atol=1e-7) and np.allclose(b, rb, atol=1e-7)


# vertices -------------------------------------------------------------------------

def test_vertices_unit_square(K):
    verts = extract_vertices(side_lines(), SQUARE_PLANE, box_of(CORNERS, K), IDENTITY, K)
    assert verts.shape == (4, 3)
    # the canonical normal of z = 2 is -z, so the order runs clockwise seen from +z
    assert same_up_to_cycle(verts, CORNERS[::-1], 1e-6)
    # counterclockwise about the normal
    c = verts.mean(0)
    cross = np.cross(verts[0] - c, verts[1] - c)
    assert cross @ SQUARE_PLANE.n > 0


def test_vertices_conditions(K):
    cfg = ProcessingConfig()
    box = box_of(CORNERS, K)
    lines = side_lines()
    lift = 10 * cfg.foot_gap_max * SQUARE_PLANE.n
    gapped = [Line3D(L.P + lift, L.V) if k % 2 == 0 else L for k, L in enumerate(lines)]
    with pytest.raises(VertexExtractionFailed) as err:
        extract_vertices(gapped, SQUARE_PLANE, box, IDENTITY, K, cfg)
    assert err.value.condition == 1
    off = [Line3D(L.P + 2 * cfg.vertex_plane_distance_max * SQUARE_PLANE.n, L.V) for L in lines]
    with pytest.raises(VertexExtractionFailed) as err:
        extract_vertices(off, SQUARE_PLANE, box, IDENTITY, K, cfg)
    assert err.value.condition == 2
    half = PixelBox(box.x_min, box.y_min, (box.x_min + box.x_max) / 2, box.y_max)
    with pytest.raises(VertexExtractionFailed) as err:
        extract_vertices(lines, SQUARE_PLANE, half, IDENTITY, K, cfg)
    assert err.value.condition == 3
    with pytest.raises(VertexExtractionFailed):
        extract_vertices(lines[:2], SQUARE_PLANE, box, IDENTITY, K, cfg)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_vertices_rigid_invariance(seed):
    from planeslam.geometry import CameraIntrinsics, transform_plane
    K = CameraIntrinsics(500, 500, 320, 240, 640, 480)
    rng = np.random.default_rng(seed)
    T = random_pose(rng)
    box = box_of(CORNERS, K)
    base = extract_vertices(side_lines(), SQUARE_PLANE, box, IDENTITY, K)
    # express everything in a world frame; pose maps world back to camera
    T_wc = T.inverse()
    moved = extract_vertices([L.transformed(T_wc) for L in side_lines()],
                             transform_plane(SQUARE_PLANE, T_wc), box, T, K)
    moved = T.apply(moved)
    assert same_up_to_cycle(moved, base, 1e-6) or same_up_to_cycle(moved[::-1], base, 1e-6)


# selection ---------------------------------------------------------------------

def _good_obs(K, class_id=3):
    edges = square_perimeter(50, CORNERS * [0.3, 0.3, 1])
    st_ = PlaneStructure(side_lines(CORNERS * [0.3, 0.3, 1]), CORNERS * [0.3, 0.3, 1])
    return PlaneObservation(SQUARE_PLANE, edges, edges, class_id, box_of(edges, K),
                            0.95, Quality.GOOD, st_)


def test_selection_examples(K):
    cfg = ProcessingConfig()
    good = _good_obs(K)
    assert select_planes([good], K, (), cfg)[0].quality == Quality.GOOD
    far = _good_obs(K)
    far.cloud = far.cloud * [1, 1, 5]  # depth 10 m
    assert 1 in selection_reasons(far, K, (), cfg, set())
    low = _good_obs(K)
    low.inlier_ratio = 0.5
    assert selection_reasons(low, K, (), cfg, set()) == [2]
    nov = _good_obs(K)
    nov.structure = PlaneStructure(nov.structure.edge_lines, None)
    assert selection_reasons(nov, K, (), cfg, set()) == [3]
    # 60% of the edge points inside an unstructured-class box
    uv, _ = project_points(good.edge_points, K)
    xs = np.sort(uv[:, 0])
    cut = xs[int(0.6 * len(xs)) - 1]
    plant = DetectionBox(PixelBox(0, 0, cut + 1e-6, 480), 7)
    assert selection_reasons(good, K, [plant], cfg, {7}) == [4]
    assert selection_reasons(good, K, [plant], cfg, set()) == []


def test_selection_order_independent(K):
    a, b = _good_obs(K), _good_obs(K)
    b.inlier_ratio = 0.1
    fwd = [o.quality for o in select_planes([a, b], K)]
    rev = [o.quality for o in select_planes([b, a], K)]
    assert fwd == rev[::-1] == [Quality.GOOD, Quality.BAD]
