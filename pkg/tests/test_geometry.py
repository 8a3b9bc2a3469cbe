import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdfmap.geometry import (
    AxisBox,
    Frame,
    Plane,
    Pose,
    Scene,
    Sphere,
    analytic_grad,
    analytic_sdf,
    brute_force_min_distance,
    load_scene,
    min_distances_to_cloud,
    save_scene,
    squared_distances_to_cloud,
)
from conftest import make_room_scene


def test_sphere_sdf_values(sphere_scene):
    assert analytic_sdf(sphere_scene, (2.0, 0.0, 0.0)) == pytest.approx(1.0, abs=1e-12)
    assert analytic_sdf(sphere_scene, (0.0, 0.0, 0.0)) == pytest.approx(-1.0, abs=1e-12)


def test_box_sdf_against_dense_surface_sampling():
    # oracle: nearest point on the box surface found by densely sampling all
    # six faces; expected value for the corner query is sqrt(2)
    box = AxisBox((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    scene = Scene([box], (-3, -3, -3), (3, 3, 3))
    q = np.array([2.0, 2.0, 0.0])
    lin = np.linspace(-1.0, 1.0, 201)
    faces = []
    for axis in range(3):
        for side in (-1.0, 1.0):
            a, b = np.meshgrid(lin, lin)
            pts = np.zeros((a.size, 3))
            pts[:, axis] = side
            pts[:, (axis + 1) % 3] = a.ravel()
            pts[:, (axis + 2) % 3] = b.ravel()
            faces.append(pts)
    surface = np.concatenate(faces)
    oracle = np.sqrt(squared_distances_to_cloud(surface, q[None, :])[0].min())
    val = analytic_sdf(scene, q)
    assert val == pytest.approx(np.sqrt(2.0), abs=1e-12)
    assert val == pytest.approx(oracle, abs=2e-2)  # sampling resolution bound


def test_box_sdf_inside_outside():
    box = AxisBox((0.0, 0.0, 0.0), (1.0, 2.0, 0.5))
    scene = Scene([box], (-3, -3, -3), (3, 3, 3))
    assert analytic_sdf(scene, (0.0, 0.0, 0.0)) == pytest.approx(-0.5, abs=1e-12)
    assert analytic_sdf(scene, (1.5, 0.0, 0.0)) == pytest.approx(0.5, abs=1e-12)


def test_plane_halfspace():
    scene = Scene([Plane((0.0, 0.0, 1.0), 0.0)], (-1, -1, -1), (1, 1, 1))
    assert analytic_sdf(scene, (0.3, -0.2, 0.7)) == pytest.approx(0.7)
    assert analytic_sdf(scene, (0.0, 0.0, -0.2)) == pytest.approx(-0.2)


def test_union_is_min_and_lower_bound(rng):
    scene = make_room_scene()
    pts = rng.uniform(scene.bounds_min, scene.bounds_max, size=(500, 3))
    union = scene.sdf(pts)
    per_prim = np.stack([p.sdf(pts) for p in scene.primitives])
    assert np.array_equal(union, per_prim.min(axis=0))
    assert (union[None, :] <= per_prim + 1e-12).all()


def test_sdf_is_one_lipschitz(rng):
    scene = make_room_scene()
    a = rng.uniform(scene.bounds_min, scene.bounds_max, size=(2000, 3))
    b = rng.uniform(scene.bounds_min, scene.bounds_max, size=(2000, 3))
    lhs = np.abs(scene.sdf(a) - scene.sdf(b))
    rhs = np.linalg.norm(a - b, axis=1)
    assert (lhs <= rhs + 1e-9).all()


def test_gradient_radial_sphere(sphere_scene):
    g, ok = analytic_grad(sphere_scene, (2.0, 0.0, 0.0))
    assert ok
    assert np.allclose(g, [1.0, 0.0, 0.0], atol=1e-6)
    g, ok = analytic_grad(sphere_scene, (0.0, 0.0, 0.5))
    assert ok
    assert np.allclose(g, [0.0, 0.0, 1.0], atol=1e-6)


def test_gradient_flags_medial_axis():
    scene = Scene(
        [Sphere((1.0, 0.0, 0.0), 0.5), Sphere((-1.0, 0.0, 0.0), 0.5)],
        (-2, -2, -2),
        (2, 2, 2),
    )
    _, ok = analytic_grad(scene, (0.0, 0.0, 0.0))
    assert not ok


def test_gradient_unit_norm_where_reliable(rng):
    scene = make_room_scene()
    pts = rng.uniform(scene.bounds_min + 0.01, scene.bounds_max - 0.01, size=(400, 3))
    dirs, ok = analytic_grad(scene, pts)
    norms = np.linalg.norm(dirs[ok], axis=1)
    assert np.allclose(norms, 1.0, atol=1e-4)


def test_brute_force_examples():
    assert brute_force_min_distance([(1.0, 0.0, 0.0)], (0.0, 0.0, 0.0)) == (1.0, 0)
    d, i = brute_force_min_distance([(1, 0, 0), (0, 0.5, 0)], (0, 0, 0))
    assert (d, i) == (0.5, 1)


def test_brute_force_matches_exhaustive_scan(rng):
    pts = rng.random((1000, 3))
    q = np.zeros(3)
    d, i = brute_force_min_distance(pts, q)
    d2 = squared_distances_to_cloud(pts, q[None, :])[0]
    assert i == int(np.argmin(d2))
    assert d == np.sqrt(d2.min())


def test_brute_force_tie_takes_lowest_index():
    pts = [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (-1.0, 0.0, 0.0)]
    _, i = brute_force_min_distance(pts, (0.0, 0.0, 0.0))
    assert i == 0


def test_brute_force_zero_on_members(rng):
    pts = rng.random((50, 3))
    for k in (0, 13, 49):
        d, i = brute_force_min_distance(pts, pts[k])
        assert d == 0.0 and i == k


def test_brute_force_empty_cloud_errors():
    with pytest.raises(ValueError, match="empty point cloud"):
        brute_force_min_distance(np.empty((0, 3)), (0, 0, 0))


def test_min_distances_chunking_invariant(rng):
    cloud = rng.random((700, 3))
    queries = rng.random((300, 3))
    a = min_distances_to_cloud(cloud, queries, chunk=7)
    b = min_distances_to_cloud(cloud, queries, chunk=1000)
    assert np.array_equal(a, b)


def test_pose_validation():
    with pytest.raises(ValueError, match="orthonormal"):
        Pose(np.eye(3) * 1.1, (0, 0, 0))
    refl = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ValueError, match="proper"):
        Pose(refl, (0, 0, 0))


def test_pose_look_at_properties():
    pose = Pose.look_at((1.0, 2.0, 1.0), (0.0, 0.0, 1.0))
    fwd = pose.rotation[:, 2]
    expected = np.array([-1.0, -2.0, 0.0]) / np.sqrt(5.0)
    assert np.allclose(fwd, expected)
    assert np.isclose(np.linalg.det(pose.rotation), 1.0)
    # transforming the local forward axis lands on the target direction
    world = pose.transform_points((0.0, 0.0, np.sqrt(5.0)))
    assert np.allclose(world, [0.0, 0.0, 1.0], atol=1e-12)


def test_frame_validation(rng):
    with pytest.raises(ValueError):
        Frame((0, 0, 0), np.empty((0, 3)))
    with pytest.raises(ValueError, match="finite"):
        Frame((0, 0, 0), [[np.nan, 0, 0]])
    with pytest.raises(ValueError, match="sensor origin"):
        Frame((1.0, 2.0, 3.0), [[1.0, 2.0, 3.0], [0.0, 0.0, 1.0]])


def test_scene_json_round_trip(tmp_path):
    scene = make_room_scene()
    path = tmp_path / "scene.json"
    save_scene(scene, path)
    loaded = load_scene(path)
    assert len(loaded.primitives) == len(scene.primitives)
    pts = np.random.default_rng(0).uniform(scene.bounds_min, scene.bounds_max, (200, 3))
    assert np.allclose(scene.sdf(pts), loaded.sdf(pts), atol=1e-15)


def test_scene_json_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"primitives": [{"type": "torus"}], "bounds": {"min": [0,0,0], "max": [1,1,1]}}')
    with pytest.raises(ValueError, match="torus"):
        load_scene(bad)
    bad.write_text('{"bounds": {"min": [0,0,0], "max": [1,1,1]}}')
    with pytest.raises(ValueError, match="primitives"):
        load_scene(bad)


def test_primitive_validation():
    with pytest.raises(ValueError):
        Sphere((0, 0, 0), -1.0)
    with pytest.raises(ValueError):
        AxisBox((0, 0, 0), (1.0, 0.0, 1.0))
    with pytest.raises(ValueError, match="unit"):
        Plane((1.0, 1.0, 0.0), 0.0)
    with pytest.raises(ValueError, match="degenerate"):
        Scene([Sphere((0, 0, 0), 1.0)], (0, 0, 0), (0, 1, 1))


@settings(max_examples=100, deadline=None)
@given(
    x=st.floats(-5, 5),
    y=st.floats(-5, 5),
    z=st.floats(-5, 5),
    r=st.floats(0.1, 3.0),
)
def test_sphere_sdf_formula(x, y, z, r):
    scene = Scene([Sphere((0.0, 0.0, 0.0), r)], (-9, -9, -9), (9, 9, 9))
    expected = np.sqrt(x * x + y * y + z * z) - r
    assert analytic_sdf(scene, (x, y, z)) == pytest.approx(expected, abs=1e-12)
