import numpy as np
import pytest

from sdfmap.geometry import AxisBox, Frame, Plane, Pose, Scene, Sphere, analytic_sdf
from sdfmap.sensor import (
    DepthCameraModel,
    EmptyFrameError,
    LidarModel,
    Trajectory,
    load_dataset,
    load_frame,
    read_manifest,
    render_depth_frame,
    render_lidar_frame,
    sphere_trace,
    sphere_trace_batch,
    write_dataset,
)
from conftest import make_room_scene, room_walls


def test_sphere_trace_frontal_hit(sphere_scene):
    d = sphere_trace(sphere_scene, (3.0, 0.0, 0.0), (-1.0, 0.0, 0.0), 10.0)
    assert d == pytest.approx(2.0, abs=1e-3)


def test_sphere_trace_miss(sphere_scene):
    assert sphere_trace(sphere_scene, (3.0, 0.0, 0.0), (1.0, 0.0, 0.0), 10.0) is None


def test_sphere_trace_non_unit_direction(sphere_scene):
    with pytest.raises(ValueError, match="unit"):
        sphere_trace(sphere_scene, (3.0, 0.0, 0.0), (-2.0, 0.0, 0.0), 10.0)


def _slab_intersection(origin, direction, bmin, bmax):
    """Closed-form ray/axis-box entry distance, or None."""
    with np.errstate(divide="ignore"):
        t1 = (bmin - origin) / direction
        t2 = (bmax - origin) / direction
    tnear = np.minimum(t1, t2).max()
    tfar = np.maximum(t1, t2).min()
    if tnear > tfar or tfar < 0:
        return None
    return tnear if tnear > 0 else 0.0


def test_sphere_trace_box_matches_slab_oracle(rng):
    box = AxisBox((0.2, -0.3, 0.1), (0.6, 0.8, 0.5))
    scene = Scene([box], (-5, -5, -5), (5, 5, 5))
    bmin = box.center - box.half_extents
    bmax = box.center + box.half_extents
    tested = 0
    while tested < 40:
        origin = rng.uniform(-3, 3, 3)
        if analytic_sdf(scene, origin) <= 0.1:
            continue
        target = box.center + rng.uniform(-0.4, 0.4, 3) * box.half_extents
        direction = target - origin
        direction /= np.linalg.norm(direction)
        expected = _slab_intersection(origin, direction, bmin, bmax)
        assert expected is not None
        got = sphere_trace(scene, origin, direction, 20.0)
        assert got == pytest.approx(expected, abs=1e-3)
        tested += 1


def test_depth_frame_frontoparallel_wall():
    # wall one meter ahead filling the field of view: every hit point lies at
    # perpendicular (viewing-axis) depth ~1
    scene = Scene([Plane((-1.0, 0.0, 0.0), -1.0)], (-1, -5, -5), (2, 5, 5))
    pose = Pose.look_at((0.0, 0.0, 0.0), (1.0, 0.0, 0.0))
    model = DepthCameraModel(width=16, height=16, horizontal_fov=np.deg2rad(60), max_range=10)
    frame = render_depth_frame(scene, pose, model)
    assert frame.n_points == 256
    forward = pose.rotation[:, 2]
    depth = (frame.points.astype(np.float64) - frame.sensor_origin) @ forward
    assert np.allclose(depth, 1.0, atol=1e-3)


def test_depth_frame_all_miss_errors():
    scene = Scene([Sphere((100.0, 0.0, 0.0), 1.0)], (-200, -200, -200), (200, 200, 200))
    pose = Pose.look_at((0.0, 0.0, 0.0), (-1.0, 0.0, 0.0))
    with pytest.raises(EmptyFrameError, match="empty frame"):
        render_depth_frame(scene, pose, DepthCameraModel(width=16, height=16, max_range=5.0))


def test_depth_frame_points_on_zero_level_set():
    scene = make_room_scene()
    pose = Pose.look_at((2.0, 0.0, 1.5), (0.0, 0.0, 1.2))
    model = DepthCameraModel(width=64, height=64)
    frame = render_depth_frame(scene, pose, model)
    vals = analytic_sdf(scene, frame.points.astype(np.float64))
    assert np.abs(vals).max() <= 1e-3


def test_ray_segments_do_not_cross_surfaces(rng):
    scene = make_room_scene()
    pose = Pose.look_at((1.5, 1.0, 1.5), (-1.0, -1.0, 1.0))
    model = DepthCameraModel(width=16, height=16)
    frame = render_depth_frame(scene, pose, model)
    origin = frame.sensor_origin
    pts = frame.points.astype(np.float64)
    for frac in (0.1, 0.35, 0.6, 0.85, 0.99):
        checkpoints = origin + frac * (pts - origin)
        assert analytic_sdf(scene, checkpoints).min() > 0


def test_lidar_single_ring_square_room():
    scene = Scene(room_walls((-3, -3, 0), (3, 3, 3)), (-3, -3, 0), (3, 3, 3))
    pose = Pose(np.eye(3), (0.0, 0.0, 1.2))
    model = LidarModel(channels=1, horizontal_steps=360, vertical_fov=0.0, max_range=20.0)
    frame = render_lidar_frame(scene, pose, model)
    assert frame.n_points == 360
    rel = frame.points.astype(np.float64) - frame.sensor_origin
    ranges = np.linalg.norm(rel, axis=1)
    az = np.arctan2(rel[:, 1], rel[:, 0])
    with np.errstate(divide="ignore"):
        expected = np.minimum(
            3.0 / np.maximum(np.abs(np.cos(az)), 1e-12),
            3.0 / np.maximum(np.abs(np.sin(az)), 1e-12),
        )
    assert np.allclose(ranges, expected, atol=1e-3)


def test_lidar_point_count_bound():
    scene = make_room_scene()
    pose = Pose(np.eye(3), (0.0, 0.0, 1.5))
    model = LidarModel(channels=16, horizontal_steps=128)
    frame = render_lidar_frame(scene, pose, model)
    assert frame.n_points <= 16 * 128


def test_lidar_all_miss_errors():
    scene = Scene([Sphere((500.0, 0.0, 0.0), 0.5)], (-600, -600, -600), (600, 600, 600))
    pose = Pose(np.eye(3), (0.0, 0.0, 0.0))
    with pytest.raises(EmptyFrameError):
        render_lidar_frame(scene, pose, LidarModel(channels=4, horizontal_steps=16, max_range=10.0))


def test_trajectory_step_bound():
    poses = [Pose(np.eye(3), (0, 0, 0)), Pose(np.eye(3), (1.0, 0, 0))]
    with pytest.raises(ValueError, match="max_step"):
        Trajectory(poses)
    Trajectory(poses, max_step=1.5)  # explicit relaxation is fine


def _synthetic_frames(rng, n=3):
    frames = []
    for i in range(n):
        pts = rng.uniform(-2, 2, (rng.integers(10, 40), 3)).astype(np.float32)
        frames.append(Frame(sensor_origin=rng.uniform(-1, 1, 3), points=pts, index=i))
    return frames


def test_dataset_round_trip_bit_exact(tmp_path, rng):
    frames = _synthetic_frames(rng)
    manifest = write_dataset(frames, tmp_path / "ds")
    loaded, poses = load_dataset(manifest)
    assert len(loaded) == len(frames)
    for a, b in zip(frames, loaded):
        assert a.index == b.index
        assert np.array_equal(a.points, b.points)
        assert a.points.dtype == b.points.dtype
        assert np.array_equal(a.sensor_origin, b.sensor_origin)


def test_dataset_missing_points_file(tmp_path, rng):
    frames = _synthetic_frames(rng)
    manifest = write_dataset(frames, tmp_path / "ds")
    victim = tmp_path / "ds" / "frame_00001.xyz"
    victim.unlink()
    records = read_manifest(manifest)
    with pytest.raises(FileNotFoundError, match="frame_00001.xyz"):
        load_frame(records[1], tmp_path / "ds")


def test_dataset_nan_points_rejected(tmp_path, rng):
    frames = _synthetic_frames(rng)
    manifest = write_dataset(frames, tmp_path / "ds")
    bad = np.array([[np.nan, 0, 0]], dtype="<f4")
    path = tmp_path / "ds" / "frame_00000.xyz"
    path.write_bytes(bad.tobytes())
    records = read_manifest(manifest)
    records[0].num_points = 1
    with pytest.raises(ValueError, match="non-finite"):
        load_frame(records[0], tmp_path / "ds")


def test_dataset_truncated_file(tmp_path, rng):
    frames = _synthetic_frames(rng)
    manifest = write_dataset(frames, tmp_path / "ds")
    path = tmp_path / "ds" / "frame_00002.xyz"
    path.write_bytes(path.read_bytes()[:-5])
    records = read_manifest(manifest)
    with pytest.raises(ValueError, match="truncated|expected"):
        load_frame(records[2], tmp_path / "ds")


def test_manifest_malformed(tmp_path):
    bad = tmp_path / "manifest.json"
    bad.write_text("{not json")
    with pytest.raises(ValueError, match="malformed"):
        read_manifest(bad)


def test_camera_model_validation():
    with pytest.raises(ValueError):
        DepthCameraModel(width=4, height=16)
    with pytest.raises(ValueError):
        DepthCameraModel(horizontal_fov=3.5)
    with pytest.raises(ValueError):
        LidarModel(channels=0)


def test_sphere_trace_batch_matches_scalar(sphere_scene, rng):
    dirs = rng.normal(size=(20, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.tile(np.array([3.0, 0.0, 0.0]), (20, 1))
    t, hit = sphere_trace_batch(sphere_scene, origins, dirs, 10.0)
    for k in range(20):
        single = sphere_trace(sphere_scene, origins[k], dirs[k], 10.0)
        if hit[k]:
            assert single == pytest.approx(t[k])
        else:
            assert single is None
