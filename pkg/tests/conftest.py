import numpy as np
import pytest

from sdfmap.geometry import AxisBox, Plane, Scene, Sphere


def room_walls(bounds_min, bounds_max):
    """Six half-space planes forming a closed room, normals pointing inward."""
    bmin = np.asarray(bounds_min, dtype=float)
    bmax = np.asarray(bounds_max, dtype=float)
    walls = []
    for axis in range(3):
        lo = np.zeros(3)
        lo[axis] = 1.0
        walls.append(Plane(lo, bmin[axis]))
        hi = np.zeros(3)
        hi[axis] = -1.0
        walls.append(Plane(hi, -bmax[axis]))
    return walls


def default_obstacles():
    """Three disjoint obstacles sized for the 6x6x3 m room."""
    return [
        Sphere((1.3, 0.9, 0.7), 0.5),
        AxisBox((-1.4, -0.9, 0.5), (0.45, 0.45, 0.5)),
        Sphere((-0.9, 1.5, 1.1), 0.35),
    ]


def make_room_scene(bounds_min=(-3.0, -3.0, 0.0), bounds_max=(3.0, 3.0, 3.0), obstacles=None):
    if obstacles is None:
        obstacles = default_obstacles()
    return Scene(room_walls(bounds_min, bounds_max) + list(obstacles), bounds_min, bounds_max)


@pytest.fixture
def room_scene():
    return make_room_scene()


@pytest.fixture
def sphere_scene():
    return Scene([Sphere((0.0, 0.0, 0.0), 1.0)], (-2.0, -2.0, -2.0), (2.0, 2.0, 2.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
