import math

import numpy as np
import pytest
import shapely
from scipy.spatial import ConvexHull
from shapely.geometry import Polygon as ShapelyPolygon

from explore import (
    DegenerateGeometry, DoorObservation, Exhausted, SearchPolygon, concave_hull, inflate, matches_target,
    outer_boundary, plan_exploration, sample_waypoints, search_door
)
from geoloc import Pose2
from geometry import Polygon, points_in_polygon
from osm_core import Address, GeoPoint, building_parts
from simworld import build_world, sense_door

SQUARE = Polygon(np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]]))
TARGET = Address("Green Town", None, "12", "2")


def rect(x0, y0, x1, y1):
    return Polygon(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float))


def random_inside(polygon, rng, count):
    x0, y0, x1, y1 = polygon.bbox()
    points = []
    while len(points) < count:
        candidates = rng.uniform((x0, y0), (x1, y1), size=(count, 2))
        points.extend(candidates[points_in_polygon(candidates, polygon)])
    return np.array(points[:count])


class ScriptedSensor:
    """Отдаёт наблюдение только на заданном по счёту запросе"""

    def __init__(self, hit_at=None, observation=None):
        self.hit_at = hit_at
        self.observation = observation
        self.queries = 0

    def observe(self, pose):
        self.queries += 1
        return [self.observation] if self.queries == self.hit_at else []


class TestOuterBoundary:
    def test_single_part(self):
        assert np.allclose(outer_boundary([SQUARE]).outer, SQUARE.outer)

    def test_convex_cloud(self):
        rng = np.random.default_rng(4)
        points = rng.uniform(0, 50, size=(40, 2))
        hull = concave_hull(points, k=len(points))
        assert ShapelyPolygon(hull).area == pytest.approx(ConvexHull(points).volume)

    def test_adjacent_rectangles(self):
        parts = [rect(0, 0, 10, 6), rect(10, 0, 16, 12)]
        boundary = outer_boundary(parts)
        union = shapely.union_all([p.to_shapely() for p in parts])
        assert boundary.area >= union.area - 1e-9
        rng = np.random.default_rng(9)
        samples = np.concatenate([random_inside(p, rng, 500) for p in parts])
        assert bool(np.all(shapely.covers(boundary.to_shapely().buffer(1e-9), shapely.points(samples))))

    def test_degenerate(self):
        with pytest.raises(DegenerateGeometry):
            concave_hull([[0, 0], [1, 1], [2, 2]])
        with pytest.raises(DegenerateGeometry):
            outer_boundary([])


class TestInflate:
    def test_square_miter(self):
        inflated = inflate(SQUARE, 2.0)
        assert inflated.to_shapely().area == pytest.approx(196.0)
        assert inflated.ring.min(axis=0) == pytest.approx([-2.0, -2.0])
        assert inflated.ring.max(axis=0) == pytest.approx([12.0, 12.0])

    def test_small_margin(self):
        assert inflate(SQUARE, 1e-6).to_shapely().area == pytest.approx(100.0, abs=1e-3)

    def test_contains_original(self, town):
        rng = np.random.default_rng(1)
        for building_id in (110, 120, 130):
            footprint = building_parts(town, building_id)[0]
            inflated = inflate(footprint, 2.0).to_shapely()
            samples = random_inside(footprint, rng, 1000)
            assert bool(np.all(shapely.contains_xy(inflated, samples[:, 0], samples[:, 1])))

    def test_invalid_margin(self):
        with pytest.raises(ValueError):
            inflate(SQUARE, 0.0)


class TestWaypoints:
    def test_count(self):
        ring = sample_waypoints(SearchPolygon(SQUARE.outer, 0.0), 5.0)
        assert len(ring) == 8
        assert ring.spacing == pytest.approx(5.0)

    def test_headings_face_centroid(self):
        centroid = np.array([5.0, 5.0])
        ring = sample_waypoints(SearchPolygon(SQUARE.outer, 0.0), 3.0, centroid)
        for w in ring.waypoints:
            assert w.heading == math.atan2(centroid[1] - w.position[1], centroid[0] - w.position[0])

    def test_clamped_to_single(self):
        assert len(sample_waypoints(SearchPolygon(SQUARE.outer, 0.0), 100.0)) == 1

    def test_starts_near_robot(self):
        ring = sample_waypoints(SearchPolygon(SQUARE.outer, 0.0), 5.0, robot_xy=(11.0, 11.0))
        assert np.allclose(ring.waypoints[0].position, [10.0, 10.0])

    def test_outside_footprint_on_boundary(self, town):
        ring = plan_exploration(town, 130, robot_xy=(0.0, 0.0))
        footprint = building_parts(town, 130)[0].to_shapely()
        inflated = inflate(building_parts(town, 130)[0], 2.0).to_shapely()
        for w in ring.waypoints:
            point = shapely.Point(w.position)
            assert not footprint.covers(point)
            assert inflated.exterior.distance(point) < 1e-6


class TestSearchDoor:
    def test_found_at_third_waypoint(self):
        ring = sample_waypoints(SearchPolygon(inflate(SQUARE, 2.0).ring, 2.0), 3.0)
        observation = DoorObservation("12", "2", GeoPoint(47.0, 8.0))
        visited = []
        sensor = ScriptedSensor(3, observation)
        found = search_door(ring, sensor, TARGET, lambda w: visited.append(w) or w)
        assert found == observation
        assert len(visited) == 3
        assert ring.cursor == 3

    def test_second_call_resumes(self):
        ring = sample_waypoints(SearchPolygon(SQUARE.outer, 0.0), 5.0)
        observation = DoorObservation("12", "3", GeoPoint(47.0, 8.0))
        first = search_door(ring, ScriptedSensor(3, DoorObservation("12", "2", GeoPoint(47.0, 8.0))),
                            TARGET, lambda w: w)
        assert first.unit == "2"
        visited = []
        rest = search_door(ring, ScriptedSensor(1, observation), TARGET, lambda w: visited.append(w) or w)
        assert rest == Exhausted(5)
        assert visited == ring.waypoints[3:]
        assert search_door(ring, ScriptedSensor(), TARGET, lambda w: w) == Exhausted(0)

    def test_exhausted(self):
        ring = sample_waypoints(SearchPolygon(SQUARE.outer, 0.0), 5.0)
        sensor = ScriptedSensor()
        result = search_door(ring, sensor, TARGET, lambda w: w)
        assert result == Exhausted(8)
        assert sensor.queries == 8

    def test_wrong_unit_ignored(self):
        ring = sample_waypoints(SearchPolygon(SQUARE.outer, 0.0), 5.0)
        sensor = ScriptedSensor(1, DoorObservation("12", "3", GeoPoint(47.0, 8.0)))
        assert isinstance(search_door(ring, sensor, TARGET, lambda w: w), Exhausted)

    def test_matching_rules(self):
        point = GeoPoint(47.0, 8.0)
        assert matches_target(DoorObservation(" 12 ", "2", point), TARGET)
        assert not matches_target(DoorObservation("12", "2", point, 0.4), TARGET)
        assert not matches_target(DoorObservation("16", "2", point), TARGET)

    def test_motion_failure_propagates(self):
        ring = sample_waypoints(SearchPolygon(SQUARE.outer, 0.0), 5.0)

        def move(waypoint):
            raise RuntimeError("stuck")

        with pytest.raises(RuntimeError):
            search_door(ring, ScriptedSensor(), TARGET, move)


def _covered(world, building_id, door):
    ring = plan_exploration(world.doc, building_id, spacing=3.0)
    rng = np.random.default_rng(0)
    for w in ring.waypoints:
        pose = Pose2(float(w.position[0]), float(w.position[1]), w.heading)
        if any(o.house_number == door.address.building for o in sense_door(world, pose, rng, 8.0, math.pi / 2, 1.0)):
            return True
    return False


class TestCoverage:
    def test_town_doors_found(self, town, town_doors):
        world = build_world(town, town_doors)
        assert all(_covered(world, door.building_id, door) for door in world.doors)

    def test_generated_doors_found(self, small_world):
        world = build_world(small_world.document, small_world.doors)
        assert len(world.doors) == len(small_world.doors)
        assert all(_covered(world, door.building_id, door) for door in world.doors)
