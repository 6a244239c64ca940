"""
Исследование здания: внешний контур, раздутие, точки обхода и поиск входа
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, List, Optional, Protocol, Sequence, Union

import numpy as np
import shapely
from scipy.spatial import ConvexHull
from shapely.geometry import Polygon as ShapelyPolygon

from geometry import (
    Polygon, ensure_ccw, point_at_arclength, ring_is_simple, ring_perimeter, segments_cross
)
from globals import EXPLORE_CONFIG
from osm_core import Address, GeoPoint, OsmDocument, building_parts, normalize_token

logger = logging.getLogger(__name__)


class ExploreError(Exception):
    """Базовая ошибка режима исследования"""


class DegenerateGeometry(ExploreError):
    pass


class InflationError(ExploreError):
    pass


@dataclass(frozen=True)
class DoorObservation:
    house_number: str
    unit: str
    position: GeoPoint
    confidence: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"Уверенность вне [0, 1]: {self.confidence}")


class DoorSensor(Protocol):
    def observe(self, pose: Any) -> List[DoorObservation]:
        ...


@dataclass(frozen=True)
class SearchPolygon:
    ring: np.ndarray
    margin: float
    source_id: Optional[int] = None

    @property
    def perimeter(self) -> float:
        return ring_perimeter(self.ring)

    def to_shapely(self) -> ShapelyPolygon:
        return ShapelyPolygon(self.ring)


@dataclass(frozen=True)
class Waypoint:
    position: np.ndarray
    heading: float


@dataclass
class WaypointRing:
    waypoints: List[Waypoint]
    spacing: float
    cursor: int = 0

    def __len__(self) -> int:
        return len(self.waypoints)


@dataclass(frozen=True)
class Exhausted:
    """Все точки обхода посещены, вход не найден"""
    visited: int


# --- контур ---

def _covers(ring: np.ndarray, points: np.ndarray, cover=None) -> bool:
    hull = ShapelyPolygon(ring).buffer(1e-9)
    if not bool(np.all(shapely.covers(hull, shapely.points(points)))):
        return False
    return cover is None or bool(hull.covers(cover))


def _knn_hull(points: np.ndarray, k: int) -> Optional[np.ndarray]:
    n = len(points)
    first = int(np.lexsort((points[:, 0], points[:, 1]))[0])
    hull = [first]
    available = set(range(n)) - {first}
    current = first
    back = np.array([-1.0, 0.0])
    for step in range(n + 1):
        if step == 3:
            available.add(first)
        pool = sorted(available, key=lambda i: (np.linalg.norm(points[i] - points[current]), i))[:k]
        angles = []
        for i in pool:
            d = points[i] - points[current]
            cw = (math.atan2(back[1], back[0]) - math.atan2(d[1], d[0])) % (2.0 * math.pi)
            angles.append((-cw, i))
        chosen = None
        for _, i in sorted(angles):
            edge = (points[current], points[i])
            crossed = any(
                segments_cross(edge[0], edge[1], points[hull[j]], points[hull[j + 1]])
                for j in range(len(hull) - 2)
            )
            if not crossed:
                chosen = i
                break
        if chosen is None:
            return None
        if chosen == first:
            return points[hull]
        hull.append(chosen)
        available.discard(chosen)
        back = points[current] - points[chosen]
        current = chosen
    return None


def concave_hull(points, k: Optional[int] = None, cover=None) -> np.ndarray:
    """
    Вогнутая оболочка методом k ближайших соседей

    k растёт, пока кольцо не станет простым и не охватит все точки
    (и геометрию cover, если задана). При k = n берётся выпуклая оболочка.
    """
    pts = np.unique(np.asarray(points, dtype=float).reshape(-1, 2), axis=0)
    n = len(pts)
    if n < 3 or np.linalg.matrix_rank(pts - pts.mean(axis=0), tol=1e-9) < 2:
        raise DegenerateGeometry(f"Недостаточно точек для оболочки: {n}")
    kk = max(k or EXPLORE_CONFIG["hull_k"], 3)
    while kk < n:
        ring = _knn_hull(pts, kk)
        if ring is not None and len(ring) >= 3 and ring_is_simple(ring) and _covers(ring, pts, cover):
            return ensure_ccw(ring)
        kk += 1
    logger.debug("Вогнутая оболочка не построена, используется выпуклая")
    return ensure_ccw(pts[ConvexHull(pts).vertices])


def outer_boundary(parts: Sequence[Polygon]) -> Polygon:
    """Внешний контур здания без внутренних элементов"""
    if not parts:
        raise DegenerateGeometry("Нет частей здания")
    if len(parts) == 1:
        return Polygon(ensure_ccw(parts[0].outer), [])
    points = np.concatenate([p.outer for p in parts])
    union = shapely.union_all([ShapelyPolygon(p.outer) for p in parts])
    return Polygon(concave_hull(points, cover=union), [])


# --- раздутие ---

def _offset_ring(ring: np.ndarray, margin: float, join: str, miter_limit: float) -> np.ndarray:
    out = []
    n = len(ring)
    for i in range(n):
        p0, p1, p2 = ring[i - 1], ring[i], ring[(i + 1) % n]
        e1 = p1 - p0
        e2 = p2 - p1
        n1 = np.array([e1[1], -e1[0]]) / np.linalg.norm(e1)
        n2 = np.array([e2[1], -e2[0]]) / np.linalg.norm(e2)
        turn = e1[0] * e2[1] - e1[1] * e2[0]
        bisector = n1 + n2
        norm = np.linalg.norm(bisector)
        if norm < 1e-12:
            out.extend([p1 + n1 * margin, p1 + n2 * margin])
            continue
        bisector /= norm
        cos_half = float(np.dot(bisector, n1))
        if abs(turn) < 1e-12:
            out.append(p1 + n1 * margin)
        elif turn < 0:
            # вогнутая вершина
            out.append(p1 + bisector * margin / cos_half)
        elif join == "miter" and 1.0 / cos_half <= miter_limit:
            out.append(p1 + bisector * margin / cos_half)
        else:
            out.extend([p1 + n1 * margin, p1 + n2 * margin])
    return np.array(out)


def inflate(polygon: Polygon, margin: Optional[float] = None, source_id: Optional[int] = None) -> SearchPolygon:
    """Смещение контура наружу на margin с митровыми углами (лимит 2), иначе срез"""
    margin = EXPLORE_CONFIG["inflation_margin"] if margin is None else margin
    if not margin > 0:
        raise ValueError("Отступ должен быть положительным")
    ring = ensure_ccw(polygon.outer)
    original = ShapelyPolygon(ring)
    for join in ("miter", "bevel"):
        out = _offset_ring(ring, margin, join, EXPLORE_CONFIG["miter_limit"])
        if ring_is_simple(out) and ShapelyPolygon(out).buffer(1e-9).covers(original):
            return SearchPolygon(ensure_ccw(out), margin, source_id)
        logger.debug(f"Раздутие с углами {join} некорректно")
    raise InflationError(f"Не удалось раздуть контур на {margin} м")


# --- точки обхода ---

def sample_waypoints(search_polygon: SearchPolygon, spacing: Optional[float] = None,
                     centroid=None, robot_xy=None) -> WaypointRing:
    """Равномерная выборка по периметру против часовой стрелки, курс на центроид"""
    spacing = EXPLORE_CONFIG["waypoint_spacing"] if spacing is None else spacing
    if not spacing > 0:
        raise ValueError("Шаг должен быть положительным")
    ring = search_polygon.ring
    if centroid is None:
        centroid = np.asarray(search_polygon.to_shapely().centroid.coords[0])
    perimeter = ring_perimeter(ring)
    n = 1 if spacing >= perimeter else math.floor(perimeter / spacing)

    start = 0
    if robot_xy is not None:
        start = int(np.argmin(np.linalg.norm(ring - np.asarray(robot_xy, dtype=float), axis=1)))
    rolled = np.roll(ring, -start, axis=0)

    waypoints = []
    for k in range(n):
        p = point_at_arclength(rolled, k * perimeter / n)
        heading = math.atan2(float(centroid[1]) - float(p[1]), float(centroid[0]) - float(p[0]))
        waypoints.append(Waypoint(p, heading))
    return WaypointRing(waypoints, perimeter / n)


def plan_exploration(doc: OsmDocument, building_id: int, robot_xy=None,
                     margin: Optional[float] = None, spacing: Optional[float] = None) -> WaypointRing:
    """Кольцо точек обхода вокруг здания из карты"""
    parts = building_parts(doc, building_id)
    boundary = outer_boundary(parts)
    search = inflate(boundary, margin, source_id=building_id)
    ring = sample_waypoints(search, spacing, boundary.centroid, robot_xy)
    logger.info(f"🔎 Обход здания {building_id}: {len(ring)} точек с шагом {ring.spacing:.2f} м")
    return ring


# --- поиск входа ---

def matches_target(observation: DoorObservation, target: Address) -> bool:
    if observation.confidence < EXPLORE_CONFIG["match_confidence"]:
        return False
    if normalize_token(observation.house_number) != target.building:
        return False
    return target.unit is None or normalize_token(observation.unit) == target.unit


def search_door(ring: WaypointRing, sensor: DoorSensor, target: Address,
                move: Callable[[Waypoint], Any]) -> Union[DoorObservation, Exhausted]:
    """
    Обход точек по порядку до первого подходящего входа.
    Обход продолжается с ring.cursor: повторный вызов на том же кольце
    досматривает оставшиеся точки, исчерпанное кольцо сразу даёт Exhausted(0)
    """
    if not ring.waypoints:
        raise ValueError("Пустое кольцо точек обхода")
    visited = 0
    while ring.cursor < len(ring.waypoints):
        waypoint = ring.waypoints[ring.cursor]
        ring.cursor += 1
        pose = move(waypoint)
        visited += 1
        for observation in sensor.observe(pose):
            if matches_target(observation, target):
                logger.info(f"🚪 Вход {target.label()} найден у точки {ring.cursor - 1}")
                return observation
    logger.info(f"Вход {target.label()} не найден после {visited} точек")
    return Exhausted(visited)
