"""
Планарная геометрия: кольца, полигоны, отрезки и лучи
Координаты локальные, в метрах
"""

import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
import shapely
from shapely.geometry import LinearRing
from shapely.geometry import Polygon as ShapelyPolygon

logger = logging.getLogger(__name__)


def open_ring(coords) -> np.ndarray:
    """Кольцо без повторной замыкающей вершины"""
    ring = np.asarray(coords, dtype=float).reshape(-1, 2)
    if len(ring) > 1 and np.array_equal(ring[0], ring[-1]):
        ring = ring[:-1]
    return ring


def signed_area(ring: np.ndarray) -> float:
    """Формула шнурования; > 0 для обхода против часовой стрелки"""
    x = ring[:, 0]
    y = ring[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def ensure_ccw(ring: np.ndarray) -> np.ndarray:
    return ring if signed_area(ring) > 0 else ring[::-1].copy()


def ensure_cw(ring: np.ndarray) -> np.ndarray:
    return ring if signed_area(ring) < 0 else ring[::-1].copy()


def ring_is_simple(ring: np.ndarray) -> bool:
    """Кольцо без самопересечений с ненулевой площадью"""
    if len(np.unique(ring, axis=0)) < 3:
        return False
    try:
        return bool(LinearRing(ring).is_simple) and abs(signed_area(ring)) > 0.0
    except (ValueError, shapely.errors.ShapelyError):
        return False


def ring_edges(ring: np.ndarray) -> np.ndarray:
    """Рёбра замкнутого кольца, форма (n, 2, 2)"""
    return np.stack([ring, np.roll(ring, -1, axis=0)], axis=1)


def ring_perimeter(ring: np.ndarray) -> float:
    edges = ring_edges(ring)
    return float(np.sum(np.linalg.norm(edges[:, 1] - edges[:, 0], axis=1)))


def ring_centroid(ring: np.ndarray) -> np.ndarray:
    """Центроид площади кольца"""
    x = ring[:, 0]
    y = ring[:, 1]
    xn = np.roll(x, -1)
    yn = np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * np.sum(cross)
    if abs(area) < 1e-12:
        return ring.mean(axis=0)
    cx = np.sum((x + xn) * cross) / (6.0 * area)
    cy = np.sum((y + yn) * cross) / (6.0 * area)
    return np.array([cx, cy])


@dataclass
class Polygon:
    """Полигон: внешнее кольцо CCW и дыры CW, без замыкающих вершин"""
    outer: np.ndarray
    holes: List[np.ndarray] = field(default_factory=list)

    @property
    def area(self) -> float:
        return abs(signed_area(self.outer)) - sum(abs(signed_area(h)) for h in self.holes)

    @property
    def centroid(self) -> np.ndarray:
        return ring_centroid(self.outer)

    @property
    def perimeter(self) -> float:
        return ring_perimeter(self.outer)

    def edges(self) -> np.ndarray:
        """Все рёбра, включая рёбра дыр"""
        parts = [ring_edges(self.outer)] + [ring_edges(h) for h in self.holes]
        return np.concatenate(parts, axis=0)

    def to_shapely(self) -> ShapelyPolygon:
        return ShapelyPolygon(self.outer, [h for h in self.holes])

    def bbox(self) -> Tuple[float, float, float, float]:
        mn = self.outer.min(axis=0)
        mx = self.outer.max(axis=0)
        return float(mn[0]), float(mn[1]), float(mx[0]), float(mx[1])


def points_in_polygon(points: np.ndarray, polygon) -> np.ndarray:
    """Маска точек строго внутри полигона"""
    shape = polygon.to_shapely() if isinstance(polygon, Polygon) else polygon
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    return shapely.contains_xy(shape, points[:, 0], points[:, 1])


def closest_on_segments(points: np.ndarray, segments: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Ближайшие точки на отрезках для каждой пары (точка, отрезок)

    Возвращает расстояния (n, m), параметр t в [0, 1] (n, m) и сами точки (n, m, 2)
    """
    a = segments[:, 0, :][None, :, :]
    d = (segments[:, 1, :] - segments[:, 0, :])[None, :, :]
    p = points[:, None, :]
    len2 = np.sum(d * d, axis=2)
    len2 = np.where(len2 > 0.0, len2, 1.0)
    t = np.clip(np.sum((p - a) * d, axis=2) / len2, 0.0, 1.0)
    closest = a + t[:, :, None] * d
    dist = np.linalg.norm(p - closest, axis=2)
    return dist, t, closest


def ray_hits(origin: np.ndarray, directions: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """
    Параметр пересечения лучей с отрезками, форма (k, m)
    np.inf там, где пересечения нет
    """
    if len(segments) == 0:
        return np.full((len(directions), 0), np.inf)
    a = segments[:, 0, :]
    e = segments[:, 1, :] - a
    d = directions[:, None, :]
    denom = d[:, :, 0] * e[None, :, 1] - d[:, :, 1] * e[None, :, 0]
    w = a[None, :, :] - origin[None, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[:, :, 0] * e[None, :, 1] - w[:, :, 1] * e[None, :, 0]) / denom
        u = (w[:, :, 0] * d[:, :, 1] - w[:, :, 1] * d[:, :, 0]) / denom
    valid = (np.abs(denom) > 1e-12) & (t > 0.0) & (u >= 0.0) & (u <= 1.0)
    return np.where(valid, t, np.inf)


def segment_blocked(a: np.ndarray, b: np.ndarray, segments: np.ndarray) -> bool:
    """Пересекает ли отрезок a-b хотя бы один из отрезков"""
    if len(segments) == 0:
        return False
    direction = (b - a)[None, :]
    t = ray_hits(a, direction, segments)
    return bool(np.any(t[0] <= 1.0))


def segments_cross(p1, p2, q1, q2) -> bool:
    """Собственное пересечение двух отрезков (общие концы не считаются)"""
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    if (np.array_equal(p1, q1) or np.array_equal(p1, q2)
            or np.array_equal(p2, q1) or np.array_equal(p2, q2)):
        return False
    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    if ((d1 > 0 > d2) or (d1 < 0 < d2)) and ((d3 > 0 > d4) or (d3 < 0 < d4)):
        return True

    def on_segment(a, b, c):
        return (min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
                and min(a[1], b[1]) <= c[1] <= max(a[1], b[1]))

    # коллинеарные наложения
    if d1 == 0 and on_segment(q1, q2, p1):
        return True
    if d2 == 0 and on_segment(q1, q2, p2):
        return True
    if d3 == 0 and on_segment(p1, p2, q1):
        return True
    if d4 == 0 and on_segment(p1, p2, q2):
        return True
    return False


def point_at_arclength(ring: np.ndarray, s: float) -> np.ndarray:
    """Точка на замкнутом кольце на длине дуги s от вершины 0"""
    edges = ring_edges(ring)
    lengths = np.linalg.norm(edges[:, 1] - edges[:, 0], axis=1)
    total = float(np.sum(lengths))
    s = s % total
    cumulative = np.concatenate([[0.0], np.cumsum(lengths)])
    i = int(np.searchsorted(cumulative, s, side="right") - 1)
    i = min(max(i, 0), len(edges) - 1)
    frac = (s - cumulative[i]) / lengths[i] if lengths[i] > 0 else 0.0
    return edges[i, 0] + frac * (edges[i, 1] - edges[i, 0])
