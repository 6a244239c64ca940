"""
Маршрутизация по дорожному графу OSM
Профили, сеточное разбиение, оверлей с шорткатами и многоуровневый Дейкстра
"""

import heapq
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from globals import PROFILES, ROUTING_CONFIG
from osm_core import GeoPoint, LocalPoint, OsmDocument, project, unproject

logger = logging.getLogger(__name__)

ONEWAY_FORWARD = {"yes", "true", "1"}
ONEWAY_REVERSE = {"-1", "reverse"}


class RoutingError(Exception):
    """Базовая ошибка маршрутизации"""


class EmptyGraph(RoutingError):
    pass


class NoRoute(RoutingError):
    pass


class SnapFailed(RoutingError):
    pass


@dataclass(frozen=True)
class Profile:
    name: str
    speeds: Mapping[str, float]

    def __post_init__(self):
        if not self.speeds:
            raise ValueError(f"Профиль {self.name}: нет разрешённых типов дорог")
        if any(not speed > 0 for speed in self.speeds.values()):
            raise ValueError(f"Профиль {self.name}: скорости должны быть положительными")

    @property
    def allowed(self) -> frozenset:
        return frozenset(self.speeds)

    @property
    def max_speed(self) -> float:
        return max(self.speeds.values())

    @classmethod
    def from_name(cls, name: str) -> "Profile":
        if name not in PROFILES:
            raise ValueError(f"Неизвестный профиль: {name}")
        return cls(name, dict(PROFILES[name]["speeds"]))


class RoadGraph:
    """
    Ориентированный дорожный граф

    Вершины упорядочены по OSM id, поэтому порядок индексов совпадает
    с порядком id и задаёт правило разрешения ничьих.
    """

    def __init__(self, node_ids: Sequence[int], xy: np.ndarray,
                 edges: Iterable[Tuple[int, int, float]], origin: Optional[GeoPoint] = None):
        order = np.argsort(np.asarray(node_ids, dtype=np.int64), kind="stable")
        remap = np.empty(len(order), dtype=np.int64)
        remap[order] = np.arange(len(order))

        self.node_ids = np.asarray(node_ids, dtype=np.int64)[order]
        self.xy = np.asarray(xy, dtype=float).reshape(-1, 2)[order]
        self.origin = origin or GeoPoint(0.0, 0.0)
        self.index_of = {int(node_id): i for i, node_id in enumerate(self.node_ids)}

        src, dst, length, cost = [], [], [], []
        for u, v, speed in edges:
            u, v = int(remap[u]), int(remap[v])
            seg = float(np.linalg.norm(self.xy[v] - self.xy[u]))
            src.append(u)
            dst.append(v)
            length.append(seg)
            cost.append(seg / speed)
        self.src = np.array(src, dtype=np.int64)
        self.dst = np.array(dst, dtype=np.int64)
        self.length = np.array(length, dtype=float)
        self.cost = np.array(cost, dtype=float)

        self.out_edges: List[List[int]] = [[] for _ in range(len(self.node_ids))]
        for e in range(len(self.src)):
            self.out_edges[self.src[e]].append(e)

    @property
    def n_vertices(self) -> int:
        return len(self.node_ids)

    @property
    def n_edges(self) -> int:
        return len(self.src)

    def vertex_point(self, index: int) -> LocalPoint:
        return LocalPoint(float(self.xy[index, 0]), float(self.xy[index, 1]))


@dataclass(frozen=True)
class Partition:
    cell_of: np.ndarray
    cell_count: int
    grid: Tuple[int, int] = (1, 1)


@dataclass(frozen=True)
class Shortcut:
    src: int
    dst: int
    cost: float
    length: float
    edges: Tuple[int, ...]


@dataclass
class OverlayGraph:
    partition: Partition
    boundary: Dict[int, List[int]] = field(default_factory=dict)
    shortcuts: Dict[int, List[Shortcut]] = field(default_factory=dict)
    shortcuts_from: Dict[int, List[Shortcut]] = field(default_factory=dict)

    @property
    def shortcut_count(self) -> int:
        return sum(len(s) for s in self.shortcuts.values())


@dataclass(frozen=True)
class Route:
    vertices: Tuple[int, ...]
    polyline: Tuple[GeoPoint, ...]
    length: float
    cost: float
    xy: np.ndarray = field(compare=False, repr=False, default=None)


# --- построение ---

def build_road_graph(doc: OsmDocument, profile: Profile) -> RoadGraph:
    """Граф дорог, разрешённых профилем"""
    edges: List[Tuple[int, int, float]] = []
    node_ids: List[int] = []
    local_index: Dict[int, int] = {}

    def vertex(node_id: int) -> int:
        if node_id not in local_index:
            local_index[node_id] = len(node_ids)
            node_ids.append(node_id)
        return local_index[node_id]

    for way in doc.iter_kind("way"):
        highway = way.tags.get("highway")
        if highway not in profile.speeds:
            continue
        speed = profile.speeds[highway]
        oneway = way.tags.get("oneway", "no").lower()
        refs = [r for k, r in enumerate(way.refs) if k == 0 or r != way.refs[k - 1]]
        for a, b in zip(refs[:-1], refs[1:]):
            u, v = vertex(a), vertex(b)
            if oneway in ONEWAY_REVERSE:
                edges.append((v, u, speed))
            else:
                edges.append((u, v, speed))
                if oneway not in ONEWAY_FORWARD:
                    edges.append((v, u, speed))

    if not edges:
        raise EmptyGraph(f"В карте нет дорог для профиля {profile.name}")

    xy = np.array([doc.local_xy(node_id) for node_id in node_ids])
    graph = RoadGraph(node_ids, xy, edges, origin=doc.origin)
    logger.info(f"🛣 Граф {profile.name}: {graph.n_vertices} вершин, {graph.n_edges} рёбер")
    return graph


def build_partition(graph: RoadGraph, target_cell_count: int) -> Partition:
    """Регулярная сетка по координатам вершин, не больше target ячеек"""
    if target_cell_count < 1:
        raise ValueError("Число ячеек должно быть >= 1")
    if graph.n_vertices == 0:
        raise EmptyGraph("Пустой граф")
    gx = max(1, math.isqrt(target_cell_count))
    gy = max(1, target_cell_count // gx)

    mn = graph.xy.min(axis=0)
    span = graph.xy.max(axis=0) - mn
    span = np.where(span > 0, span, 1.0)
    ix = np.minimum(np.floor((graph.xy[:, 0] - mn[0]) / span[0] * gx), gx - 1).astype(np.int64)
    iy = np.minimum(np.floor((graph.xy[:, 1] - mn[1]) / span[1] * gy), gy - 1).astype(np.int64)
    return Partition(cell_of=iy * gx + ix, cell_count=gx * gy, grid=(gx, gy))


Expand = Callable[[int], Iterable[Tuple[int, float, Tuple[int, ...]]]]


def _search(source: int, expand: Expand, target: Optional[int] = None):
    """Дейкстра с ключом (стоимость, индекс вершины)"""
    dist = {source: 0.0}
    pred: Dict[int, Tuple[int, Tuple[int, ...]]] = {}
    done = set()
    heap = [(0.0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        if u == target:
            break
        for v, w, step in expand(u):
            nd = d + w
            if v not in dist or nd < dist[v] or (nd == dist[v] and v not in done and u < pred[v][0]):
                dist[v] = nd
                pred[v] = (u, step)
                heapq.heappush(heap, (nd, v))
    return dist, pred, done


def _unwind(pred, source: int, target: int) -> Tuple[int, ...]:
    steps: List[Tuple[int, ...]] = []
    v = target
    while v != source:
        u, step = pred[v]
        steps.append(step)
        v = u
    return tuple(e for step in reversed(steps) for e in step)


def _original_edges(graph: RoadGraph, predicate: Optional[Callable[[int], bool]] = None) -> Expand:
    def expand(u: int):
        for e in graph.out_edges[u]:
            if predicate is None or predicate(e):
                yield int(graph.dst[e]), float(graph.cost[e]), (e,)
    return expand


def build_overlay(graph: RoadGraph, partition: Partition) -> OverlayGraph:
    """Граничные вершины и шорткаты между ними внутри каждой ячейки"""
    cell = partition.cell_of
    crossing = cell[graph.src] != cell[graph.dst]
    is_boundary = np.zeros(graph.n_vertices, dtype=bool)
    is_boundary[graph.src[crossing]] = True
    is_boundary[graph.dst[crossing]] = True

    overlay = OverlayGraph(partition=partition)
    for c in sorted(set(int(v) for v in cell[is_boundary])):
        boundary = [int(v) for v in np.flatnonzero(is_boundary & (cell == c))]
        overlay.boundary[c] = boundary
        inside = _original_edges(graph, lambda e, c=c: cell[graph.dst[e]] == c)
        shortcuts: List[Shortcut] = []
        for b in boundary:
            dist, pred, _ = _search(b, inside)
            for b2 in boundary:
                if b2 == b or b2 not in dist:
                    continue
                edges = _unwind(pred, b, b2)
                shortcuts.append(Shortcut(b, b2, dist[b2], float(graph.length[list(edges)].sum()), edges))
        overlay.shortcuts[c] = shortcuts
        for s in shortcuts:
            overlay.shortcuts_from.setdefault(s.src, []).append(s)

    logger.debug(f"Оверлей: {int(is_boundary.sum())} граничных вершин, {overlay.shortcut_count} шорткатов")
    return overlay


# --- запросы ---

def snap_local(graph: RoadGraph, xy) -> Tuple[int, float]:
    """Ближайшая вершина (индекс) и расстояние до неё"""
    if graph.n_vertices == 0:
        raise EmptyGraph("Пустой граф")
    d = np.linalg.norm(graph.xy - np.asarray(xy, dtype=float), axis=1)
    best = float(d.min())
    index = int(np.flatnonzero(d <= best + 1e-9)[0])
    return index, float(d[index])


def snap(graph: RoadGraph, point: GeoPoint) -> Tuple[int, float]:
    """OSM id ближайшей вершины и расстояние привязки"""
    index, distance = snap_local(graph, project(point, graph.origin).as_array())
    return int(graph.node_ids[index]), distance


def _make_route(graph: RoadGraph, source: int, edges: Tuple[int, ...]) -> Route:
    vertices = [source] + [int(graph.dst[e]) for e in edges]
    xy = graph.xy[vertices]
    polyline = tuple(unproject(LocalPoint(float(x), float(y)), graph.origin) for x, y in xy)
    idx = list(edges)
    return Route(
        vertices=tuple(int(graph.node_ids[v]) for v in vertices),
        polyline=polyline,
        length=float(graph.length[idx].sum()) if idx else 0.0,
        cost=float(graph.cost[idx].sum()) if idx else 0.0,
        xy=xy
    )


def flat_dijkstra(graph: RoadGraph, source: int, target: int) -> Route:
    """Обычный Дейкстра по всему графу, индексы вершин на входе"""
    dist, pred, _ = _search(source, _original_edges(graph), target)
    if target not in dist:
        raise NoRoute(f"Нет пути {graph.node_ids[source]} -> {graph.node_ids[target]}")
    return _make_route(graph, source, _unwind(pred, source, target))


def route_indices(graph: RoadGraph, overlay: OverlayGraph, source: int, target: int) -> Route:
    """MLD-запрос между индексами вершин"""
    if source == target:
        return _make_route(graph, source, ())
    cell = overlay.partition.cell_of
    local_cells = {int(cell[source]), int(cell[target])}

    def expand(u: int):
        if int(cell[u]) in local_cells:
            yield from _original_edges(graph)(u)
            return
        for s in overlay.shortcuts_from.get(u, ()):
            yield s.dst, s.cost, s.edges
        for e in graph.out_edges[u]:
            if cell[graph.dst[e]] != cell[u]:
                yield int(graph.dst[e]), float(graph.cost[e]), (e,)

    dist, pred, _ = _search(source, expand, target)
    if target not in dist:
        raise NoRoute(f"Нет пути {graph.node_ids[source]} -> {graph.node_ids[target]}")
    return _make_route(graph, source, _unwind(pred, source, target))


def route(graph: RoadGraph, overlay: OverlayGraph, src: GeoPoint, dst: GeoPoint) -> Route:
    """Маршрут минимальной стоимости между географическими точками"""
    if graph.n_vertices == 0:
        raise EmptyGraph("Пустой граф")
    radius = ROUTING_CONFIG["snap_radius"]
    ends = []
    for point in (src, dst):
        index, distance = snap_local(graph, project(point, graph.origin).as_array())
        if distance > radius:
            raise SnapFailed(f"Точка {point} дальше {radius} м от дорожной сети ({distance:.1f} м)")
        ends.append(index)
    return route_indices(graph, overlay, ends[0], ends[1])


class RoutingEngine:
    """Граф, разбиение и оверлей одного профиля"""

    def __init__(self, doc: OsmDocument, profile: str = "pedestrian"):
        self.config = ROUTING_CONFIG
        self.profile = Profile.from_name(profile)
        self.graph = build_road_graph(doc, self.profile)
        self.partition = build_partition(self.graph, self.config["target_cells"])
        self.overlay = build_overlay(self.graph, self.partition)

    def route(self, src: GeoPoint, dst: GeoPoint) -> Route:
        return route(self.graph, self.overlay, src, dst)

    def route_local(self, src_xy, dst_xy) -> Route:
        origin = self.graph.origin
        return self.route(
            unproject(LocalPoint(float(src_xy[0]), float(src_xy[1])), origin),
            unproject(LocalPoint(float(dst_xy[0]), float(dst_xy[1])), origin)
        )
