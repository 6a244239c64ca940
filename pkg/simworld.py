"""
Детерминированная 2D-симуляция мира доставки
Кинематика, шумная одометрия, датчики, карта стоимости по OSM, A* и следование по пути
"""

import heapq
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import shapely
from scipy import ndimage, sparse
from shapely.geometry import Point

from explore import DoorObservation
from geometry import Polygon, ray_hits, segment_blocked
from geoloc import MapGeometry, Pose2, ScanLabeler, SemanticScan, Transform2, extract_map_geometry
from globals import COSTMAP_CONFIG, NOISE_DEFAULTS, ROBOT_CONFIG, SENSOR_CONFIG
from osm_core import (
    Address, GeoPoint, OsmDocument, OsmError, building_parts, find_buildings, project, query_address
)
from utils import normalize_angle

logger = logging.getLogger(__name__)

FREE, INFLATED, OCCUPIED = 0, 1, 2
NEIGHBORS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


class SimulationError(Exception):
    """Базовая ошибка симуляции"""


class DoorPlacementError(SimulationError):
    pass


class NoPath(SimulationError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    sigma_v: float = NOISE_DEFAULTS["sigma_v"]
    sigma_w: float = NOISE_DEFAULTS["sigma_w"]
    sigma_s: float = NOISE_DEFAULTS["sigma_s"]
    outlier_rate: float = NOISE_DEFAULTS["outlier_rate"]
    outlier_sigma: float = NOISE_DEFAULTS["outlier_sigma"]
    label_flip: float = NOISE_DEFAULTS["label_flip"]

    def __post_init__(self):
        for name in ("sigma_v", "sigma_w", "sigma_s", "outlier_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} должно быть >= 0")
        for name in ("outlier_rate", "label_flip"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} должно быть в [0, 1]")

    @classmethod
    def zero(cls) -> "NoiseModel":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


# --- мир ---

@dataclass(frozen=True)
class GroundTruthDoor:
    address: Address
    position: GeoPoint
    facing: float
    xy: np.ndarray = field(compare=False)
    building_id: int = -1


@dataclass
class WorldModel:
    doc: OsmDocument
    doors: List[GroundTruthDoor]
    obstacles: Dict[int, List[Polygon]]
    geometry: MapGeometry
    costmap: "Costmap"

    @property
    def bounds(self):
        return self.doc.local_bounds

    @property
    def building_count(self) -> int:
        return len(self.obstacles)

    @property
    def wall_segments(self) -> np.ndarray:
        keep = [i for i, label in enumerate(self.geometry.labels) if label == "building"]
        return self.geometry.segments[keep]

    def vocabulary(self) -> List[str]:
        return sorted(set(self.geometry.labels))


def load_door_table(source: Union[str, Path, Sequence[Mapping[str, Any]]]) -> List[Dict[str, Any]]:
    if isinstance(source, (str, Path)):
        return json.loads(Path(source).read_text(encoding="utf-8"))
    return [dict(row) for row in source]


def _obstacles(doc: OsmDocument) -> Dict[int, List[Polygon]]:
    obstacles = {}
    for element_id in find_buildings(doc):
        try:
            obstacles[element_id] = building_parts(doc, element_id)
        except OsmError as e:
            logger.warning(f"⚠️ Здание {element_id} пропущено: {e}")
    return obstacles


def build_world(doc: OsmDocument, door_table: Sequence[Mapping[str, Any]] = ()) -> WorldModel:
    """Мир с проверенным расположением входов"""
    obstacles = _obstacles(doc)
    tolerance = SENSOR_CONFIG["door_tolerance"]
    doors = []
    for row in door_table:
        address = Address(row.get("region"), row.get("street"), row.get("building"), row.get("unit"))
        position = GeoPoint(float(row["lat"]), float(row["lon"]))
        xy = project(position, doc.origin).as_array()
        try:
            resolution = query_address(doc, Address(address.region, address.street, address.building))
        except OsmError:
            raise DoorPlacementError(f"Здание входа {address.to_dict()} отсутствует в карте") from None
        if resolution.resolved_level != "building" or resolution.element_id not in obstacles:
            raise DoorPlacementError(f"Здание входа {address.to_dict()} не найдено")
        parts = obstacles[resolution.element_id]
        distance = min(p.to_shapely().exterior.distance(Point(xy)) for p in parts)
        if distance > tolerance:
            raise DoorPlacementError(
                f"Вход {address.label()} в {distance:.2f} м от стены здания (допуск {tolerance} м)"
            )
        doors.append(GroundTruthDoor(address, position, float(row.get("facing", 0.0)), xy, resolution.element_id))

    world = WorldModel(doc, doors, obstacles, extract_map_geometry(doc), build_costmap(doc, obstacles=obstacles))
    logger.info(f"🌍 Мир: {world.building_count} зданий, {len(doors)} входов")
    return world


# --- карта стоимости ---

@dataclass
class Costmap:
    origin: np.ndarray
    resolution: float
    grid: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.grid.shape

    def to_cell(self, xy) -> Tuple[int, int]:
        ix = math.floor((float(xy[0]) - self.origin[0]) / self.resolution)
        iy = math.floor((float(xy[1]) - self.origin[1]) / self.resolution)
        return ix, iy

    def to_world(self, cell) -> np.ndarray:
        return self.origin + (np.asarray(cell, dtype=float) + 0.5) * self.resolution

    def in_grid(self, cell) -> bool:
        return 0 <= cell[0] < self.grid.shape[1] and 0 <= cell[1] < self.grid.shape[0]

    def state(self, cell) -> int:
        if not self.in_grid(cell):
            return OCCUPIED
        return int(self.grid[cell[1], cell[0]])

    def state_at(self, xy) -> int:
        return self.state(self.to_cell(xy))

    def is_occupied(self, xy) -> bool:
        return self.state_at(xy) == OCCUPIED

    @property
    def traversable(self) -> np.ndarray:
        return self.grid != OCCUPIED


def build_costmap(doc: OsmDocument, resolution: Optional[float] = None, inflation: Optional[float] = None,
                  obstacles: Optional[Mapping[int, List[Polygon]]] = None) -> Costmap:
    """Растеризация зданий и полоса раздутия вокруг них"""
    config = COSTMAP_CONFIG
    resolution = resolution or config["resolution"]
    inflation = config["inflation"] if inflation is None else inflation
    if len(doc) == 0:
        raise ValueError("Пустая карта")
    obstacles = _obstacles(doc) if obstacles is None else obstacles

    x0, y0, x1, y1 = doc.local_bounds
    margin = config["margin"]
    origin = np.floor((np.array([x0, y0]) - margin) / resolution) * resolution
    nx = int(math.ceil((x1 + margin - origin[0]) / resolution))
    ny = int(math.ceil((y1 + margin - origin[1]) / resolution))
    occupied = np.zeros((ny, nx), dtype=bool)

    for parts in obstacles.values():
        for part in parts:
            shape = part.to_shapely().buffer(resolution / 2.0, join_style="mitre")
            bx0, by0, bx1, by1 = shape.bounds
            ix0 = max(int((bx0 - origin[0]) // resolution), 0)
            iy0 = max(int((by0 - origin[1]) // resolution), 0)
            ix1 = min(int((bx1 - origin[0]) // resolution) + 1, nx)
            iy1 = min(int((by1 - origin[1]) // resolution) + 1, ny)
            if ix1 <= ix0 or iy1 <= iy0:
                continue
            cx = origin[0] + (np.arange(ix0, ix1) + 0.5) * resolution
            cy = origin[1] + (np.arange(iy0, iy1) + 0.5) * resolution
            gx, gy = np.meshgrid(cx, cy)
            occupied[iy0:iy1, ix0:ix1] |= shapely.contains_xy(shape, gx, gy)

    grid = np.full((ny, nx), FREE, dtype=np.uint8)
    if occupied.any():
        distance = ndimage.distance_transform_edt(~occupied) * resolution
        grid[(distance <= inflation) & ~occupied] = INFLATED
    grid[occupied] = OCCUPIED
    return Costmap(origin, resolution, grid)


def grid_graph(costmap: Costmap, inflated_factor: float = 1.0) -> sparse.csr_matrix:
    """Разреженный 8-связный граф проходимых клеток, веса в метрах"""
    ny, nx = costmap.shape
    passable = costmap.traversable
    factor = np.where(costmap.grid == INFLATED, inflated_factor, 1.0)
    index = np.arange(ny * nx).reshape(ny, nx)
    rows, cols, weights = [], [], []
    for dx, dy in NEIGHBORS:
        src = passable[max(0, -dy):ny - max(0, dy), max(0, -dx):nx - max(0, dx)]
        dst = passable[max(0, dy):ny - max(0, -dy), max(0, dx):nx - max(0, -dx)]
        mask = src & dst
        s = index[max(0, -dy):ny - max(0, dy), max(0, -dx):nx - max(0, dx)][mask]
        d = index[max(0, dy):ny - max(0, -dy), max(0, dx):nx - max(0, -dx)][mask]
        step = math.hypot(dx, dy) * costmap.resolution
        rows.append(s)
        cols.append(d)
        weights.append(step * factor.ravel()[d])
    return sparse.csr_matrix(
        (np.concatenate(weights), (np.concatenate(rows), np.concatenate(cols))), shape=(ny * nx, ny * nx)
    )


def nearest_traversable(costmap: Costmap, xy, free_only: bool = True, max_radius: float = 20.0) -> np.ndarray:
    """Центр ближайшей свободной клетки, подход к целям на стенах"""
    target = FREE if free_only else INFLATED
    ix, iy = costmap.to_cell(xy)
    r = max(1, int(max_radius / costmap.resolution))
    ny, nx = costmap.shape
    x0, x1 = max(ix - r, 0), min(ix + r + 1, nx)
    y0, y1 = max(iy - r, 0), min(iy + r + 1, ny)
    window = costmap.grid[y0:y1, x0:x1]
    cells = np.argwhere(window <= target)
    if not len(cells):
        raise NoPath(f"Нет проходимых клеток в радиусе {max_radius} м от {xy}")
    centers = costmap.origin + (cells[:, ::-1] + np.array([x0, y0]) + 0.5) * costmap.resolution
    return centers[int(np.argmin(np.linalg.norm(centers - np.asarray(xy, dtype=float), axis=1)))]


def plan_path(costmap: Costmap, start, goal) -> List[Tuple[int, int]]:
    """A* на 8-связной сетке; шаг 1 или sqrt(2), раздутые клетки дороже"""
    s = costmap.to_cell(start)
    g = costmap.to_cell(goal)
    if costmap.state(s) == OCCUPIED:
        raise NoPath(f"Старт {tuple(np.round(start, 2))} в занятой клетке")
    if costmap.state(g) == OCCUPIED:
        raise NoPath(f"Цель {tuple(np.round(goal, 2))} в занятой клетке")
    penalty = COSTMAP_CONFIG["inflated_cost"]
    grid = costmap.grid
    ny, nx = grid.shape

    def heuristic(c):
        dx, dy = abs(c[0] - g[0]), abs(c[1] - g[1])
        return max(dx, dy) + (math.sqrt(2.0) - 1.0) * min(dx, dy)

    cost = {s: 0.0}
    parent = {s: s}
    closed = set()
    heap = [(heuristic(s), 0.0, s)]
    while heap:
        _, gc, c = heapq.heappop(heap)
        if c in closed:
            continue
        if c == g:
            break
        closed.add(c)
        for dx, dy in NEIGHBORS:
            n = (c[0] + dx, c[1] + dy)
            if not (0 <= n[0] < nx and 0 <= n[1] < ny):
                continue
            state = grid[n[1], n[0]]
            if state == OCCUPIED or n in closed:
                continue
            step = math.sqrt(2.0) if dx and dy else 1.0
            if state == INFLATED:
                step *= penalty
            nc = gc + step
            if nc < cost.get(n, math.inf):
                cost[n] = nc
                parent[n] = c
                heapq.heappush(heap, (nc + heuristic(n), nc, n))
    if g not in cost:
        raise NoPath(f"Нет пути из {s} в {g}")
    path = [g]
    while path[-1] != s:
        path.append(parent[path[-1]])
    return path[::-1]


def path_cost(costmap: Costmap, path: Sequence[Tuple[int, int]]) -> float:
    """Стоимость пути в единицах A* (клетки)"""
    penalty = COSTMAP_CONFIG["inflated_cost"]
    total = 0.0
    for a, b in zip(path[:-1], path[1:]):
        step = math.hypot(b[0] - a[0], b[1] - a[1])
        total += step * (penalty if costmap.state(b) == INFLATED else 1.0)
    return total


def path_to_world(costmap: Costmap, path: Sequence[Tuple[int, int]]) -> np.ndarray:
    return np.array([costmap.to_world(c) for c in path]).reshape(-1, 2)


# --- робот ---

@dataclass(frozen=True)
class RobotState:
    true_pose: Pose2
    odom_pose: Pose2
    cmd: Tuple[float, float] = (0.0, 0.0)
    time: float = 0.0


def follow(path: np.ndarray, pose: Transform2, dt: Optional[float] = None) -> Tuple[float, float]:
    """Pure pursuit: (v, w) в пределах ограничений привода"""
    config = ROBOT_CONFIG
    path = np.asarray(path, dtype=float).reshape(-1, 2)
    if not len(path):
        raise ValueError("Пустой путь")
    position = np.array([pose.x, pose.y])
    lookahead = config["lookahead"]

    nearest = int(np.argmin(np.linalg.norm(path - position, axis=1)))
    ahead = np.linalg.norm(path[nearest:] - position, axis=1)
    beyond = np.flatnonzero(ahead >= lookahead)
    target = path[nearest + beyond[0]] if len(beyond) else path[-1]

    d = target - position
    distance = float(np.linalg.norm(d))
    goal_distance = float(np.linalg.norm(path[-1] - position))
    if distance < 1e-9:
        return 0.0, 0.0
    alpha = normalize_angle(math.atan2(d[1], d[0]) - pose.theta)
    if abs(alpha) > math.pi / 2:
        return 0.0, math.copysign(config["max_w"], alpha)

    v = config["cruise_v"] * math.cos(alpha)
    if goal_distance < lookahead:
        v *= max(goal_distance / lookahead, 0.2)
    w = 2.0 * v * math.sin(alpha) / max(distance, 1e-6)
    v = float(np.clip(v, -config["max_v"], config["max_v"]))
    w = float(np.clip(w, -config["max_w"], config["max_w"]))
    return v, w


def integrate(pose: Transform2, v: float, w: float, dt: float) -> Pose2:
    """Точное интегрирование по дуге"""
    if abs(w) < 1e-12:
        return Pose2(pose.x + v * dt * math.cos(pose.theta), pose.y + v * dt * math.sin(pose.theta), pose.theta)
    r = v / w
    theta = pose.theta + w * dt
    return Pose2(
        pose.x + r * (math.sin(theta) - math.sin(pose.theta)),
        pose.y - r * (math.cos(theta) - math.cos(pose.theta)),
        theta
    )


def step(world: Optional[WorldModel], state: RobotState, cmd: Tuple[float, float], dt: float,
         noise: NoiseModel, rng: np.random.Generator) -> Tuple[RobotState, Pose2, bool]:
    """Новое состояние, приращение одометрии и флаг столкновения"""
    if not dt > 0:
        raise ValueError("dt должно быть > 0")
    v, w = float(cmd[0]), float(cmd[1])
    eps_v = rng.normal(0.0, noise.sigma_v)
    eps_w = rng.normal(0.0, noise.sigma_w)

    new_true = integrate(state.true_pose, v, w, dt)
    collided = False
    if world is not None and world.costmap.is_occupied((new_true.x, new_true.y)):
        collided = True
        v = 0.0
        new_true = integrate(state.true_pose, v, w, dt)

    increment = integrate(Pose2(), v * (1.0 + eps_v), w * (1.0 + eps_w), dt)
    new_state = RobotState(new_true, state.odom_pose.compose(increment), (v, w), state.time + dt)
    return new_state, increment, collided


# --- датчики ---

class GroundTruthLabeler:
    """Метки из геометрии карты, без ошибок"""

    def label(self, points: np.ndarray, hints: Sequence[str]) -> List[str]:
        return list(hints)


def sense_scan(world: WorldModel, pose: Transform2, noise: NoiseModel, rng: np.random.Generator,
               scan_range: Optional[float] = None, rays: Optional[int] = None,
               labeler: Optional[ScanLabeler] = None, timestamp: float = 0.0) -> SemanticScan:
    """Лучевой скан по стенам и осям дорог в системе робота"""
    scan_range = scan_range or SENSOR_CONFIG["scan_range"]
    rays = rays or SENSOR_CONFIG["scan_rays"]
    relative = np.linspace(-math.pi, math.pi, rays, endpoint=False)
    absolute = relative + pose.theta
    directions = np.column_stack([np.cos(absolute), np.sin(absolute)])

    t = ray_hits(np.array([pose.x, pose.y]), directions, world.geometry.segments)
    t = np.where(t < SENSOR_CONFIG["scan_min_range"], np.inf, t)
    if t.shape[1]:
        hit = np.argmin(t, axis=1)
        r = t[np.arange(rays), hit]
    else:
        hit = np.zeros(rays, dtype=np.int64)
        r = np.full(rays, np.inf)
    valid = r <= scan_range

    range_noise = rng.normal(0.0, noise.sigma_s, rays)
    outlier_draw = rng.random(rays)
    outlier_offset = rng.normal(0.0, noise.outlier_sigma, (rays, 2))
    flip_draw = rng.random(rays)
    vocabulary = world.vocabulary()
    flip_choice = rng.integers(0, max(len(vocabulary) - 1, 1), rays)

    rr = np.where(valid, r, 0.0) + range_noise
    points = np.column_stack([rr * np.cos(relative), rr * np.sin(relative)])
    outliers = outlier_draw < noise.outlier_rate
    points[outliers] += outlier_offset[outliers]

    hints = [world.geometry.labels[i] if valid[k] else "unknown" for k, i in enumerate(hit)]
    labels = (labeler or GroundTruthLabeler()).label(points, hints)
    for k in range(rays):
        if flip_draw[k] < noise.label_flip and len(vocabulary) > 1 and labels[k] in vocabulary:
            others = [v for v in vocabulary if v != labels[k]]
            labels[k] = others[flip_choice[k] % len(others)]

    keep = np.flatnonzero(valid)
    return SemanticScan(points[keep], tuple(labels[k] for k in keep), timestamp)


def sense_door(world: WorldModel, pose: Transform2, rng: np.random.Generator,
               door_range: Optional[float] = None, fov: Optional[float] = None,
               p_detect: Optional[float] = None) -> List[DoorObservation]:
    """Входы в зоне видимости; одно случайное число на вход в порядке таблицы"""
    door_range = SENSOR_CONFIG["door_range"] if door_range is None else door_range
    fov = SENSOR_CONFIG["door_fov"] if fov is None else fov
    p_detect = SENSOR_CONFIG["p_detect"] if p_detect is None else p_detect
    position = np.array([pose.x, pose.y])
    walls = world.wall_segments

    observations = []
    for door in world.doors:
        draw = rng.random()
        d = door.xy - position
        distance = float(np.linalg.norm(d))
        if distance > door_range or distance < 1e-9:
            continue
        if abs(normalize_angle(math.atan2(d[1], d[0]) - pose.theta)) > fov / 2.0:
            continue
        end = door.xy - 0.1 * d / distance
        if segment_blocked(position, end, walls):
            continue
        if draw >= p_detect:
            continue
        observations.append(DoorObservation(door.address.building, door.address.unit, door.position, 1.0))
    return observations


class DoorSensorSim:
    """Датчик входов поверх мира; реализует контракт DoorSensor"""

    def __init__(self, world: WorldModel, rng: np.random.Generator, p_detect: Optional[float] = None):
        self.world = world
        self.rng = rng
        self.p_detect = p_detect
        self.queries = 0

    def observe(self, pose: Transform2) -> List[DoorObservation]:
        self.queries += 1
        return sense_door(self.world, pose, self.rng, p_detect=self.p_detect)


class Simulation:
    """Один эпизод: мир, состояние робота, общий генератор случайных чисел"""

    def __init__(self, world: WorldModel, start: Pose2, noise: NoiseModel, seed: int):
        self.config = ROBOT_CONFIG
        self.world = world
        self.noise = noise
        self.rng = np.random.default_rng(seed)
        self.state = RobotState(start, start)
        self.trace: List[Tuple[float, float]] = [(start.x, start.y)]
        self.collisions = 0
        self.distance = 0.0

    @property
    def time(self) -> float:
        return self.state.time

    def advance(self, cmd: Tuple[float, float]) -> RobotState:
        previous = self.state.true_pose
        self.state, _, collided = step(self.world, self.state, cmd, self.config["dt"], self.noise, self.rng)
        if collided:
            self.collisions += 1
        pose = self.state.true_pose
        self.distance += math.hypot(pose.x - previous.x, pose.y - previous.y)
        self.trace.append((pose.x, pose.y))
        return self.state

    def scan(self) -> SemanticScan:
        return sense_scan(self.world, self.state.true_pose, self.noise, self.rng, timestamp=self.time)

    def door_sensor(self, p_detect: Optional[float] = None) -> DoorSensorSim:
        return DoorSensorSim(self.world, self.rng, p_detect)
