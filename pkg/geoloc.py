"""
Глобальная локализация
Регистрация семантического скана по геометрии OSM и граф поз (одометрия + априорные факторы)
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from geometry import closest_on_segments
from globals import POSE_GRAPH_CONFIG, REGISTRATION_CONFIG, SENSOR_CONFIG
from osm_core import BBox, OsmDocument, OsmError, building_parts
from utils import normalize_angle

logger = logging.getLogger(__name__)

UNKNOWN_LABEL = "unknown"


class LocalizationError(Exception):
    """Базовая ошибка локализации"""


class TooFewPoints(LocalizationError):
    pass


class Diverged(LocalizationError):
    pass


class UnderConstrained(LocalizationError):
    pass


class NonSPDCovariance(LocalizationError):
    pass


# --- SE(2) ---

@dataclass(frozen=True)
class Transform2:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    @property
    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def compose(self, other: "Transform2"):
        c, s = math.cos(self.theta), math.sin(self.theta)
        return self.__class__(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta
        )

    def inverse(self):
        c, s = math.cos(self.theta), math.sin(self.theta)
        return self.__class__(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.theta)

    def between(self, other: "Transform2"):
        """self⁻¹ ∘ other"""
        return self.inverse().compose(other)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        return points @ self.rotation.T + self.translation

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    @classmethod
    def from_array(cls, values):
        return cls(float(values[0]), float(values[1]), float(values[2]))

    def __matmul__(self, other):
        return self.compose(other)


class Pose2(Transform2):
    """Поза на плоскости: x, y в метрах, курс в (-pi, pi]"""


# --- сканы и геометрия карты ---

@dataclass(frozen=True)
class SemanticScan:
    points: np.ndarray
    labels: Tuple[str, ...]
    timestamp: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=float).reshape(-1, 2))
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.points) != len(self.labels):
            raise ValueError("Число точек и меток скана не совпадает")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class MapGeometry:
    segments: np.ndarray
    labels: Tuple[str, ...]

    def __len__(self) -> int:
        return len(self.labels)

    def crop(self, center, radius: float) -> "MapGeometry":
        """Отрезки, проходящие ближе radius к центру"""
        if not len(self):
            return self
        dist, _, _ = closest_on_segments(np.asarray(center, dtype=float)[None, :], self.segments)
        keep = np.flatnonzero(dist[0] <= radius)
        return MapGeometry(self.segments[keep], tuple(self.labels[i] for i in keep))


class ScanLabeler(Protocol):
    def label(self, points: np.ndarray, hints: Sequence[str]) -> List[str]:
        ...


def extract_map_geometry(doc: OsmDocument, bbox: Optional[BBox] = None) -> MapGeometry:
    """Рёбра зданий (building) и осевые линии дорог (highway)"""
    if bbox is None:
        ids = list(doc.elements)
    elif bbox[2] <= bbox[0] or bbox[3] <= bbox[1]:
        ids = []
    else:
        ids = doc.query_bbox(bbox)

    segments: List[np.ndarray] = []
    labels: List[str] = []
    for element_id in ids:
        element = doc.get(element_id)
        if "building" in element.tags:
            try:
                parts = building_parts(doc, element_id)
            except OsmError as e:
                logger.debug(f"Здание {element_id} пропущено: {e}")
                continue
            for part in parts:
                edges = part.edges()
                segments.extend(edges)
                labels.extend(["building"] * len(edges))
        elif element.kind == "way" and "highway" in element.tags:
            coords = doc.way_coords(element_id)
            for a, b in zip(coords[:-1], coords[1:]):
                if np.linalg.norm(b - a) > 0:
                    segments.append(np.array([a, b]))
                    labels.append("highway")
    array = np.array(segments).reshape(-1, 2, 2)
    return MapGeometry(array, tuple(labels))


def bev_filter(scan: SemanticScan) -> SemanticScan:
    keep = [i for i, label in enumerate(scan.labels) if label != UNKNOWN_LABEL]
    return SemanticScan(scan.points[keep], tuple(scan.labels[i] for i in keep), scan.timestamp)


# --- регистрация ---

@dataclass(frozen=True)
class RegistrationResult:
    pose: Pose2
    rmse: float
    inlier_fraction: float
    converged: bool
    iterations: int = 0
    correspondences: np.ndarray = field(default=None, compare=False, repr=False)


def _correspondences(world: np.ndarray, labels: Sequence[str], geometry: MapGeometry):
    """Ближайший отрезок с той же меткой для каждой точки"""
    n = len(world)
    dist = np.full(n, np.inf)
    t = np.zeros(n)
    closest = np.zeros((n, 2))
    index = np.full(n, -1, dtype=np.int64)
    point_labels = np.array(labels, dtype=object)
    map_labels = np.array(geometry.labels, dtype=object)
    for label in sorted(set(labels)):
        seg_idx = np.flatnonzero(map_labels == label)
        pts_idx = np.flatnonzero(point_labels == label)
        if not len(seg_idx) or not len(pts_idx):
            continue
        d, tt, cc = closest_on_segments(world[pts_idx], geometry.segments[seg_idx])
        best = np.argmin(d, axis=1)
        rows = np.arange(len(pts_idx))
        dist[pts_idx] = d[rows, best]
        t[pts_idx] = tt[rows, best]
        closest[pts_idx] = cc[rows, best]
        index[pts_idx] = seg_idx[best]
    return dist, t, closest, index


def _linearize(world: np.ndarray, pose: np.ndarray, t: np.ndarray, closest: np.ndarray,
               segments: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Невязки точка-отрезок: по нормали внутри отрезка, полная на концах"""
    rows: List[np.ndarray] = []
    residuals: List[float] = []
    for p, tt, c, seg in zip(world, t, closest, segments):
        dtheta = np.array([-(p[1] - pose[1]), p[0] - pose[0]])
        jac = np.array([[1.0, 0.0, dtheta[0]], [0.0, 1.0, dtheta[1]]])
        if 0.0 < tt < 1.0:
            d = seg[1] - seg[0]
            normal = np.array([-d[1], d[0]]) / np.linalg.norm(d)
            rows.append(normal @ jac)
            residuals.append(float(normal @ (p - c)))
        else:
            rows.extend(jac)
            residuals.extend(p - c)
    return np.array(rows).reshape(-1, 3), np.array(residuals)


def register(scan: SemanticScan, map_geometry: MapGeometry, initial: Transform2) -> RegistrationResult:
    """ICP точка-отрезок с соответствиями только между одинаковыми метками"""
    config = REGISTRATION_CONFIG
    scan = bev_filter(scan)
    if len(scan) < config["min_points"]:
        raise TooFewPoints(f"В скане {len(scan)} размеченных точек, нужно >= {config['min_points']}")

    pose = initial.as_array().copy()
    rmse_ref = None
    prev_rmse = None
    increases = 0
    converged = False
    iterations = 0
    gate = config["gate_min"]
    for iterations in range(1, config["max_iterations"] + 1):
        world = Pose2.from_array(pose).apply(scan.points)
        dist, t, closest, index = _correspondences(world, scan.labels, map_geometry)
        valid = np.isfinite(dist)
        if not valid.any():
            break
        if rmse_ref is None:
            rmse_ref = float(np.median(dist[valid]))
        gate = max(config["gate_factor"] * rmse_ref, config["gate_min"])
        inliers = valid & (dist <= gate)
        if inliers.sum() < 3:
            break
        rmse = float(np.sqrt(np.mean(dist[inliers] ** 2)))
        increases = increases + 1 if prev_rmse is not None and rmse > prev_rmse else 0
        if increases >= config["diverge_patience"]:
            raise Diverged(f"RMSE растёт {increases} итераций подряд ({rmse:.3f} м)")
        prev_rmse = rmse_ref = rmse

        jac, res = _linearize(world[inliers], pose, t[inliers], closest[inliers],
                              map_geometry.segments[index[inliers]])
        delta = np.linalg.lstsq(jac, -res, rcond=None)[0]
        pose = pose + delta
        pose[2] = normalize_angle(pose[2])
        logger.debug(f"ICP {iterations}: rmse {rmse:.6f}, шаг {np.round(delta, 8)}")
        if np.hypot(delta[0], delta[1]) < config["tolerance_xy"] and abs(delta[2]) < config["tolerance_theta"]:
            converged = True
            break

    world = Pose2.from_array(pose).apply(scan.points)
    dist, _, _, index = _correspondences(world, scan.labels, map_geometry)
    inliers = np.isfinite(dist) & (dist <= gate)
    rmse = float(np.sqrt(np.mean(dist[inliers] ** 2))) if inliers.any() else float("inf")
    fraction = float(inliers.mean())
    return RegistrationResult(
        pose=Pose2.from_array(pose),
        rmse=rmse,
        inlier_fraction=fraction,
        converged=converged and fraction >= config["min_inlier_fraction"],
        iterations=iterations,
        correspondences=np.where(inliers, index, -1)
    )


# --- граф поз ---

def _check_covariance(cov) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (3, 3) or not np.allclose(cov, cov.T, atol=1e-12):
        raise NonSPDCovariance("Ковариация должна быть симметричной 3x3")
    if np.linalg.eigvalsh(cov).min() <= 0.0:
        raise NonSPDCovariance("Ковариация не положительно определена")
    return np.linalg.inv(cov)


def diag_covariance(sigmas: Sequence[float]) -> np.ndarray:
    return np.diag(np.square(np.asarray(sigmas, dtype=float)))


@dataclass
class OdometryFactor:
    i: int
    j: int
    measurement: Pose2
    information: np.ndarray


@dataclass
class PriorFactor:
    i: int
    measurement: Pose2
    information: np.ndarray


def _rot_t(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, s], [-s, c]])


def _odometry_error(xi: np.ndarray, xj: np.ndarray, z: Pose2):
    ri_t = _rot_t(xi[2])
    rz_t = _rot_t(z.theta)
    dt = xj[:2] - xi[:2]
    e = np.empty(3)
    e[:2] = rz_t @ (ri_t @ dt - z.translation)
    e[2] = normalize_angle(xj[2] - xi[2] - z.theta)
    c, s = math.cos(xi[2]), math.sin(xi[2])
    d_ri_t = np.array([[-s, c], [-c, -s]])
    ji = np.zeros((3, 3))
    jj = np.zeros((3, 3))
    ji[:2, :2] = -rz_t @ ri_t
    ji[:2, 2] = rz_t @ d_ri_t @ dt
    ji[2, 2] = -1.0
    jj[:2, :2] = rz_t @ ri_t
    jj[2, 2] = 1.0
    return e, ji, jj


def _prior_error(x: np.ndarray, z: Pose2) -> np.ndarray:
    return np.array([x[0] - z.x, x[1] - z.y, normalize_angle(x[2] - z.theta)])


class PoseGraph:
    """Граф поз со скользящим окном и демпфированным Гаусс-Ньютоном"""

    def __init__(self, window: Optional[int] = None):
        self.config = POSE_GRAPH_CONFIG
        self.window = window or self.config["window"]
        self.nodes: Dict[int, Pose2] = {}
        self.timestamps: Dict[int, float] = {}
        self.odometry: List[OdometryFactor] = []
        self.priors: List[PriorFactor] = []
        self.error_history: List[float] = []
        self.optimized = False
        self._next_id = 0

    @property
    def latest(self) -> int:
        return max(self.nodes)

    def add_node(self, pose: Pose2, timestamp: float = 0.0) -> int:
        node_id = self._next_id
        self._next_id += 1
        self.nodes[node_id] = Pose2(pose.x, pose.y, pose.theta)
        self.timestamps[node_id] = timestamp
        return node_id

    def add_odometry_factor(self, i: int, j: Optional[int], relative: Transform2, cov,
                            timestamp: float = 0.0) -> int:
        if i not in self.nodes:
            raise KeyError(f"Нет узла {i}")
        information = _check_covariance(cov)
        measurement = Pose2(relative.x, relative.y, relative.theta)
        if j is None:
            j = self.add_node(self.nodes[i].compose(measurement), timestamp)
        elif j not in self.nodes:
            self.nodes[j] = self.nodes[i].compose(measurement)
            self.timestamps[j] = timestamp
            self._next_id = max(self._next_id, j + 1)
        self.odometry.append(OdometryFactor(i, j, measurement, information))
        self._marginalize()
        return j

    def add_prior_factor(self, i: int, pose: Transform2, cov):
        if i not in self.nodes:
            raise KeyError(f"Нет узла {i}")
        self.priors.append(PriorFactor(i, Pose2(pose.x, pose.y, pose.theta), _check_covariance(cov)))

    def _marginalize(self):
        while len(self.nodes) > self.window:
            oldest = min(self.nodes)
            self.nodes.pop(oldest)
            self.timestamps.pop(oldest)
            self.odometry = [f for f in self.odometry if f.i != oldest and f.j != oldest]
            self.priors = [f for f in self.priors if f.i != oldest]
            successor = min(self.nodes)
            self.add_prior_factor(successor, self.nodes[successor], diag_covariance(self.config["marginal_sigma"]))
            logger.debug(f"Узел {oldest} вытеснен из окна, априор на узел {successor}")

    def _error(self, x: np.ndarray, index: Dict[int, int]) -> float:
        total = 0.0
        for f in self.odometry:
            e, _, _ = _odometry_error(x[index[f.i]], x[index[f.j]], f.measurement)
            total += float(e @ f.information @ e)
        for f in self.priors:
            e = _prior_error(x[index[f.i]], f.measurement)
            total += float(e @ f.information @ e)
        return total

    def _system(self, x: np.ndarray, index: Dict[int, int]):
        n = len(index) * 3
        h = np.zeros((n, n))
        b = np.zeros(n)
        for f in self.odometry:
            e, ji, jj = _odometry_error(x[index[f.i]], x[index[f.j]], f.measurement)
            si, sj = 3 * index[f.i], 3 * index[f.j]
            for sa, ja in ((si, ji), (sj, jj)):
                b[sa:sa + 3] += ja.T @ f.information @ e
                for sb, jb in ((si, ji), (sj, jj)):
                    h[sa:sa + 3, sb:sb + 3] += ja.T @ f.information @ jb
        for f in self.priors:
            e = _prior_error(x[index[f.i]], f.measurement)
            s = 3 * index[f.i]
            h[s:s + 3, s:s + 3] += f.information
            b[s:s + 3] += f.information @ e
        return h, b

    def total_error(self) -> float:
        ids = sorted(self.nodes)
        index = {node_id: k for k, node_id in enumerate(ids)}
        return self._error(np.array([self.nodes[i].as_array() for i in ids]), index)

    def optimize(self) -> Dict[int, Pose2]:
        """Левенберг-Марквардт по суммарной ошибке Махаланобиса"""
        if not self.priors:
            raise UnderConstrained("Граф без априорных факторов")
        ids = sorted(self.nodes)
        index = {node_id: k for k, node_id in enumerate(ids)}
        x = np.array([self.nodes[i].as_array() for i in ids])
        error = self._error(x, index)
        history = [error]
        lam = self.config["lambda_init"]
        for _ in range(self.config["max_iterations"]):
            if error == 0.0:
                break
            h, b = self._system(x, index)
            try:
                dx = np.linalg.solve(h + lam * np.eye(len(b)), -b)
            except np.linalg.LinAlgError:
                lam *= self.config["lambda_factor"]
                continue
            candidate = x + dx.reshape(-1, 3)
            candidate[:, 2] = [normalize_angle(t) for t in candidate[:, 2]]
            new_error = self._error(candidate, index)
            if new_error < error:
                decrease = (error - new_error) / error
                x, error = candidate, new_error
                history.append(error)
                lam = max(lam / self.config["lambda_factor"], 1e-12)
                if decrease < self.config["relative_tolerance"]:
                    break
            else:
                lam *= self.config["lambda_factor"]
                if lam > self.config["lambda_max"]:
                    break

        for node_id, k in index.items():
            self.nodes[node_id] = Pose2.from_array(x[k])
        self.error_history = history
        self.optimized = True
        logger.debug(f"Граф поз: ошибка {history[0]:.6g} -> {history[-1]:.6g} за {len(history) - 1} шагов")
        return dict(self.nodes)

    def map_to_odom(self, odom_pose: Transform2) -> Transform2:
        if not self.optimized:
            raise LocalizationError("Граф поз ещё не оптимизирован")
        latest = self.nodes[self.latest]
        t = latest.compose(Pose2(odom_pose.x, odom_pose.y, odom_pose.theta).inverse())
        return Transform2(t.x, t.y, t.theta)


def add_odometry_factor(graph: PoseGraph, i: int, j: Optional[int], relative: Transform2, cov) -> int:
    return graph.add_odometry_factor(i, j, relative, cov)


def add_prior_factor(graph: PoseGraph, i: int, pose: Transform2, cov):
    graph.add_prior_factor(i, pose, cov)


def optimize(graph: PoseGraph) -> Dict[int, Pose2]:
    return graph.optimize()


def map_to_odom(graph: PoseGraph, odom_pose: Transform2) -> Transform2:
    return graph.map_to_odom(odom_pose)


# --- локализатор ---

class Localizer:
    """
    Слияние одометрии и глобальной локализации

    Ключевые кадры одометрии раз в keyframe_interval секунд, регистрация скана
    и априорный фактор раз в prior_interval секунд, затем оптимизация графа
    и обновление map -> odom.
    """

    def __init__(self, geometry: MapGeometry, initial_pose: Pose2, timestamp: float = 0.0):
        self.config = POSE_GRAPH_CONFIG
        self.geometry = geometry
        self.graph = PoseGraph()
        node = self.graph.add_node(initial_pose, timestamp)
        self.graph.add_prior_factor(node, initial_pose, diag_covariance(self.config["prior_sigma"]))
        self.graph.optimize()
        self.last_odom = Pose2(initial_pose.x, initial_pose.y, initial_pose.theta)
        self.last_keyframe_time = timestamp
        self.last_prior_time = timestamp
        self.transform = self.graph.map_to_odom(self.last_odom)
        self.registrations = 0
        self.rejected = 0

    def estimate(self, odom_pose: Transform2) -> Pose2:
        p = self.transform.compose(odom_pose)
        return Pose2(p.x, p.y, p.theta)

    def update(self, odom_pose: Pose2, timestamp: float,
               scan_source: Optional[Callable[[], SemanticScan]] = None) -> Pose2:
        if timestamp - self.last_keyframe_time + 1e-9 < self.config["keyframe_interval"]:
            return self.estimate(odom_pose)

        relative = self.last_odom.between(odom_pose)
        node = self.graph.add_odometry_factor(
            self.graph.latest, None, relative, diag_covariance(self.config["odometry_sigma"]), timestamp
        )
        self.last_odom = Pose2(odom_pose.x, odom_pose.y, odom_pose.theta)
        self.last_keyframe_time = timestamp

        if scan_source is not None and timestamp - self.last_prior_time + 1e-9 >= self.config["prior_interval"]:
            self.last_prior_time = timestamp
            self._global_update(node, odom_pose, scan_source())
        return self.estimate(odom_pose)

    def _global_update(self, node: int, odom_pose: Pose2, scan: SemanticScan):
        initial = self.estimate(odom_pose)
        local = self.geometry.crop(initial.translation, SENSOR_CONFIG["scan_range"] + 10.0)
        try:
            result = register(scan, local, initial)
        except LocalizationError as e:
            self.rejected += 1
            logger.warning(f"⚠️ Регистрация не удалась: {e}")
            return
        if not result.converged:
            self.rejected += 1
            logger.debug(f"Регистрация отклонена: rmse {result.rmse:.3f}, inliers {result.inlier_fraction:.2f}")
            return
        self.graph.add_prior_factor(node, result.pose, diag_covariance(self.config["prior_sigma"]))
        self.graph.optimize()
        self.transform = self.graph.map_to_odom(odom_pose)
        self.registrations += 1
