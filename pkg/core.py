"""
Основной модуль навигационного ядра
Инициализация и координация маршрутизации, локализации, исследования и симуляции
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional

import numpy as np

from explore import DoorObservation, Exhausted, ExploreError, Waypoint, plan_exploration, search_door
from geoloc import Localizer, LocalizationError, Pose2
from globals import EPISODE_CONFIG, ROBOT_CONFIG
from osm_core import OsmDocument, OsmError, apply_map_update, project
from routing import RoutingEngine, RoutingError
from simworld import (
    OCCUPIED, NoPath, Simulation, WorldModel, follow, nearest_traversable, path_to_world, plan_path
)
from taskplan import PlannedTask, TaskMode, TaskPlan, plan_tasks
from utils import normalize_angle

logger = logging.getLogger(__name__)


class _TaskTimeout(Exception):
    pass


@dataclass
class TaskOutcome:
    reached: bool
    reason: Optional[str] = None
    observation: Optional[DoorObservation] = None
    map_revision: int = 0


class NavigationCore:
    def __init__(self, world: WorldModel, scenario, document: Optional[OsmDocument] = None):
        self.world = world
        self.scenario = scenario
        self.document = document if document is not None else scenario.document

        # Компоненты системы
        self.routing = None
        self.simulation = None
        self.localizer = None
        self.door_sensor = None

        # Настройки
        self.config = EPISODE_CONFIG
        self.robot_config = ROBOT_CONFIG
        self.model = scenario.model

        # Состояние
        self.is_initialized = False
        self.estimate: Optional[Pose2] = None
        self.deadline = math.inf

        # Статистика
        self.total_tasks = 0
        self.completed_tasks = 0
        self.failed_tasks = 0
        self.total_replans = 0
        self.map_updates = 0
        self.timeouts = 0

    def initialize(self):
        """Инициализация навигационного ядра"""
        try:
            logger.info("🔧 Инициализация навигационного ядра...")

            self._initialize_simulation()
            self._initialize_routing()
            self._initialize_localizer()

            if not self._validate_initialization():
                raise RuntimeError("Не удалось завершить инициализацию")

            self.is_initialized = True
            logger.info("✅ Навигационное ядро инициализировано")

        except Exception as e:
            logger.error(f"Ошибка инициализации навигационного ядра: {e}")
            raise

    def _initialize_simulation(self):
        try:
            start = project(self.scenario.start, self.document.origin)
            pose = Pose2(start.x, start.y, self.model.start.theta)
            self.simulation = Simulation(self.world, pose, self.model.noise.to_noise(), self.model.seed)
            self.door_sensor = self.simulation.door_sensor(self.model.sensors.p_detect)
            self.estimate = pose
            logger.info(f"🤖 Робот в ({pose.x:.1f}, {pose.y:.1f}), зерно {self.model.seed}")
        except Exception as e:
            logger.error(f"Ошибка инициализации симуляции: {e}")
            raise

    def _initialize_routing(self):
        try:
            self.routing = RoutingEngine(self.document, self.model.profile)
            logger.info(
                f"🗺 Маршрутизация: {self.routing.graph.n_vertices} вершин, "
                f"{self.routing.overlay.shortcut_count} ярлыков"
            )
        except Exception as e:
            logger.error(f"Ошибка инициализации маршрутизации: {e}")
            raise

    def _initialize_localizer(self):
        if not self.model.localization:
            logger.info("Локализация отключена, используется одометрия")
            return
        try:
            self.localizer = Localizer(self.world.geometry, self.estimate, self.simulation.time)
        except Exception as e:
            logger.error(f"Ошибка инициализации локализации: {e}")
            raise

    def _validate_initialization(self) -> bool:
        if self.simulation is None or self.routing is None:
            logger.error("❌ Компоненты не инициализированы")
            return False
        if self.world.costmap.is_occupied(self.estimate.translation):
            logger.error("❌ Старт внутри препятствия")
            return False
        return True

    # --- планирование ---

    def plan(self) -> TaskPlan:
        return plan_tasks(self.model.instruction, self.document, start=self.scenario.start)

    # --- движение ---

    def _tick(self, cmd):
        if self.simulation.time >= self.deadline:
            raise _TaskTimeout()
        state = self.simulation.advance(cmd)
        if self.localizer is not None:
            self.estimate = self.localizer.update(state.odom_pose, state.time, self.simulation.scan)
        else:
            self.estimate = state.odom_pose

    def _drive_path(self, path: np.ndarray, tolerance: float) -> bool:
        length = float(np.sum(np.linalg.norm(np.diff(path, axis=0), axis=1))) if len(path) > 1 else 0.0
        budget = self.simulation.time + 3.0 * length / self.robot_config["cruise_v"] + 20.0
        while self.simulation.time < budget:
            if np.linalg.norm(self.estimate.translation - path[-1]) <= tolerance:
                return True
            self._tick(follow(path, self.estimate))
        return False

    def _leg(self, goal: np.ndarray, tolerance: float) -> bool:
        costmap = self.world.costmap
        for attempt in range(self.config["max_replans"] + 1):
            start = self.estimate.translation
            if costmap.state_at(start) == OCCUPIED:
                start = nearest_traversable(costmap, start, free_only=False)
            path = path_to_world(costmap, plan_path(costmap, start, goal))
            path[-1] = goal
            if self._drive_path(path, tolerance):
                return True
            self.total_replans += 1
            logger.debug(f"Перепланирование {attempt + 1} к ({goal[0]:.1f}, {goal[1]:.1f})")
        return False

    def _subgoals(self, polyline: np.ndarray) -> List[np.ndarray]:
        spacing = self.config["subgoal_spacing"]
        segments = np.linalg.norm(np.diff(polyline, axis=0), axis=1)
        cumulative = np.concatenate([[0.0], np.cumsum(segments)])
        total = cumulative[-1]
        marks = np.arange(spacing, total, spacing)
        points = [np.array([np.interp(s, cumulative, polyline[:, 0]), np.interp(s, cumulative, polyline[:, 1])])
                  for s in marks]
        return points + [polyline[-1]]

    def drive_to(self, goal_xy, tolerance: Optional[float] = None) -> bool:
        """Маршрут по дорогам, затем A* по отрезкам до подцелей"""
        tolerance = self.robot_config["goal_tolerance"] if tolerance is None else tolerance
        costmap = self.world.costmap
        goal = nearest_traversable(costmap, goal_xy)
        points = [self.estimate.translation]
        try:
            route = self.routing.route_local(self.estimate.translation, goal)
            points.extend(route.xy)
        except RoutingError as e:
            logger.debug(f"Без дорожного маршрута: {e}")
        points.append(goal)

        subgoals = self._subgoals(np.array(points))
        for subgoal in subgoals[:-1]:
            target = nearest_traversable(costmap, subgoal)
            if not self._leg(target, self.robot_config["lookahead"]):
                return False
        return self._leg(subgoals[-1], tolerance)

    def _turn_to(self, heading: float):
        max_w = self.robot_config["max_w"]
        while True:
            error = normalize_angle(heading - self.estimate.theta)
            if abs(error) < 0.05:
                return
            self._tick((0.0, float(np.clip(2.0 * error, -max_w, max_w))))

    def _visit(self, waypoint: Waypoint):
        try:
            target = nearest_traversable(self.world.costmap, waypoint.position)
            self._leg(target, self.robot_config["goal_tolerance"])
        except NoPath as e:
            logger.debug(f"Точка обхода пропущена: {e}")
        self._turn_to(waypoint.heading)
        return self.simulation.state.true_pose

    # --- выполнение задачи ---

    def _explore(self, item: PlannedTask) -> TaskOutcome:
        address = item.task.address
        ring = plan_exploration(self.document, item.resolution.element_id, self.estimate.translation)
        if not self.drive_to(ring.waypoints[0].position):
            return TaskOutcome(False, "could not reach building")
        found = search_door(ring, self.door_sensor, address, self._visit)
        if isinstance(found, Exhausted):
            return TaskOutcome(False, f"door not found after {found.visited} waypoints")

        if self.model.map_update:
            self.document = apply_map_update(self.document, found, address)
            self.map_updates += 1
        door_xy = project(found.position, self.document.origin).as_array()
        reached = self.drive_to(door_xy)
        return TaskOutcome(reached, None if reached else "final approach failed", found, self.document.revision)

    def execute(self, item: PlannedTask) -> TaskOutcome:
        """Одна задача доставки; ошибки модулей превращаются в неуспех задачи"""
        self.total_tasks += 1
        self.deadline = self.simulation.time + self.config["task_timeout"]
        logger.info(f"🚚 Задача {item.task.address.label()}: {item.mode.value}")
        try:
            if item.mode == TaskMode.NAVIGATE_THEN_EXPLORE and item.resolution.resolved_level == "building":
                outcome = self._explore(item)
            else:
                target = project(item.target, self.document.origin).as_array()
                reached = self.drive_to(target)
                outcome = TaskOutcome(reached, None if reached else "navigation failed",
                                      map_revision=self.document.revision)
        except _TaskTimeout:
            self.timeouts += 1
            outcome = TaskOutcome(False, "timeout", map_revision=self.document.revision)
        except (RoutingError, NoPath, ExploreError, OsmError, LocalizationError) as e:
            logger.warning(f"⚠️ Задача прервана: {e}")
            outcome = TaskOutcome(False, f"{e.__class__.__name__}: {e}", map_revision=self.document.revision)
        finally:
            self.deadline = math.inf

        if outcome.reached:
            self.completed_tasks += 1
        else:
            self.failed_tasks += 1
        return outcome

    def shutdown(self):
        logger.info(f"🛑 Навигационное ядро остановлено: {self.completed_tasks}/{self.total_tasks} задач")
        self.is_initialized = False

    def get_status(self) -> Dict[str, Any]:
        """Получение статуса ядра"""
        localizer = self.localizer
        return {
            "is_initialized": self.is_initialized,
            "sim_time": self.simulation.time if self.simulation else 0.0,
            "total_tasks": self.total_tasks,
            "completed_tasks": self.completed_tasks,
            "failed_tasks": self.failed_tasks,
            "total_replans": self.total_replans,
            "map_updates": self.map_updates,
            "map_revision": self.document.revision,
            "timeouts": self.timeouts,
            "collisions": self.simulation.collisions if self.simulation else 0,
            "registrations": localizer.registrations if localizer else 0,
            "rejected_registrations": localizer.rejected if localizer else 0,
            "door_queries": self.door_sensor.queries if self.door_sensor else 0
        }
