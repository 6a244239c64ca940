"""
Бенчмарк доставки: сценарии, эпизоды, метрики SRTP/SR/SPL/LSR/LSPL и отчёты
"""

import asyncio
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from scipy.sparse.csgraph import dijkstra

from globals import EPISODE_CONFIG, METRIC_CONFIG, NOISE_DEFAULTS, SENSOR_CONFIG
from osm_core import Address, GeoPoint, OsmDocument, parse_osm, project
from simworld import (
    OCCUPIED, Costmap, NoiseModel, NoPath, WorldModel, build_world, grid_graph,
    load_door_table, nearest_traversable
)
from taskplan import TaskMode
from utils import content_hash

logger = logging.getLogger(__name__)


class BenchError(Exception):
    """Базовая ошибка бенчмарка"""


class SchemaError(BenchError):
    def __init__(self, pointers: List[str]):
        self.pointers = pointers
        super().__init__("Сценарий не прошёл проверку схемы: " + "; ".join(pointers))


class UnreachableGoal(BenchError):
    pass


# --- схема сценария ---

class NoiseModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    sigma_v: float = Field(NOISE_DEFAULTS["sigma_v"], ge=0)
    sigma_w: float = Field(NOISE_DEFAULTS["sigma_w"], ge=0)
    sigma_s: float = Field(NOISE_DEFAULTS["sigma_s"], ge=0)
    outlier_rate: float = Field(NOISE_DEFAULTS["outlier_rate"], ge=0, le=1)
    outlier_sigma: float = Field(NOISE_DEFAULTS["outlier_sigma"], ge=0)
    label_flip: float = Field(NOISE_DEFAULTS["label_flip"], ge=0, le=1)

    def to_noise(self) -> NoiseModel:
        return NoiseModel(**self.model_dump())


class SensorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    p_detect: float = Field(SENSOR_CONFIG["p_detect"], ge=0, le=1)


class MetricConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    decay_rate: float = Field(METRIC_CONFIG["decay_rate"], gt=0, lt=1)
    success_radius: float = Field(METRIC_CONFIG["success_radius"], gt=0)
    normalization: Literal["normalized", "literal"] = METRIC_CONFIG["normalization"]


class StartPose(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lat: float = Field(ge=-90, le=90)
    lon: float = Field(ge=-180, le=180)
    theta: float = 0.0


class ExpectedAddress(BaseModel):
    model_config = ConfigDict(extra="forbid")

    region: Optional[str] = None
    street: Optional[str] = None
    building: Optional[str] = None
    unit: Optional[str] = None

    @model_validator(mode="after")
    def _contiguous(self):
        address = self.to_address()
        if address.is_empty or not address.is_contiguous:
            raise ValueError("адрес пуст или квартира указана без здания")
        return self

    def to_address(self) -> Address:
        return Address(self.region, self.street, self.building, self.unit)


class ScenarioModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "scenario"
    osm: str
    doors: Union[str, List[Dict[str, Any]]] = Field(default_factory=list)
    start: StartPose
    instruction: str = Field(min_length=1)
    expected: List[ExpectedAddress] = Field(default_factory=list)
    seed: int
    noise: NoiseModelConfig = Field(default_factory=NoiseModelConfig)
    sensors: SensorConfig = Field(default_factory=SensorConfig)
    metrics: MetricConfig = Field(default_factory=MetricConfig)
    map_update: bool = True
    localization: bool = True
    profile: Literal["pedestrian", "vehicle"] = "pedestrian"


def json_pointers(error: ValidationError) -> List[str]:
    """Ошибки pydantic в виде JSON-указателей: /metrics/decay_rate: ..."""
    pointers = []
    for item in error.errors():
        path = "/" + "/".join(str(part) for part in item["loc"])
        pointers.append(f"{path}: {item['msg']}")
    return pointers


@dataclass
class Scenario:
    model: ScenarioModel
    document: OsmDocument
    door_table: List[Dict[str, Any]]
    base_dir: Path = field(default_factory=Path)

    @property
    def name(self) -> str:
        return self.model.name

    @property
    def start(self) -> GeoPoint:
        return GeoPoint(self.model.start.lat, self.model.start.lon)

    def with_instruction(self, instruction: str, name: Optional[str] = None) -> "Scenario":
        model = self.model.model_copy(update={"instruction": instruction, "expected": [],
                                              "name": name or self.model.name})
        return Scenario(model, self.document, self.door_table, self.base_dir)


def scenario_from_dict(data: Dict[str, Any], base_dir: Union[str, Path] = ".",
                       seed: Optional[int] = None) -> Scenario:
    base = Path(base_dir)
    try:
        model = ScenarioModel.model_validate(data)
    except ValidationError as e:
        raise SchemaError(json_pointers(e)) from None
    if seed is not None:
        model = model.model_copy(update={"seed": seed})
    osm_path = base / model.osm
    if not osm_path.exists():
        raise BenchError(f"Файл карты не найден: {osm_path}")
    document = parse_osm(osm_path.read_bytes())
    doors = load_door_table(base / model.doors) if isinstance(model.doors, str) else load_door_table(model.doors)
    return Scenario(model, document, doors, base)


def load_scenario(path: Union[str, Path], seed: Optional[int] = None) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise BenchError(f"Файл сценария не найден: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SchemaError([f"/: некорректный JSON ({e.msg}, строка {e.lineno})"]) from None
    return scenario_from_dict(data, path.parent, seed)


# --- метрики ---

def weights(r: float, n: int) -> np.ndarray:
    """c_i = r^(i-1)(1-r)/(1-r^n)"""
    if not 0.0 < r < 1.0:
        raise ValueError(f"Коэффициент затухания вне (0, 1): {r}")
    if n < 1:
        raise ValueError("Нужна хотя бы одна задача")
    i = np.arange(n)
    return r ** i * (1.0 - r) / (1.0 - r ** n)


def _check(results: Sequence) -> None:
    if len(results) == 0:
        raise ValueError("Пустой список результатов")


def _efficiency(result) -> float:
    if not result.S:
        return 0.0
    l = result.l or 0.0
    longest = max(result.p, l)
    return 1.0 if longest <= 0.0 else l / longest


def sr(results: Sequence) -> float:
    _check(results)
    return float(np.mean([r.S for r in results]))


def spl(results: Sequence) -> float:
    _check(results)
    return float(np.mean([_efficiency(r) for r in results]))


def _long_term(values: np.ndarray, cfg: Optional[MetricConfig]) -> float:
    cfg = cfg or MetricConfig()
    c = weights(cfg.decay_rate, len(values))
    value = float(np.sum(c * values) / np.sum(c))
    if cfg.normalization == "literal":
        value /= len(values)
    return value


def lsr(results: Sequence, cfg: Optional[MetricConfig] = None) -> float:
    _check(results)
    return _long_term(np.array([r.S for r in results], dtype=float), cfg)


def lspl(results: Sequence, cfg: Optional[MetricConfig] = None) -> float:
    _check(results)
    return _long_term(np.array([_efficiency(r) for r in results]), cfg)


# --- оракул кратчайшего пути ---

class ShortestPathOracle:
    """Дейкстра по сетке карты стоимости, евклидовы веса в метрах"""

    def __init__(self, costmap: Costmap):
        self.costmap = costmap
        self.graph = grid_graph(costmap)

    def _index(self, xy) -> int:
        cell = self.costmap.to_cell(xy)
        if self.costmap.state(cell) == OCCUPIED:
            raise UnreachableGoal(f"Точка {tuple(np.round(xy, 2))} в занятой клетке")
        return cell[1] * self.costmap.shape[1] + cell[0]

    def length(self, start, goal) -> float:
        s = self._index(start)
        g = self._index(goal)
        if s == g:
            return 0.0
        distance = dijkstra(self.graph, directed=True, indices=s)[g]
        if not np.isfinite(distance):
            raise UnreachableGoal(f"Цель {tuple(np.round(goal, 2))} недостижима")
        return float(distance)


def shortest_length_oracle(world: WorldModel, start, goal) -> float:
    return ShortestPathOracle(world.costmap).length(start, goal)


# --- результаты ---

@dataclass
class TaskResult:
    task: int
    label: str
    T: int = 0
    S: int = 0
    l: Optional[float] = None
    p: float = 0.0
    duration: float = 0.0
    collisions: int = 0
    mode: Optional[str] = None
    final_distance: Optional[float] = None
    reason: Optional[str] = None
    trajectory: List[List[float]] = field(default_factory=list, repr=False)

    def row(self) -> Dict[str, Any]:
        return {
            "task": self.task, "T": self.T, "S": self.S,
            "l": _round(self.l), "p": _round(self.p), "duration": _round(self.duration),
            "collisions": self.collisions, "mode": self.mode, "reason": self.reason
        }


@dataclass
class EpisodeResult:
    scenario: str
    tasks: List[TaskResult]
    metric_config: MetricConfig = field(default_factory=MetricConfig)
    document: Optional[OsmDocument] = field(default=None, repr=False)
    status: Dict[str, Any] = field(default_factory=dict)

    def metrics(self) -> Dict[str, Optional[float]]:
        if not self.tasks:
            return {"SRTP": None, "SR": None, "SPL": None, "LSR": None, "LSPL": None}
        return {
            "SRTP": _round(sum(t.T for t in self.tasks) / len(self.tasks)),
            "SR": _round(sr(self.tasks)),
            "SPL": _round(spl(self.tasks)),
            "LSR": _round(lsr(self.tasks, self.metric_config)),
            "LSPL": _round(lspl(self.tasks, self.metric_config))
        }

    @property
    def has_failures(self) -> bool:
        return any(not t.S for t in self.tasks)


def _round(value: Optional[float]) -> Optional[float]:
    return None if value is None else round(float(value), 9)


def _ground_truth_door(world: WorldModel, address: Address):
    for door in world.doors:
        if door.address.building == address.building and (address.unit is None or door.address.unit == address.unit):
            return door
    return None


def run_episode(scenario: Scenario, document: Optional[OsmDocument] = None) -> EpisodeResult:
    """Последовательное выполнение всех задач сценария без сбросов"""
    from core import NavigationCore

    model = scenario.model
    world = build_world(scenario.document, scenario.door_table)
    oracle = ShortestPathOracle(world.costmap)
    navigation = NavigationCore(world, scenario, document=document)
    navigation.initialize()
    plan = navigation.plan()
    expected = [e.to_address() for e in model.expected]
    radius = model.metrics.success_radius

    results = []
    for k, item in enumerate(plan.tasks):
        address = item.task.address
        result = TaskResult(task=k + 1, label=address.label(), mode=item.mode.value if item.mode else None)
        result.T = int(item.planned and (not expected or (item.index < len(expected)
                                                          and expected[item.index] == address)))
        sim = navigation.simulation
        start_xy = sim.state.true_pose.translation
        t0, d0, c0 = sim.time, sim.distance, sim.collisions
        trace_start = len(sim.trace) - 1
        door = _ground_truth_door(world, address)

        if door is not None:
            try:
                approach = nearest_traversable(world.costmap, door.xy)
                result.l = oracle.length(start_xy, approach)
            except (UnreachableGoal, NoPath) as e:
                result.reason = f"l undefined: {e}"
        else:
            result.reason = "no ground-truth door for address"

        if item.planned:
            outcome = navigation.execute(item)
            if outcome.reason and not result.reason:
                result.reason = outcome.reason
        elif not result.reason:
            result.reason = item.reason

        final = navigation.simulation.state.true_pose.translation
        if door is not None:
            result.final_distance = float(np.linalg.norm(final - door.xy))
        result.S = int(item.planned and result.l is not None and result.final_distance is not None
                       and result.final_distance <= radius)
        result.p = sim.distance - d0
        result.duration = sim.time - t0
        result.collisions = sim.collisions - c0
        result.trajectory = [list(p) for p in sim.trace[trace_start:]]
        logger.info(
            f"{'✅' if result.S else '❌'} Задача {result.task} {result.label}: S={result.S} "
            f"p={result.p:.1f} м l={result.l if result.l is None else round(result.l, 1)} м"
        )
        results.append(result)

    episode = EpisodeResult(model.name, results, model.metrics, navigation.document, navigation.get_status())
    navigation.shutdown()
    return episode


# --- отчёт ---

def build_report(episodes: Sequence[EpisodeResult]) -> Dict[str, Any]:
    """Отчёт с блоками по сценариям, агрегатом и хешем числовых полей"""
    blocks = []
    for episode in episodes:
        blocks.append({
            "name": episode.scenario,
            "metrics": episode.metrics(),
            "tasks": [t.row() for t in episode.tasks]
        })
    keys = ("SRTP", "SR", "SPL", "LSR", "LSPL")
    aggregate = {}
    for key in keys:
        values = [b["metrics"][key] for b in blocks if b["metrics"][key] is not None]
        aggregate[key] = _round(np.mean(values)) if values else None
    config = {
        "metrics": {e.scenario: e.metric_config.model_dump() for e in episodes},
        "episode": dict(EPISODE_CONFIG)
    }
    report = {"scenarios": blocks, "aggregate": aggregate, "config": config}
    report["hash"] = content_hash({"scenarios": blocks, "aggregate": aggregate})
    return report


def write_outputs(report: Dict[str, Any], episodes: Sequence[EpisodeResult], out_dir) -> Dict[str, Path]:
    from geojson_export import trajectories_collection, write_geojson

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": out / "report.json", "tasks": out / "tasks.csv", "trajectories": out / "trajectories.geojson"}
    paths["report"].write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")

    rows = [dict(scenario=e.scenario, **t.row()) for e in episodes for t in e.tasks]
    columns = ["scenario", "task", "T", "S", "l", "p", "duration", "collisions", "mode", "reason"]
    pd.DataFrame(rows, columns=columns).to_csv(paths["tasks"], index=False, lineterminator="\n")

    write_geojson(trajectories_collection(episodes), paths["trajectories"])
    return paths


async def _persist(database, episodes: Sequence[EpisodeResult]):
    for episode in episodes:
        episode_id = await database.save_episode(episode.scenario, episode.metrics())
        await database.save_tasks(episode_id, [t.row() for t in episode.tasks])


async def run_benchmark_async(scenarios: Sequence[Scenario], out_dir=None, database=None) -> Dict[str, Any]:
    """Параллельный прогон сценариев в рабочих потоках"""
    if not scenarios:
        raise BenchError("Пустой набор сценариев")
    logger.info(f"🚀 Бенчмарк: {len(scenarios)} сценариев")
    outcomes = await asyncio.gather(
        *(asyncio.to_thread(run_episode, scenario) for scenario in scenarios),
        return_exceptions=True
    )
    episodes, errors = [], []
    for scenario, outcome in sorted(zip(scenarios, outcomes), key=lambda pair: pair[0].name):
        if isinstance(outcome, BaseException):
            logger.error(f"Ошибка сценария {scenario.name}: {outcome}")
            errors.append({"scenario": scenario.name, "error": str(outcome)})
        else:
            episodes.append(outcome)

    report = build_report(episodes)
    report["errors"] = errors
    if out_dir is not None:
        write_outputs(report, episodes, out_dir)
    if database is not None:
        await _persist(database, episodes)
    logger.info(f"📊 Бенчмарк завершён: {report['aggregate']}")
    return report


def run_benchmark(scenarios: Sequence[Scenario], out_dir=None, database=None) -> Dict[str, Any]:
    return asyncio.run(run_benchmark_async(scenarios, out_dir, database))


# --- абляция обновления карты ---

@dataclass
class AblationPair:
    label: str
    spl_without: float
    spl_with: float

    @property
    def delta(self) -> float:
        return self.spl_with - self.spl_without


def run_ablation(scenario: Scenario) -> List[AblationPair]:
    """
    Для каждого адреса в режиме исследования: прогон по исходной карте,
    затем прогон того же адреса по карте с добавленным входом
    """
    from core import NavigationCore

    probe = NavigationCore(build_world(scenario.document, scenario.door_table), scenario)
    probe.initialize()
    explore = [t for t in probe.plan().tasks
               if t.planned and t.mode == TaskMode.NAVIGATE_THEN_EXPLORE
               and t.resolution.resolved_level == "building"]
    probe.shutdown()

    pairs = []
    for item in explore:
        a = item.task.address
        parts = [f"Unit {a.unit}"] if a.unit else []
        parts.append(f"Building {a.building}")
        parts += [v for v in (a.street, a.region) if v]
        single = scenario.with_instruction(f"Deliver {item.task.package} to {', '.join(parts)}.",
                                           name=f"{scenario.name}:{a.label()}")
        without = run_episode(single)
        with_update = run_episode(single, document=without.document)
        pairs.append(AblationPair(a.label(), spl(without.tasks), spl(with_update.tasks)))
        logger.info(f"🧪 {a.label()}: SPL {pairs[-1].spl_without:.3f} -> {pairs[-1].spl_with:.3f}")
    return pairs
