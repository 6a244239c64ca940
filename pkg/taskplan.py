"""
Планирование задач доставки
Разбор инструкций, проверка, привязка к OSM, порядок объезда и SRTP
"""

import json
import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, TypeAdapter, ValidationError

from globals import TASKPLAN_CONFIG
from osm_core import (
    Address, AddressNotFound, AddressResolution, GeoPoint, OsmDocument,
    normalize_token, project, query_address
)

logger = logging.getLogger(__name__)


class TaskPlanError(Exception):
    """Базовая ошибка планирования"""


class GrammarError(TaskPlanError):
    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} (позиция {position})")


class AdapterError(TaskPlanError):
    pass


@dataclass(frozen=True)
class ParsedTask:
    address: Address
    package: str
    span: Tuple[int, int]


class ParserAdapter(Protocol):
    deterministic: bool

    def parse(self, text: str) -> List[ParsedTask]:
        ...


# --- эталонная грамматика ---

_CLAUSE = re.compile(r"^(\s*)(?:then\s+)?deliver\s+(?P<package>\S.*?)\s+to\s+(?P<address>\S.*?)\s*$",
                     re.IGNORECASE | re.DOTALL)
_UNIT = re.compile(r"^unit\s+(?P<value>\S+)$", re.IGNORECASE)
_BUILDING = re.compile(r"^building\s+(?P<value>\S+)$", re.IGNORECASE)


class ReferenceParser:
    """
    Детерминированный разбор грамматики:

        instruction := clause (";" clause)* "."
        clause      := ["then"] "Deliver" PACKAGE "to" address
        address     := [unit ","] building ["," street] ["," region]
    """

    deterministic = True

    def parse(self, text: str) -> List[ParsedTask]:
        body = text.rstrip()
        if not body.endswith("."):
            raise GrammarError("Инструкция должна заканчиваться точкой", len(body))
        body = body[:-1]

        tasks = []
        start = 0
        for clause in body.split(";"):
            tasks.append(self._parse_clause(clause, start))
            start += len(clause) + 1
        return tasks

    def _parse_clause(self, clause: str, offset: int) -> ParsedTask:
        match = _CLAUSE.match(clause)
        if not match:
            raise GrammarError("Ожидалось 'Deliver <посылка> to <адрес>'", offset + len(clause) - len(clause.lstrip()))
        address_start = offset + match.start("address")
        components = self._split(match.group("address"), address_start)

        values = {}
        first_text, first_pos = components.pop(0)
        unit = _UNIT.match(first_text)
        if unit:
            values["unit"] = unit.group("value")
            if not components:
                raise GrammarError("Квартира без здания", first_pos + len(first_text))
            first_text, first_pos = components.pop(0)
        building = _BUILDING.match(first_text)
        if not building:
            raise GrammarError("Ожидалось 'Building <номер>'", first_pos)
        values["building"] = building.group("value")

        if len(components) == 1:
            values["region"] = components[0][0]
        elif len(components) == 2:
            values["street"] = components[0][0]
            values["region"] = components[1][0]
        elif len(components) > 2:
            raise GrammarError("Лишние части адреса", components[2][1])

        span_start = offset + len(match.group(1))
        span_end = offset + match.end("address")
        return ParsedTask(Address(**values), match.group("package"), (span_start, span_end))

    @staticmethod
    def _split(address: str, offset: int) -> List[Tuple[str, int]]:
        parts = []
        position = offset
        for raw in address.split(","):
            stripped = raw.strip()
            if not stripped:
                raise GrammarError("Пустая часть адреса", position)
            parts.append((stripped, position + len(raw) - len(raw.lstrip())))
            position += len(raw) + 1
        return parts


# --- внешний адаптер ---

class TaskSchema(BaseModel):
    model_config = ConfigDict(extra="forbid")

    package: str
    region: Optional[str] = None
    street: Optional[str] = None
    building: str
    unit: Optional[str] = None


_TASK_LIST = TypeAdapter(List[TaskSchema])

ADAPTER_PROMPT = (
    "Extract every delivery from the instruction below. Answer with a JSON array only, "
    "each item {{\"package\", \"region\"?, \"street\"?, \"building\", \"unit\"?}}.\n"
    "Instruction: {text}"
)


class JsonAdapter:
    """Адаптер внешней модели: текст -> JSON по строгой схеме"""

    deterministic = False

    def __init__(self, complete: Callable[[str, float], str]):
        self.config = TASKPLAN_CONFIG
        self.complete = complete

    def parse(self, text: str) -> List[ParsedTask]:
        prompt = ADAPTER_PROMPT.format(text=text)
        last_error = None
        for attempt in range(1 + self.config["adapter_retries"]):
            try:
                response = self.complete(prompt, self.config["adapter_timeout"])
            except Exception as e:
                raise AdapterError(f"Ошибка вызова модели: {e}") from e
            try:
                items = _TASK_LIST.validate_json(response)
            except ValidationError as e:
                last_error = e
                logger.warning(f"⚠️ Ответ модели не прошёл схему (попытка {attempt + 1}): {e.error_count()} ошибок")
                continue
            span = (0, len(text))
            return [
                ParsedTask(Address(item.region, item.street, item.building, item.unit), item.package, span)
                for item in items
            ]
        raise AdapterError(f"Ответ модели не соответствует схеме: {last_error}")


def parse_instruction(text: str, adapter: Optional[ParserAdapter] = None) -> List[ParsedTask]:
    if not text or not text.strip():
        raise ValueError("Пустая инструкция")
    return (adapter or ReferenceParser()).parse(text)


# --- проверка ---

@dataclass(frozen=True)
class TaskCheck:
    traceable: bool
    contiguous: bool
    untraced: Tuple[str, ...] = ()

    @property
    def passed(self) -> bool:
        return self.traceable and self.contiguous


@dataclass(frozen=True)
class VerificationReport:
    checks: Tuple[TaskCheck, ...]

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)


def _contains_token(haystack: str, token: str) -> bool:
    return re.search(r"(?<!\w)" + re.escape(token) + r"(?!\w)", haystack) is not None


def verify_tasks(tasks: Sequence[ParsedTask], text: str) -> VerificationReport:
    """Каждое значение адреса должно встречаться в своём фрагменте исходного текста"""
    checks = []
    for task in tasks:
        start, end = task.span
        valid_span = 0 <= start <= end <= len(text)
        source = normalize_token(text[start:end]) if valid_span else None
        untraced = tuple(
            value for value in task.address.tokens().values()
            if source is None or not _contains_token(source, value)
        )
        checks.append(TaskCheck(
            traceable=valid_span and not untraced,
            contiguous=task.address.is_contiguous and not task.address.is_empty,
            untraced=untraced
        ))
    return VerificationReport(tuple(checks))


# --- план ---

class TaskMode(str, Enum):
    NAVIGATE_DIRECT = "NavigateDirect"
    NAVIGATE_THEN_EXPLORE = "NavigateThenExplore"


def mode_for(resolution: AddressResolution) -> TaskMode:
    if resolution.missing_levels:
        return TaskMode.NAVIGATE_THEN_EXPLORE
    return TaskMode.NAVIGATE_DIRECT


@dataclass
class PlannedTask:
    index: int
    task: ParsedTask
    planned: bool = False
    mode: Optional[TaskMode] = None
    resolution: Optional[AddressResolution] = None
    reason: Optional[str] = None

    @property
    def target(self) -> Optional[GeoPoint]:
        return self.resolution.position if self.resolution else None

    @property
    def flag(self) -> int:
        return int(self.planned)


@dataclass
class TaskPlan:
    tasks: List[PlannedTask] = field(default_factory=list)

    @property
    def flags(self) -> List[int]:
        return [t.flag for t in self.tasks]

    @property
    def srtp(self) -> float:
        return srtp(self.flags)


def resolve_locations(doc: OsmDocument, tasks: Sequence[ParsedTask],
                      report: Optional[VerificationReport] = None) -> TaskPlan:
    """Привязка задач к OSM; ошибка одной задачи не прерывает остальные"""
    plan = TaskPlan()
    for i, task in enumerate(tasks):
        item = PlannedTask(index=i, task=task)
        plan.tasks.append(item)
        if report is not None and not report.checks[i].passed:
            item.reason = f"verification failed: {', '.join(report.checks[i].untraced) or 'hierarchy'}"
            continue
        try:
            item.resolution = query_address(doc, task.address)
        except (AddressNotFound, ValueError) as e:
            item.reason = f"address not resolved: {e}"
            logger.warning(f"⚠️ Задача {i}: {item.reason}")
            continue
        item.mode = mode_for(item.resolution)
        item.planned = True
    return plan


# --- порядок объезда ---

def _groups(points: np.ndarray, radius: float) -> List[int]:
    parent = list(range(len(points)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            if np.linalg.norm(points[i] - points[j]) <= radius:
                parent[max(find(i), find(j))] = min(find(i), find(j))
    return [find(i) for i in range(len(points))]


def tour_length(points: np.ndarray, start: np.ndarray, order: Sequence[int]) -> float:
    if not len(order):
        return 0.0
    path = np.vstack([start[None, :], points[list(order)]])
    return float(np.sum(np.linalg.norm(np.diff(path, axis=0), axis=1)))


def _contiguous(order: Sequence[int], group: List[int]) -> bool:
    seen = {}
    for k, i in enumerate(order):
        seen.setdefault(group[i], []).append(k)
    return all(ks[-1] - ks[0] + 1 == len(ks) for ks in seen.values())


def _nearest_neighbor(points: np.ndarray, start: np.ndarray, group: List[int]) -> List[int]:
    remaining = set(range(len(points)))
    order: List[int] = []
    current = start
    while remaining:
        nxt = min(remaining, key=lambda i: (np.linalg.norm(points[i] - current), i))
        members = {i for i in remaining if group[i] == group[nxt]}
        while members:
            order.append(nxt)
            members.discard(nxt)
            remaining.discard(nxt)
            current = points[nxt]
            if members:
                nxt = min(members, key=lambda i: (np.linalg.norm(points[i] - current), i))
    return order


def _improve(points: np.ndarray, start: np.ndarray, order: List[int], group: List[int]) -> List[int]:
    """2-opt и or-opt на открытом пути, пока есть улучшения"""
    best = tour_length(points, start, order)
    n = len(order)
    improved = True
    while improved:
        improved = False
        candidates = []
        for i in range(n - 1):
            for j in range(i + 1, n):
                candidates.append(order[:i] + order[i:j + 1][::-1] + order[j + 1:])
        for size in (1, 2, 3):
            for i in range(n - size + 1):
                block = order[i:i + size]
                rest = order[:i] + order[i + size:]
                for k in range(len(rest) + 1):
                    if k != i:
                        candidates.append(rest[:k] + block + rest[k:])
        for candidate in candidates:
            length = tour_length(points, start, candidate)
            if length < best - 1e-9 and _contiguous(candidate, group):
                order, best = candidate, length
                improved = True
                break
    return order


def optimize_order(points: np.ndarray, start: np.ndarray, group_radius: Optional[float] = None) -> List[int]:
    """Порядок объезда точек (локальные координаты) из стартовой позиции"""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(points)
    if n <= 1:
        return list(range(n))
    radius = TASKPLAN_CONFIG["group_radius"] if group_radius is None else group_radius
    group = _groups(points, radius)
    order = _improve(points, start, _nearest_neighbor(points, start, group), group)
    identity = list(range(n))
    identity_shorter = tour_length(points, start, order) > tour_length(points, start, identity)
    if identity_shorter and _contiguous(identity, group):
        return identity
    return order


def optimize_sequence(tasks: Sequence, positions: Sequence[GeoPoint], start: GeoPoint) -> List:
    """Задачи в порядке объезда; близкие (30 м) задачи идут подряд"""
    if len(tasks) != len(positions):
        raise ValueError("Каждой задаче нужна позиция")
    points = np.array([project(p, start).as_array() for p in positions]).reshape(-1, 2)
    order = optimize_order(points, np.zeros(2))
    return [tasks[i] for i in order]


def plan_tasks(text: str, doc: OsmDocument, adapter: Optional[ParserAdapter] = None,
               start: Optional[GeoPoint] = None) -> TaskPlan:
    """Полный конвейер: разбор, проверка, привязка, порядок"""
    tasks = parse_instruction(text, adapter)
    report = verify_tasks(tasks, text)
    plan = resolve_locations(doc, tasks, report)
    if start is not None:
        planned = [t for t in plan.tasks if t.planned]
        failed = [t for t in plan.tasks if not t.planned]
        plan.tasks = optimize_sequence(planned, [t.target for t in planned], start) + failed
    logger.info(f"📋 План: {sum(plan.flags)}/{len(plan.tasks)} задач спланировано")
    return plan


def srtp(flags: Sequence[int]) -> float:
    """Доля успешно спланированных задач"""
    if len(flags) == 0:
        raise ValueError("SRTP не определён для пустого набора задач")
    if any(f not in (0, 1) for f in flags):
        raise ValueError("Флаги T_i должны быть 0 или 1")
    return sum(flags) / len(flags)


# --- оценка корпуса ---

@dataclass(frozen=True)
class CorpusEntry:
    instruction: str
    expected: Tuple[Address, ...]


@dataclass(frozen=True)
class TaskGrade:
    index: int
    instruction: str
    passed: bool
    reason: Optional[str] = None


@dataclass(frozen=True)
class CorpusGrade:
    grades: Tuple[TaskGrade, ...]

    @property
    def flags(self) -> List[int]:
        return [int(g.passed) for g in self.grades]

    @property
    def srtp(self) -> float:
        return srtp(self.flags)

    @property
    def failures(self) -> List[TaskGrade]:
        return [g for g in self.grades if not g.passed]


def _grade_entry(entry: CorpusEntry, doc: OsmDocument, adapter: Optional[ParserAdapter]) -> Optional[str]:
    try:
        tasks = parse_instruction(entry.instruction, adapter)
    except (TaskPlanError, ValueError) as e:
        return f"parse: {e}"
    if tuple(t.address for t in tasks) != tuple(entry.expected):
        return "parse: addresses differ from expected"
    report = verify_tasks(tasks, entry.instruction)
    if not report.passed:
        return "verification failed"
    plan = resolve_locations(doc, tasks, report)
    failed = [t.reason for t in plan.tasks if not t.planned]
    if failed:
        return f"resolve: {failed[0]}"
    return None


def grade_corpus(corpus: Sequence[CorpusEntry], doc: OsmDocument,
                 adapter: Optional[ParserAdapter] = None) -> CorpusGrade:
    """Оценка SRTP по корпусу: одна инструкция = одна задача"""
    grades = []
    for i, entry in enumerate(corpus):
        reason = _grade_entry(entry, doc, adapter)
        grades.append(TaskGrade(i, entry.instruction, reason is None, reason))
    result = CorpusGrade(tuple(grades))
    logger.info(f"📊 SRTP {result.srtp:.3f} ({sum(result.flags)}/{len(grades)})")
    return result
