"""
Генератор тестовых миров: сетка улиц, прямоугольные здания, входы с адресами
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from globals import STREET_NAMES, WORLD_CONFIG, WORLD_PRESETS
from osm_core import (
    GeoPoint, LocalPoint, OsmDocument, OsmNode, OsmWay, parse_osm, serialize_osm, unproject
)
from routing import Profile, build_road_graph

logger = logging.getLogger(__name__)

MAP_MARGIN = 20.0


class WorldGenError(Exception):
    pass


@dataclass(frozen=True)
class GenWorldSpec:
    blocks: Tuple[int, int] = (2, 2)
    buildings_per_block: int = 2
    seed: int = 1
    region: str = WORLD_CONFIG["region"]
    known_door_fraction: float = WORLD_CONFIG["known_door_fraction"]
    deliveries: int = 5

    def __post_init__(self):
        if min(self.blocks) < 1 or self.buildings_per_block < 1:
            raise ValueError("Нужен хотя бы один квартал и одно здание в квартале")
        if not 0.0 <= self.known_door_fraction <= 1.0:
            raise ValueError("Доля известных входов вне [0, 1]")

    @classmethod
    def preset(cls, name: str, seed: int = 1) -> "GenWorldSpec":
        if name not in WORLD_PRESETS:
            raise ValueError(f"Неизвестный пресет: {name}")
        preset = WORLD_PRESETS[name]
        return cls(blocks=tuple(preset["blocks"]), buildings_per_block=preset["buildings_per_block"], seed=seed)


@dataclass
class GeneratedWorld:
    osm: bytes
    doors: List[Dict[str, Any]]
    scenario: Dict[str, Any]
    document: OsmDocument = field(repr=False, default=None)

    def write(self, out_dir, stem: str = "world") -> Dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "osm": out / f"{stem}.osm",
            "doors": out / "doors.json",
            "scenario": out / "scenario.json"
        }
        paths["osm"].write_bytes(self.osm)
        paths["doors"].write_text(json.dumps(self.doors, indent=2, sort_keys=True), encoding="utf-8")
        scenario = dict(self.scenario, osm=paths["osm"].name, doors=paths["doors"].name)
        paths["scenario"].write_text(json.dumps(scenario, indent=2, sort_keys=True), encoding="utf-8")
        return paths


class _Builder:
    def __init__(self, origin: GeoPoint):
        self.origin = origin
        self.elements: Dict[int, Any] = {}
        self.next_id = 1

    def node(self, xy, tags=None) -> int:
        node_id = self.next_id
        self.next_id += 1
        point = unproject(LocalPoint(float(xy[0]), float(xy[1])), self.origin)
        self.elements[node_id] = OsmNode(node_id, dict(tags or {}), point)
        return node_id

    def way(self, refs, tags) -> int:
        way_id = self.next_id
        self.next_id += 1
        self.elements[way_id] = OsmWay(way_id, dict(tags), tuple(refs))
        return way_id


def _street_names(spec: GenWorldSpec) -> Tuple[List[str], List[str]]:
    bx, by = spec.blocks
    names = []
    for i in range(bx + by + 2):
        name = STREET_NAMES[i % len(STREET_NAMES)]
        lap = i // len(STREET_NAMES)
        names.append(f"{name} {lap + 1}" if lap else name)
    return names[:bx + 1], names[bx + 1:]


def _layout(spec: GenWorldSpec, rng: np.random.Generator) -> List[Dict[str, Any]]:
    """Прямоугольники зданий по слотам кварталов"""
    block = WORLD_CONFIG["block_size"]
    setback = WORLD_CONFIG["setback"]
    gap = WORLD_CONFIG["building_gap"]
    interior = block - 2 * setback
    k = spec.buildings_per_block
    slot = (interior - (k - 1) * gap) / k
    if slot < 4.0:
        raise WorldGenError(f"Слишком много зданий в квартале: {k}")

    buildings = []
    for j in range(spec.blocks[1]):
        for i in range(spec.blocks[0]):
            x_block = MAP_MARGIN + i * block + setback
            y_block = MAP_MARGIN + j * block + setback
            for s in range(k):
                width = rng.uniform(0.6 * slot, slot)
                depth = rng.uniform(max(width / 1.5, 4.0), min(width * 1.5, interior))
                x0 = x_block + s * (slot + gap) + rng.uniform(0.0, slot - width)
                y0 = y_block + rng.uniform(0.0, interior - depth)
                buildings.append({"block": (i, j), "rect": (x0, y0, x0 + width, y0 + depth)})
    return buildings


def _door_on_wall(rect, rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    """Точка на случайной стене не ближе 1 м к углам, нормаль наружу"""
    x0, y0, x1, y1 = rect
    walls = [
        ((x0, y0), (x1, y0), -math.pi / 2),
        ((x1, y0), (x1, y1), 0.0),
        ((x1, y1), (x0, y1), math.pi / 2),
        ((x0, y1), (x0, y0), math.pi)
    ]
    a, b, facing = walls[int(rng.integers(0, 4))]
    a, b = np.array(a), np.array(b)
    length = float(np.linalg.norm(b - a))
    s = rng.uniform(1.0, length - 1.0)
    return a + (b - a) * s / length, facing


def _roads_connected(document: OsmDocument) -> bool:
    graph = build_road_graph(document, Profile.from_name("pedestrian"))
    adjacency = sparse.csr_matrix(
        (np.ones(graph.n_edges), (graph.src, graph.dst)), shape=(graph.n_vertices, graph.n_vertices)
    )
    count, _ = connected_components(adjacency, directed=True, connection="weak")
    return count == 1


def _generate(spec: GenWorldSpec, rng: np.random.Generator) -> GeneratedWorld:
    origin = GeoPoint(*WORLD_CONFIG["origin"])
    block = WORLD_CONFIG["block_size"]
    bx, by = spec.blocks
    width = bx * block + 2 * MAP_MARGIN
    height = by * block + 2 * MAP_MARGIN
    builder = _Builder(origin)
    vertical_names, horizontal_names = _street_names(spec)

    # улицы
    grid = {}
    for j in range(by + 1):
        for i in range(bx + 1):
            grid[(i, j)] = builder.node((MAP_MARGIN + i * block, MAP_MARGIN + j * block))
    for i in range(bx + 1):
        builder.way([grid[(i, j)] for j in range(by + 1)], {"highway": "residential", "name": vertical_names[i]})
    for j in range(by + 1):
        builder.way([grid[(i, j)] for i in range(bx + 1)], {"highway": "residential", "name": horizontal_names[j]})
    builder.node((width / 2, height / 2), {"place": "town", "name": spec.region})

    # здания и входы
    doors = []
    for number, building in enumerate(_layout(spec, rng), start=1):
        x0, y0, x1, y1 = building["rect"]
        street = horizontal_names[building["block"][1]]
        corners = [builder.node(c) for c in ((x0, y0), (x1, y0), (x1, y1), (x0, y1))]
        builder.way(corners + corners[:1], {
            "building": "yes", "addr:housenumber": str(number),
            "addr:street": street, "addr:city": spec.region
        })
        xy, facing = _door_on_wall(building["rect"], rng)
        unit = str(int(rng.integers(1, 4)))
        known = bool(rng.random() < spec.known_door_fraction)
        if known:
            builder.node(xy, {
                "entrance": "yes", "addr:housenumber": str(number), "addr:unit": unit,
                "addr:street": street, "addr:city": spec.region
            })
        position = unproject(LocalPoint(float(xy[0]), float(xy[1])), origin)
        doors.append({
            "region": spec.region, "street": street, "building": str(number), "unit": unit,
            "lat": position.lat, "lon": position.lon, "facing": facing, "known": known
        })

    corner = unproject(LocalPoint(width, height), origin)
    document = OsmDocument(builder.elements, bounds=(origin.lat, origin.lon, corner.lat, corner.lon))
    osm = serialize_osm(document)
    start = unproject(LocalPoint(MAP_MARGIN, MAP_MARGIN), origin)
    return GeneratedWorld(osm, doors, _scenario(spec, doors, start, rng), parse_osm(osm))


def _scenario(spec: GenWorldSpec, doors: List[Dict[str, Any]], start: GeoPoint,
              rng: np.random.Generator) -> Dict[str, Any]:
    """Сценарий по умолчанию: прямые и исследовательские доставки вперемешку"""
    known = [d for d in doors if d["known"]]
    unknown = [d for d in doors if not d["known"]]
    n = min(spec.deliveries, len(doors))
    n_unknown = min(len(unknown), max(n - len(known), n // 2))
    picks = [known[i] for i in sorted(rng.choice(len(known), n - n_unknown, replace=False))] if n > n_unknown else []
    picks += [unknown[i] for i in sorted(rng.choice(len(unknown), n_unknown, replace=False))] if n_unknown else []
    order = rng.permutation(len(picks))
    picks = [picks[i] for i in order]

    clauses = []
    expected = []
    for k, door in enumerate(picks, start=1):
        verb = "Deliver" if k == 1 else "then deliver"
        clauses.append(f"{verb} P{k} to Unit {door['unit']}, Building {door['building']}, {door['region']}")
        expected.append({"region": door["region"], "building": door["building"], "unit": door["unit"]})
    return {
        "name": f"gen-{spec.blocks[0]}x{spec.blocks[1]}-seed{spec.seed}",
        "start": {"lat": start.lat, "lon": start.lon, "theta": 0.0},
        "instruction": "; ".join(clauses) + ".",
        "expected": expected,
        "seed": spec.seed,
        "noise": {"sigma_v": 0.01, "sigma_w": 0.01, "sigma_s": 0.03, "outlier_rate": 0.0,
                  "outlier_sigma": 5.0, "label_flip": 0.05},
        "sensors": {"p_detect": 1.0},
        "metrics": {"decay_rate": 0.9, "success_radius": 10.0, "normalization": "normalized"},
        "map_update": True
    }


def gen_world(spec: GenWorldSpec) -> GeneratedWorld:
    """Детерминированная генерация мира по зерну"""
    rng = np.random.default_rng(spec.seed)
    for attempt in range(1, WORLD_CONFIG["max_attempts"] + 1):
        world = _generate(spec, rng)
        if _roads_connected(world.document):
            logger.info(
                f"🏗 Мир {spec.blocks[0]}x{spec.blocks[1]} (seed {spec.seed}): "
                f"{len(world.doors)} зданий, попытка {attempt}"
            )
            return world
        logger.warning(f"⚠️ Дорожная сеть несвязна, попытка {attempt}")
    raise WorldGenError(f"Не удалось сгенерировать связный мир за {WORLD_CONFIG['max_attempts']} попыток")
