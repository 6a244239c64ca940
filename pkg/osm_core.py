"""
Модуль работы с картой OpenStreetMap
Разбор и запись XML, индексы, адресные запросы, обновления карты
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import TYPE_CHECKING, Dict, Iterator, List, Mapping, Optional, Tuple, Union

import numpy as np
import shapely
from lxml import etree

from geometry import Polygon, ensure_ccw, ensure_cw, open_ring, ring_centroid, ring_is_simple
from globals import (
    ADDRESS_LEVELS, EARTH_RADIUS, MAP_UPDATE_CONFIG, PROJECTION_CONFIG,
    SEMANTIC_KEYS, SPATIAL_INDEX_CONFIG
)

if TYPE_CHECKING:
    from explore import DoorObservation

logger = logging.getLogger(__name__)

BBox = Tuple[float, float, float, float]


class OsmError(Exception):
    """Базовая ошибка работы с картой"""


class OsmParseError(OsmError):
    pass


class DanglingReferenceError(OsmError):
    def __init__(self, element_id: int, ref: int):
        self.element_id = element_id
        self.ref = ref
        super().__init__(f"Элемент {element_id} ссылается на отсутствующий id {ref}")


class DuplicateElementError(OsmError):
    def __init__(self, element_id: int):
        self.element_id = element_id
        super().__init__(f"Повторяющийся id {element_id}")


class NotABuildingError(OsmError):
    pass


class OpenRingError(OsmError):
    pass


class InvalidGeometryError(OsmError):
    pass


class OutOfBoundsError(OsmError):
    pass


class AddressNotFound(OsmError):
    pass


# --- координаты ---

@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError(f"Некорректные координаты: {self.lat}, {self.lon}")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"Широта вне диапазона: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"Долгота вне диапазона: {self.lon}")


@dataclass(frozen=True)
class LocalPoint:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"Некорректная локальная точка: {self.x}, {self.y}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


def _origin_scale(origin: GeoPoint) -> float:
    if abs(origin.lat) >= 90.0:
        raise ValueError(f"Широта начала координат вне диапазона: {origin.lat}")
    return math.cos(math.radians(origin.lat))


def project(point: GeoPoint, origin: GeoPoint) -> LocalPoint:
    """Равнопромежуточная проекция в локальную касательную плоскость"""
    scale = _origin_scale(origin)
    x = EARTH_RADIUS * math.radians(point.lon - origin.lon) * scale
    y = EARTH_RADIUS * math.radians(point.lat - origin.lat)
    if math.hypot(x, y) > PROJECTION_CONFIG["max_distance"]:
        raise ValueError(f"Точка дальше {PROJECTION_CONFIG['max_distance']} м от начала координат")
    return LocalPoint(x, y)


def unproject(point: LocalPoint, origin: GeoPoint) -> GeoPoint:
    scale = _origin_scale(origin)
    lat = origin.lat + math.degrees(point.y / EARTH_RADIUS)
    lon = origin.lon + math.degrees(point.x / (EARTH_RADIUS * scale))
    return GeoPoint(lat, lon)


def project_array(lats: np.ndarray, lons: np.ndarray, origin: GeoPoint) -> np.ndarray:
    scale = _origin_scale(origin)
    x = EARTH_RADIUS * np.radians(np.asarray(lons, dtype=float) - origin.lon) * scale
    y = EARTH_RADIUS * np.radians(np.asarray(lats, dtype=float) - origin.lat)
    return np.column_stack([x, y])


def to_geo(xy, origin: GeoPoint) -> GeoPoint:
    return unproject(LocalPoint(float(xy[0]), float(xy[1])), origin)


# --- элементы ---

@dataclass(frozen=True, eq=True)
class OsmNode:
    id: int
    tags: Mapping[str, str]
    point: GeoPoint
    kind = "node"


@dataclass(frozen=True, eq=True)
class OsmWay:
    id: int
    tags: Mapping[str, str]
    refs: Tuple[int, ...]
    kind = "way"

    @property
    def is_closed(self) -> bool:
        return len(self.refs) >= 4 and self.refs[0] == self.refs[-1]


@dataclass(frozen=True)
class RelationMember:
    type: str
    ref: int
    role: str = ""


@dataclass(frozen=True, eq=True)
class OsmRelation:
    id: int
    tags: Mapping[str, str]
    members: Tuple[RelationMember, ...]
    kind = "relation"


OsmElement = Union[OsmNode, OsmWay, OsmRelation]
_KIND_ORDER = {"node": 0, "way": 1, "relation": 2}


# --- адреса ---

def normalize_token(value: Optional[str]) -> Optional[str]:
    """Нижний регистр, схлопнутые пробелы"""
    if value is None:
        return None
    text = " ".join(str(value).lower().split())
    return text or None


@dataclass(frozen=True)
class Address:
    region: Optional[str] = None
    street: Optional[str] = None
    building: Optional[str] = None
    unit: Optional[str] = None

    def __post_init__(self):
        for level in ADDRESS_LEVELS:
            object.__setattr__(self, level, normalize_token(getattr(self, level)))

    def get(self, level: str) -> Optional[str]:
        return getattr(self, level)

    @property
    def present_levels(self) -> List[str]:
        """Уровни от высшего к низшему"""
        return [level for level in ADDRESS_LEVELS if getattr(self, level) is not None]

    @property
    def is_empty(self) -> bool:
        return not self.present_levels

    @property
    def is_contiguous(self) -> bool:
        # квартира без здания недопустима, регион и улица - уточнения
        return not (self.unit is not None and self.building is None)

    def tokens(self) -> Dict[str, str]:
        return {level: getattr(self, level) for level in self.present_levels}

    def to_dict(self) -> Dict[str, Optional[str]]:
        return {level: getattr(self, level) for level in ADDRESS_LEVELS}

    @classmethod
    def from_dict(cls, data: Mapping[str, Optional[str]]) -> "Address":
        return cls(**{level: data.get(level) for level in ADDRESS_LEVELS})

    def label(self) -> str:
        parts = []
        if self.unit:
            parts.append(f"[unit{self.unit}]")
        if self.building:
            parts.append(f"[building{self.building}]")
        return "".join(parts) or f"[{self.region or self.street}]"


@dataclass(frozen=True)
class AddressResolution:
    resolved_level: str
    element_id: int
    position: GeoPoint
    missing_levels: Tuple[str, ...]


# --- индексы ---

class SpatialGrid:
    """Статическая сетка ограничивающих прямоугольников"""

    def __init__(self, bboxes: Mapping[int, BBox], cell_size: float):
        self.cell_size = cell_size
        self.bboxes = bboxes
        self.cells: Dict[Tuple[int, int], List[int]] = defaultdict(list)
        for element_id in sorted(bboxes):
            for key in self._cover(bboxes[element_id]):
                self.cells[key].append(element_id)

    def _cover(self, bbox: BBox) -> Iterator[Tuple[int, int]]:
        c = self.cell_size
        for i in range(math.floor(bbox[0] / c), math.floor(bbox[2] / c) + 1):
            for j in range(math.floor(bbox[1] / c), math.floor(bbox[3] / c) + 1):
                yield i, j

    def query(self, bbox: BBox) -> List[int]:
        found = set()
        for key in self._cover(bbox):
            for element_id in self.cells.get(key, ()):
                b = self.bboxes[element_id]
                if b[0] <= bbox[2] and b[2] >= bbox[0] and b[1] <= bbox[3] and b[3] >= bbox[1]:
                    found.add(element_id)
        return sorted(found)


class AddressIndex:
    """Индекс адресных тегов по уровням"""

    def __init__(self, elements: Mapping[int, OsmElement]):
        self.by_level: Dict[str, Dict[Tuple[str, ...], List[int]]] = {
            level: defaultdict(list) for level in ADDRESS_LEVELS
        }
        for element_id in sorted(elements):
            tags = elements[element_id].tags
            number = normalize_token(tags.get("addr:housenumber"))
            unit = normalize_token(tags.get("addr:unit"))
            name = normalize_token(tags.get("name"))
            if number and unit:
                self.by_level["unit"][(number, unit)].append(element_id)
            elif number and "building" in tags:
                self.by_level["building"][(number,)].append(element_id)
            if name and "highway" in tags:
                self.by_level["street"][(name,)].append(element_id)
            if name and ("place" in tags or "boundary" in tags):
                self.by_level["region"][(name,)].append(element_id)

    def candidates(self, level: str, address: Address) -> List[int]:
        if level == "unit":
            key = (address.building, address.unit)
        else:
            key = (address.get(level),)
        return list(self.by_level[level].get(key, ()))


# --- документ ---

class OsmDocument:
    """Неизменяемая ревизия карты с пространственным и адресным индексами"""

    def __init__(self, elements: Mapping[int, OsmElement], bounds: Optional[BBox] = None, revision: int = 0):
        self._elements = dict(sorted(elements.items()))
        self.revision = revision
        self._check_integrity()

        node_ids = [i for i, e in self._elements.items() if e.kind == "node"]
        lats = np.array([self._elements[i].point.lat for i in node_ids])
        lons = np.array([self._elements[i].point.lon for i in node_ids])
        if bounds is None and node_ids:
            bounds = (float(lats.min()), float(lons.min()), float(lats.max()), float(lons.max()))
        self.bounds = bounds
        self.origin = GeoPoint(bounds[0], bounds[1]) if bounds else GeoPoint(0.0, 0.0)

        xy = project_array(lats, lons, self.origin) if node_ids else np.zeros((0, 2))
        self._local = {node_id: xy[k] for k, node_id in enumerate(node_ids)}
        self._bboxes = self._compute_bboxes()
        self.spatial_index = SpatialGrid(self._bboxes, SPATIAL_INDEX_CONFIG["cell_size"])
        self.address_index = AddressIndex(self._elements)

    def _check_integrity(self):
        for element in self._elements.values():
            if element.kind == "way":
                for ref in element.refs:
                    target = self._elements.get(ref)
                    if target is None or target.kind != "node":
                        raise DanglingReferenceError(element.id, ref)
            elif element.kind == "relation":
                for member in element.members:
                    target = self._elements.get(member.ref)
                    if target is None or target.kind != member.type:
                        raise DanglingReferenceError(element.id, member.ref)

    def _compute_bboxes(self) -> Dict[int, BBox]:
        bboxes: Dict[int, BBox] = {}
        for element_id, element in self._elements.items():
            if element.kind == "node":
                x, y = self._local[element_id]
                bboxes[element_id] = (x, y, x, y)
            elif element.kind == "way":
                xy = self.way_coords(element_id)
                bboxes[element_id] = (*xy.min(axis=0), *xy.max(axis=0))
        for element_id, element in self._elements.items():
            if element.kind != "relation":
                continue
            boxes = [bboxes[m.ref] for m in element.members if m.ref in bboxes]
            if boxes:
                arr = np.array(boxes)
                bboxes[element_id] = (arr[:, 0].min(), arr[:, 1].min(), arr[:, 2].max(), arr[:, 3].max())
        return {k: tuple(float(v) for v in b) for k, b in bboxes.items()}

    # доступ к элементам
    @property
    def elements(self) -> Mapping[int, OsmElement]:
        return MappingProxyType(self._elements)

    def __len__(self) -> int:
        return len(self._elements)

    def __contains__(self, element_id: int) -> bool:
        return element_id in self._elements

    def get(self, element_id: int) -> OsmElement:
        try:
            return self._elements[element_id]
        except KeyError:
            raise OsmError(f"Элемент {element_id} не найден") from None

    def iter_kind(self, kind: str) -> Iterator[OsmElement]:
        return (e for e in self._elements.values() if e.kind == kind)

    def find_by_tag(self, key: str, value: Optional[str] = None) -> List[int]:
        return [
            i for i, e in self._elements.items()
            if key in e.tags and (value is None or e.tags[key] == value)
        ]

    def local_xy(self, node_id: int) -> np.ndarray:
        return self._local[node_id]

    def way_coords(self, way_id: int) -> np.ndarray:
        way = self._elements[way_id]
        return np.array([self._local[ref] for ref in way.refs])

    def bbox_of(self, element_id: int) -> Optional[BBox]:
        return self._bboxes.get(element_id)

    def query_bbox(self, bbox: BBox) -> List[int]:
        return self.spatial_index.query(bbox)

    @property
    def local_bounds(self) -> BBox:
        if not self.bounds:
            return (0.0, 0.0, 0.0, 0.0)
        corner = project(GeoPoint(self.bounds[2], self.bounds[3]), self.origin)
        return (0.0, 0.0, corner.x, corner.y)

    def contains_local(self, xy, tolerance: float = 1e-6) -> bool:
        x0, y0, x1, y1 = self.local_bounds
        return (x0 - tolerance <= xy[0] <= x1 + tolerance) and (y0 - tolerance <= xy[1] <= y1 + tolerance)

    def next_id(self) -> int:
        return max(self._elements, default=0) + 1

    def summary(self) -> Dict[str, int]:
        counts = {"nodes": 0, "ways": 0, "relations": 0}
        for element in self._elements.values():
            counts[element.kind + "s"] += 1
        counts["buildings"] = len(self.find_by_tag("building"))
        counts["revision"] = self.revision
        return counts


# --- чтение и запись XML ---

def _read_tags(xml_element) -> Dict[str, str]:
    return {t.get("k"): t.get("v") for t in xml_element.findall("tag")}


def _read_id(xml_element, attribute: str = "id") -> int:
    try:
        return int(xml_element.get(attribute))
    except (TypeError, ValueError):
        raise OsmParseError(f"Некорректный атрибут {attribute} в <{xml_element.tag}>") from None


def parse_osm(xml_bytes: Union[bytes, str]) -> OsmDocument:
    """Разбор подмножества OSM XML v0.6"""
    if isinstance(xml_bytes, str):
        xml_bytes = xml_bytes.encode("utf-8")
    try:
        parser = etree.XMLParser(resolve_entities=False, no_network=True)
        root = etree.fromstring(xml_bytes, parser=parser)
    except etree.XMLSyntaxError as e:
        raise OsmParseError(f"Некорректный XML: {e}") from e
    if root.tag != "osm":
        raise OsmParseError(f"Ожидался корневой элемент <osm>, получен <{root.tag}>")

    elements: Dict[int, OsmElement] = {}
    bounds = None
    for child in root:
        if child.tag == "bounds":
            try:
                bounds = tuple(float(child.get(k)) for k in ("minlat", "minlon", "maxlat", "maxlon"))
            except (TypeError, ValueError):
                raise OsmParseError("Некорректный элемент <bounds>") from None
            continue
        if child.tag not in _KIND_ORDER:
            continue
        element_id = _read_id(child)
        if element_id in elements:
            raise DuplicateElementError(element_id)
        tags = _read_tags(child)
        if child.tag == "node":
            try:
                point = GeoPoint(float(child.get("lat")), float(child.get("lon")))
            except (TypeError, ValueError) as e:
                raise OsmParseError(f"Узел {element_id}: {e}") from None
            elements[element_id] = OsmNode(element_id, tags, point)
        elif child.tag == "way":
            refs = tuple(_read_id(nd, "ref") for nd in child.findall("nd"))
            elements[element_id] = OsmWay(element_id, tags, refs)
        else:
            members = tuple(
                RelationMember(m.get("type", "node"), _read_id(m, "ref"), m.get("role", ""))
                for m in child.findall("member")
            )
            elements[element_id] = OsmRelation(element_id, tags, members)

    document = OsmDocument(elements, bounds=bounds, revision=0)
    logger.debug(f"Карта разобрана: {document.summary()}")
    return document


def serialize_osm(document: OsmDocument) -> bytes:
    """Детерминированная запись: элементы по (тип, id), теги по ключу"""
    root = etree.Element("osm", version="0.6", generator="open-bench")
    if document.bounds:
        etree.SubElement(root, "bounds", **{
            k: repr(v) for k, v in zip(("minlat", "minlon", "maxlat", "maxlon"), document.bounds)
        })
    ordered = sorted(document.elements.values(), key=lambda e: (_KIND_ORDER[e.kind], e.id))
    for element in ordered:
        if element.kind == "node":
            xml_element = etree.SubElement(
                root, "node", id=str(element.id), lat=repr(element.point.lat), lon=repr(element.point.lon)
            )
        elif element.kind == "way":
            xml_element = etree.SubElement(root, "way", id=str(element.id))
            for ref in element.refs:
                etree.SubElement(xml_element, "nd", ref=str(ref))
        else:
            xml_element = etree.SubElement(root, "relation", id=str(element.id))
            for member in element.members:
                etree.SubElement(xml_element, "member", type=member.type, ref=str(member.ref), role=member.role)
        for key in sorted(element.tags):
            etree.SubElement(xml_element, "tag", k=key, v=element.tags[key])
    return etree.tostring(root, pretty_print=True, xml_declaration=True, encoding="UTF-8")


# --- геометрия зданий ---

def _closed_ring(document: OsmDocument, way_id: int) -> np.ndarray:
    way = document.get(way_id)
    if way.kind != "way" or not way.is_closed:
        raise OpenRingError(f"Линия {way_id} не замкнута")
    ring = open_ring(document.way_coords(way_id))
    if not ring_is_simple(ring):
        raise InvalidGeometryError(f"Кольцо {way_id} самопересекается или вырождено")
    return ring


def find_buildings(document: OsmDocument) -> List[int]:
    return sorted(document.find_by_tag("building"))


def building_parts(document: OsmDocument, element_id: int) -> List[Polygon]:
    """Части здания: по одному полигону на внешнее кольцо"""
    element = document.get(element_id)
    if "building" not in element.tags:
        raise NotABuildingError(f"Элемент {element_id} не является зданием")

    if element.kind == "way":
        return [Polygon(ensure_ccw(_closed_ring(document, element_id)), [])]

    if element.kind != "relation" or element.tags.get("type") != "multipolygon":
        raise NotABuildingError(f"Элемент {element_id}: ожидалась замкнутая линия или мультиполигон")

    outers = [ensure_ccw(_closed_ring(document, m.ref)) for m in element.members
              if m.type == "way" and m.role in ("outer", "")]
    inners = [ensure_cw(_closed_ring(document, m.ref)) for m in element.members
              if m.type == "way" and m.role == "inner"]
    if not outers:
        raise InvalidGeometryError(f"Мультиполигон {element_id} без внешнего кольца")

    parts = [Polygon(outer, []) for outer in outers]
    for hole in inners:
        for part in parts:
            if shapely.contains_xy(part.to_shapely(), hole[0, 0], hole[0, 1]):
                part.holes.append(hole)
                break
    return parts


def building_footprint(document: OsmDocument, element_id: int) -> Polygon:
    parts = building_parts(document, element_id)
    return max(parts, key=lambda p: p.area)


def element_position(document: OsmDocument, element_id: int) -> GeoPoint:
    """Положение элемента: узел, центроид здания или среднее по узлам"""
    element = document.get(element_id)
    if element.kind == "node":
        return element.point
    if "building" in element.tags:
        try:
            return to_geo(building_footprint(document, element_id).centroid, document.origin)
        except OsmError:
            pass
    if element.kind == "way":
        coords = document.way_coords(element_id)
        if element.is_closed:
            return to_geo(ring_centroid(open_ring(coords)), document.origin)
        return to_geo(coords.mean(axis=0), document.origin)
    coords = []
    for member in element.members:
        if member.type == "node":
            coords.append(document.local_xy(member.ref)[None, :])
        elif member.type == "way":
            coords.append(document.way_coords(member.ref))
    if not coords:
        raise InvalidGeometryError(f"Отношение {element_id} не имеет геометрии")
    return to_geo(np.concatenate(coords).mean(axis=0), document.origin)


# --- адресные запросы ---

def _qualifiers_match(tags: Mapping[str, str], address: Address) -> bool:
    street = normalize_token(tags.get("addr:street"))
    city = normalize_token(tags.get("addr:city"))
    if address.street and street and street != address.street:
        return False
    if address.region and city and city != address.region:
        return False
    return True


def query_address(document: OsmDocument, address: Address) -> AddressResolution:
    """Поиск от низшего уровня адреса к высшему"""
    if address.is_empty:
        raise ValueError("Пустой адрес")
    if not address.is_contiguous:
        raise ValueError(f"Адрес с пропуском уровня: {address}")

    present = address.present_levels
    for depth in range(len(present) - 1, -1, -1):
        level = present[depth]
        candidates = [
            i for i in document.address_index.candidates(level, address)
            if level == "region" or _qualifiers_match(document.get(i).tags, address)
        ]
        if candidates:
            element_id = min(candidates)
            return AddressResolution(
                resolved_level=level,
                element_id=element_id,
                position=element_position(document, element_id),
                missing_levels=tuple(present[depth + 1:])
            )
    raise AddressNotFound(f"Адрес не найден в карте: {address.to_dict()}")


# --- обновления и словарь ---

def apply_map_update(document: OsmDocument, observation: "DoorObservation", address: Address) -> OsmDocument:
    """Новая ревизия с узлом входа; повтор того же наблюдения ничего не меняет"""
    xy = project(observation.position, document.origin).as_array()
    if not document.contains_local(xy):
        raise OutOfBoundsError(f"Наблюдение вне границ карты: {observation.position}")

    tags = {
        "entrance": "yes",
        "addr:housenumber": normalize_token(observation.house_number),
        "addr:unit": normalize_token(observation.unit)
    }
    if address.street:
        tags["addr:street"] = address.street
    if address.region:
        tags["addr:city"] = address.region

    radius = MAP_UPDATE_CONFIG["duplicate_radius"]
    nearby = document.query_bbox((xy[0] - radius, xy[1] - radius, xy[0] + radius, xy[1] + radius))
    for element_id in nearby:
        element = document.get(element_id)
        if element.kind != "node" or dict(element.tags) != tags:
            continue
        if np.linalg.norm(document.local_xy(element_id) - xy) <= radius:
            logger.info(f"🔁 Вход уже есть в карте (id {element_id}), ревизия {document.revision} без изменений")
            return document

    new_id = document.next_id()
    elements = dict(document.elements)
    elements[new_id] = OsmNode(new_id, tags, observation.position)
    updated = OsmDocument(elements, bounds=document.bounds, revision=document.revision + 1)
    logger.info(f"🗺 Карта обновлена: вход {address.label()} (id {new_id}), ревизия {updated.revision}")
    return updated


def element_vocabulary(document: OsmDocument, region_bbox: BBox) -> List[str]:
    """Семантические метки элементов в области"""
    x0, y0, x1, y1 = region_bbox
    if x1 <= x0 or y1 <= y0:
        return []
    labels = set()
    for element_id in document.query_bbox(region_bbox):
        labels.update(k for k in document.get(element_id).tags if k in SEMANTIC_KEYS)
    return sorted(labels)
