"""
Экспорт маршрутов, траекторий и карты в GeoJSON (координаты [lon, lat])
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence

from osm_core import GeoPoint, OsmDocument, OsmError, building_parts, find_buildings, to_geo
from routing import Route

logger = logging.getLogger(__name__)


class FeatureCollection:
    def __init__(self):
        self.data = {"type": "FeatureCollection", "features": []}

    def _add(self, geometry_type: str, coordinates, properties: Optional[Dict[str, Any]]) -> Dict[str, Any]:
        feature = {
            "type": "Feature",
            "geometry": {"type": geometry_type, "coordinates": coordinates},
            "properties": dict(properties or {})
        }
        self.data["features"].append(feature)
        return feature

    def add_point(self, point: GeoPoint, properties=None):
        return self._add("Point", [point.lon, point.lat], properties)

    def add_line(self, points: Iterable[GeoPoint], properties=None):
        return self._add("LineString", [[p.lon, p.lat] for p in points], properties)

    def add_polygon(self, rings: Sequence[Sequence[GeoPoint]], properties=None):
        coordinates = []
        for ring in rings:
            coords = [[p.lon, p.lat] for p in ring]
            if coords and coords[0] != coords[-1]:
                coords.append(coords[0])
            coordinates.append(coords)
        return self._add("Polygon", coordinates, properties)

    def __len__(self) -> int:
        return len(self.data["features"])


def _local_line(xy, origin: GeoPoint):
    return [to_geo(p, origin) for p in xy]


def route_collection(route: Route, profile: Optional[str] = None) -> Dict[str, Any]:
    collection = FeatureCollection()
    collection.add_line(route.polyline, {
        "type": "route", "length": round(route.length, 3), "cost": round(route.cost, 3),
        "vertices": len(route.vertices), "profile": profile
    })
    return collection.data


def trajectories_collection(episodes: Sequence) -> Dict[str, Any]:
    """Траектория каждой задачи каждого эпизода отдельной линией"""
    collection = FeatureCollection()
    for episode in episodes:
        if episode.document is None:
            continue
        origin = episode.document.origin
        for task in episode.tasks:
            if len(task.trajectory) < 2:
                continue
            collection.add_line(_local_line(task.trajectory, origin), {
                "type": "trajectory", "scenario": episode.scenario, "task": task.task,
                "label": task.label, "mode": task.mode, "success": task.S
            })
    return collection.data


def map_collection(document: OsmDocument) -> Dict[str, Any]:
    """Дороги, здания и входы карты"""
    collection = FeatureCollection()
    origin = document.origin
    for way in document.iter_kind("way"):
        if "highway" in way.tags:
            collection.add_line(_local_line(document.way_coords(way.id), origin), {
                "type": "highway", "id": way.id, "highway": way.tags["highway"], "name": way.tags.get("name")
            })
    for element_id in find_buildings(document):
        try:
            parts = building_parts(document, element_id)
        except OsmError as e:
            logger.warning(f"⚠️ Здание {element_id} не экспортировано: {e}")
            continue
        for part in parts:
            rings = [_local_line(part.outer, origin)] + [_local_line(h, origin) for h in part.holes]
            collection.add_polygon(rings, {
                "type": "building", "id": element_id,
                "housenumber": document.get(element_id).tags.get("addr:housenumber")
            })
    for node in document.iter_kind("node"):
        if "entrance" in node.tags:
            collection.add_point(node.point, {
                "type": "entrance", "id": node.id,
                "housenumber": node.tags.get("addr:housenumber"), "unit": node.tags.get("addr:unit")
            })
    return collection.data


def write_geojson(data: Dict[str, Any], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True), encoding="utf-8")
    logger.info(f"💾 GeoJSON: {len(data['features'])} объектов -> {path}")
    return path
