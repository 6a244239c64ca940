import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from osm_core import GeoPoint, LocalPoint, OsmDocument, OsmNode, OsmWay, unproject  # noqa: E402
from worldgen import GenWorldSpec, gen_world  # noqa: E402

ORIGIN = GeoPoint(47.0, 8.0)
TOWN = {"addr:city": "Green Town", "addr:street": "Main Street"}


def local_document(nodes, ways, size=(200.0, 200.0), origin=ORIGIN, relations=None):
    """Документ из локальных координат: nodes {id: (x, y, tags)}, ways {id: (refs, tags)}"""
    elements = {}
    for node_id, (x, y, tags) in nodes.items():
        elements[node_id] = OsmNode(node_id, dict(tags), unproject(LocalPoint(x, y), origin))
    for way_id, (refs, tags) in ways.items():
        elements[way_id] = OsmWay(way_id, dict(tags), tuple(refs))
    elements.update(relations or {})
    corner = unproject(LocalPoint(*size), origin)
    return OsmDocument(elements, bounds=(origin.lat, origin.lon, corner.lat, corner.lon))


def square_nodes(first_id, x0, y0, side, tags=None):
    corners = [(x0, y0), (x0 + side, y0), (x0 + side, y0 + side), (x0, y0 + side)]
    return {first_id + k: (x, y, tags or {}) for k, (x, y) in enumerate(corners)}


@pytest.fixture
def town():
    """
    Дорога Main Street по y = 20, здание 16 со входом unit 2,
    здание 12 без входа, Г-образное здание 7 и узел города
    """
    nodes = {
        1: (0.0, 20.0, {}), 2: (100.0, 20.0, {}), 3: (200.0, 20.0, {}),
        14: (45.0, 40.0, dict(TOWN, **{"entrance": "yes", "addr:housenumber": "16", "addr:unit": "2"})),
        30: (120.0, 40.0, {}), 31: (140.0, 40.0, {}), 32: (140.0, 50.0, {}),
        33: (130.0, 50.0, {}), 34: (130.0, 60.0, {}), 35: (120.0, 60.0, {}),
        50: (100.0, 100.0, {"place": "town", "name": "Green Town"})
    }
    nodes.update(square_nodes(10, 40.0, 40.0, 10.0))
    nodes.update(square_nodes(20, 80.0, 40.0, 12.0))
    ways = {
        100: ([1, 2, 3], {"highway": "residential", "name": "Main Street"}),
        110: ([10, 11, 12, 13, 10], dict(TOWN, **{"building": "yes", "addr:housenumber": "16"})),
        120: ([20, 21, 22, 23, 20], dict(TOWN, **{"building": "yes", "addr:housenumber": "12"})),
        130: ([30, 31, 32, 33, 34, 35, 30], dict(TOWN, **{"building": "yes", "addr:housenumber": "7"}))
    }
    return local_document(nodes, ways)


def door_row(doc, building, unit, xy, facing, street="Main Street"):
    position = unproject(LocalPoint(*xy), doc.origin)
    return {
        "region": "Green Town", "street": street, "building": building, "unit": unit,
        "lat": position.lat, "lon": position.lon, "facing": facing
    }


@pytest.fixture
def town_doors(town):
    return [
        door_row(town, "16", "2", (45.0, 40.0), -math.pi / 2),
        door_row(town, "12", "2", (92.0, 46.0), 0.0),
        door_row(town, "7", "1", (125.0, 60.0), math.pi / 2)
    ]


@pytest.fixture(scope="session")
def small_world():
    return gen_world(GenWorldSpec.preset("small", seed=1))


@pytest.fixture
def rng():
    return np.random.default_rng(7)
