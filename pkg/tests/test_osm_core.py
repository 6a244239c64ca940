import numpy as np
import pytest

from conftest import ORIGIN, local_document, square_nodes
from explore import DoorObservation
from osm_core import (
    Address, AddressNotFound, DanglingReferenceError, DuplicateElementError, GeoPoint, LocalPoint,
    NotABuildingError, OpenRingError, OutOfBoundsError, OsmParseError, apply_map_update, building_footprint,
    element_vocabulary, parse_osm, project, query_address, serialize_osm, unproject
)
from geometry import signed_area

MINIMAL = """<?xml version="1.0" encoding="UTF-8"?>
<osm version="0.6">
  <bounds minlat="47.0" minlon="8.0" maxlat="47.01" maxlon="8.01"/>
  <node id="1" lat="47.001" lon="8.001"/>
</osm>"""


class TestParse:
    def test_minimal_document(self):
        doc = parse_osm(MINIMAL)
        assert len(doc) == 1
        assert doc.revision == 0

    def test_dangling_reference_names_id(self):
        xml = MINIMAL.replace("</osm>", '<way id="5"><nd ref="1"/><nd ref="99"/></way></osm>')
        with pytest.raises(DanglingReferenceError) as info:
            parse_osm(xml)
        assert info.value.ref == 99
        assert "99" in str(info.value)

    def test_duplicate_id(self):
        xml = MINIMAL.replace("</osm>", '<node id="1" lat="47.002" lon="8.002"/></osm>')
        with pytest.raises(DuplicateElementError):
            parse_osm(xml)

    def test_malformed_xml(self):
        with pytest.raises(OsmParseError):
            parse_osm("<osm><node id='1'")

    def test_generated_world_building_count(self, small_world):
        doc = parse_osm(small_world.osm)
        expected = small_world.osm.count(b'k="building"')
        assert len(doc.find_by_tag("building", "yes")) == expected == len(small_world.doors)

    def test_serialize_roundtrip(self, town):
        again = parse_osm(serialize_osm(town))
        assert sorted(again.elements) == sorted(town.elements)
        for element_id, element in town.elements.items():
            assert dict(again.get(element_id).tags) == dict(element.tags)
            if element.kind == "node":
                assert again.get(element_id).point == element.point
        assert serialize_osm(again) == serialize_osm(town)


class TestProjection:
    def test_origin_maps_to_zero(self):
        p = project(ORIGIN, ORIGIN)
        assert (p.x, p.y) == (0.0, 0.0)

    def test_north_offset(self):
        p = project(GeoPoint(ORIGIN.lat + 0.001, ORIGIN.lon), ORIGIN)
        assert p.x == 0.0
        assert p.y == pytest.approx(111.19, abs=0.01)

    def test_roundtrip(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for dlat, dlon in rng.uniform(-0.2, 0.2, size=(1000, 2)):
            point = GeoPoint(ORIGIN.lat + dlat, ORIGIN.lon + dlon)
            back = unproject(project(point, ORIGIN), ORIGIN)
            worst = max(worst, abs(back.lat - point.lat), abs(back.lon - point.lon))
        assert worst < 1e-9

    def test_latitude_out_of_range(self):
        with pytest.raises(ValueError):
            GeoPoint(91.0, 0.0)
        with pytest.raises(ValueError):
            project(GeoPoint(0.0, 0.0), GeoPoint(90.0, 0.0))

    def test_too_far_from_origin(self):
        with pytest.raises(ValueError):
            project(GeoPoint(ORIGIN.lat + 1.0, ORIGIN.lon), ORIGIN)


class TestFootprint:
    def test_square(self, town):
        polygon = building_footprint(town, 110)
        assert len(polygon.outer) == 4
        assert signed_area(polygon.outer) > 0
        assert polygon.area == pytest.approx(100.0, abs=1e-6)

    def test_clockwise_input_normalized(self):
        nodes = square_nodes(1, 10.0, 10.0, 10.0)
        doc = local_document(nodes, {9: ([1, 4, 3, 2, 1], {"building": "yes"})})
        assert signed_area(building_footprint(doc, 9).outer) > 0

    def test_l_shape_matches_shoelace(self, town):
        xy = np.array([(120, 40), (140, 40), (140, 50), (130, 50), (130, 60), (120, 60)], dtype=float)
        shoelace = 0.5 * abs(np.dot(xy[:, 0], np.roll(xy[:, 1], -1)) - np.dot(xy[:, 1], np.roll(xy[:, 0], -1)))
        assert shoelace == pytest.approx(300.0)
        assert building_footprint(town, 130).area == pytest.approx(shoelace, abs=1e-6)

    def test_not_a_building(self, town):
        with pytest.raises(NotABuildingError):
            building_footprint(town, 100)

    def test_open_ring(self):
        nodes = square_nodes(1, 0.0, 0.0, 10.0)
        doc = local_document(nodes, {9: ([1, 2, 3, 4], {"building": "yes"})})
        with pytest.raises(OpenRingError):
            building_footprint(doc, 9)


class TestQueryAddress:
    def test_unit_level(self, town):
        resolution = query_address(town, Address("Green Town", None, "16", "2"))
        assert resolution.resolved_level == "unit"
        assert resolution.element_id == 14
        assert resolution.missing_levels == ()

    def test_building_level_missing_unit(self, town):
        resolution = query_address(town, Address("Green Town", None, "12", "2"))
        assert resolution.resolved_level == "building"
        assert resolution.element_id == 120
        assert resolution.missing_levels == ("unit",)
        xy = project(resolution.position, town.origin)
        assert (xy.x, xy.y) == pytest.approx((86.0, 46.0), abs=1e-6)

    def test_absent_address(self, town):
        with pytest.raises(AddressNotFound):
            query_address(town, Address("Nowhere", None, "404", "1"))

    def test_region_qualifier_mismatch(self, town):
        resolution = query_address(town, Address("Green Town", "Main Street", None, None))
        assert resolution.resolved_level == "street"
        with pytest.raises(AddressNotFound):
            query_address(town, Address("Blue Town", None, "16", None))

    def test_normalization(self, town):
        resolution = query_address(town, Address("  GREEN   town ", None, "16", " 2 "))
        assert resolution.resolved_level == "unit"

    def test_empty_and_gapped(self, town):
        with pytest.raises(ValueError):
            query_address(town, Address())
        with pytest.raises(ValueError):
            query_address(town, Address("Green Town", None, None, "2"))


def _door(doc, xy, number="12", unit="2"):
    return DoorObservation(number, unit, unproject(LocalPoint(*xy), doc.origin), 1.0)


class TestMapUpdate:
    def test_new_entrance_resolves_unit(self, town):
        address = Address("Green Town", None, "12", "2")
        updated = apply_map_update(town, _door(town, (92.0, 46.0)), address)
        assert updated.revision == town.revision + 1
        assert town.revision == 0
        node_id = max(updated.elements)
        assert dict(updated.get(node_id).tags)["entrance"] == "yes"
        resolution = query_address(updated, address)
        assert resolution.resolved_level == "unit"
        assert resolution.element_id == node_id

    def test_idempotent(self, town):
        address = Address("Green Town", None, "12", "2")
        once = apply_map_update(town, _door(town, (92.0, 46.0)), address)
        twice = apply_map_update(once, _door(town, (92.3, 46.2)), address)
        assert twice is once
        assert twice.revision == 1

    def test_outside_bounds(self, town):
        with pytest.raises(OutOfBoundsError):
            apply_map_update(town, _door(town, (-30.0, 46.0)), Address(None, None, "12", "2"))

    def test_roundtrip_after_update(self, town):
        updated = apply_map_update(town, _door(town, (92.0, 46.0)), Address("Green Town", None, "12", "2"))
        again = parse_osm(serialize_osm(updated))
        assert sorted(again.elements) == sorted(updated.elements)


class TestVocabulary:
    def test_buildings_only(self, town):
        assert element_vocabulary(town, (78.0, 38.0, 94.0, 54.0)) == ["building"]

    def test_buildings_and_roads(self, town):
        assert element_vocabulary(town, (70.0, 10.0, 150.0, 70.0)) == ["building", "highway"]

    def test_empty_bbox(self, town):
        assert element_vocabulary(town, (50.0, 50.0, 50.0, 50.0)) == []

    def test_address_labels(self):
        assert Address("Green Town", None, "16", "2").label() == "[unit2][building16]"
        assert not Address(None, None, None, "2").is_contiguous
