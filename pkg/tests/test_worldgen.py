import json

import pytest

from osm_core import Address, find_buildings, parse_osm, query_address
from routing import Profile, build_road_graph
from simworld import build_world
from worldgen import GenWorldSpec, WorldGenError, _roads_connected, gen_world


def test_same_seed_same_bytes():
    a = gen_world(GenWorldSpec(blocks=(2, 2), seed=1))
    b = gen_world(GenWorldSpec(blocks=(2, 2), seed=1))
    assert a.osm == b.osm
    assert a.doors == b.doors
    assert a.scenario == b.scenario


def test_different_seed_differs():
    assert gen_world(GenWorldSpec(seed=1)).osm != gen_world(GenWorldSpec(seed=2)).osm


@pytest.mark.parametrize("preset, buildings", [("small", 8), ("medium", 32), ("large", 128)])
def test_preset_sizes(preset, buildings):
    world = gen_world(GenWorldSpec.preset(preset))
    assert len(find_buildings(world.document)) == buildings
    assert len(world.doors) == buildings


def test_unknown_preset():
    with pytest.raises(ValueError):
        GenWorldSpec.preset("huge")


def test_invalid_spec():
    with pytest.raises(ValueError):
        GenWorldSpec(blocks=(0, 2))
    with pytest.raises(ValueError):
        GenWorldSpec(known_door_fraction=1.5)


def test_too_many_buildings():
    with pytest.raises(WorldGenError):
        gen_world(GenWorldSpec(buildings_per_block=10))


def test_road_grid(small_world):
    graph = build_road_graph(small_world.document, Profile.from_name("pedestrian"))
    assert graph.n_vertices == 9
    assert graph.n_edges == 24
    assert _roads_connected(small_world.document)


def test_doors_on_walls(small_world):
    world = build_world(small_world.document, small_world.doors)
    assert len(world.doors) == world.building_count


def test_known_doors_are_entrances(small_world):
    known = [d for d in small_world.doors if d["known"]]
    entrances = [n for n in small_world.document.iter_kind("node") if "entrance" in n.tags]
    assert len(entrances) == len(known)
    for door in known:
        address = Address(door["region"], door["street"], door["building"], door["unit"])
        result = query_address(small_world.document, address)
        assert result.missing_levels == ()


def test_scenario(small_world):
    scenario = small_world.scenario
    assert scenario["name"] == "gen-2x2-seed1"
    assert scenario["instruction"].startswith("Deliver P1 to Unit ")
    assert scenario["instruction"].endswith(".")
    assert len(scenario["expected"]) == 5
    buildings = {d["building"] for d in small_world.doors}
    assert {e["building"] for e in scenario["expected"]} <= buildings


def test_write(small_world, tmp_path):
    paths = small_world.write(tmp_path, stem="town")
    assert paths["osm"].name == "town.osm"
    assert parse_osm(paths["osm"].read_bytes()).summary() == small_world.document.summary()
    assert json.loads(paths["doors"].read_text(encoding="utf-8")) == small_world.doors
    scenario = json.loads(paths["scenario"].read_text(encoding="utf-8"))
    assert scenario["osm"] == "town.osm"
    assert scenario["doors"] == "doors.json"
