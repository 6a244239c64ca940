import itertools
import json

import numpy as np
import pytest
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from osm_core import Address, GeoPoint
from taskplan import (
    AdapterError, CorpusEntry, GrammarError, JsonAdapter, ParsedTask, ReferenceParser, TaskMode, grade_corpus,
    mode_for, optimize_order, optimize_sequence, parse_instruction, plan_tasks, resolve_locations, srtp,
    tour_length, verify_tasks
)

FIRST = "Deliver package A to Unit 2, Building 16, Green Town."
TWO = "Deliver P1 to Building 7; then deliver P2 to Unit 2, Building 12."


def corpus_for(world, count=60):
    """Корпус однозадачных инструкций по дверям сгенерированного мира"""
    entries = []
    for k in range(count):
        door = world.doors[k % len(world.doors)]
        if k % 3 == 0:
            text = f"Deliver parcel {k} to Unit {door['unit']}, Building {door['building']}, {door['region']}."
            expected = Address(door["region"], None, door["building"], door["unit"])
        elif k % 3 == 1:
            text = (f"Deliver box-{k} to Unit {door['unit']}, Building {door['building']}, "
                    f"{door['street']}, {door['region']}.")
            expected = Address(door["region"], door["street"], door["building"], door["unit"])
        else:
            text = f"deliver letter {k} to Building {door['building']}, {door['region']}."
            expected = Address(door["region"], None, door["building"], None)
        entries.append(CorpusEntry(text, (expected,)))
    return entries


def brute_force_tour(points, start):
    dist = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2).tolist()
    first = np.linalg.norm(points - start, axis=1).tolist()
    return min(
        first[p[0]] + sum(dist[a][b] for a, b in zip(p, p[1:]))
        for p in itertools.permutations(range(len(points)))
    )


CORRUPTIONS = [
    lambda text: text.rstrip("."),
    lambda text: text.replace(" to ", " for "),
    lambda text: text.replace("Building", "Bldg"),
    lambda text: text.replace("Deliver", "Send", 1).replace("deliver", "Send", 1),
    lambda text: text.replace("Green Town", "Blue Town"),
    lambda text: text.replace(", ", ", , ", 1),
    lambda text: text.replace("Green Town", "Oak Street, Green Town, Extra"),
    lambda text: "",
    lambda text: text.replace("Building", "Unit"),
    lambda text: text.replace("Green Town", "Nowhere Village")
]


class TestParse:
    def test_single_task(self):
        tasks = parse_instruction(FIRST)
        assert len(tasks) == 1
        assert tasks[0].address == Address("green town", None, "16", "2")
        assert tasks[0].package == "package A"

    def test_textual_order(self):
        tasks = parse_instruction(TWO)
        assert [t.address.building for t in tasks] == ["7", "12"]
        assert [t.package for t in tasks] == ["P1", "P2"]
        assert tasks[1].address.unit == "2"

    def test_empty_text(self):
        with pytest.raises(ValueError):
            parse_instruction("")

    def test_grammar_error_position(self):
        with pytest.raises(GrammarError) as info:
            parse_instruction("Deliver A to Unit 2.")
        assert info.value.position > 0
        with pytest.raises(GrammarError) as info:
            parse_instruction("Deliver A to Building 3")
        assert info.value.position == len("Deliver A to Building 3")

    def test_deterministic(self):
        parser = ReferenceParser()
        assert parser.parse(TWO) == parser.parse(TWO)


class TestVerify:
    def test_reference_output_passes(self):
        assert verify_tasks(parse_instruction(TWO), TWO).passed

    def test_hallucinated_building(self):
        adapter = JsonAdapter(lambda prompt, timeout: json.dumps([
            {"package": "package A", "region": "Green Town", "building": "99", "unit": "2"}
        ]))
        tasks = parse_instruction(FIRST, adapter)
        report = verify_tasks(tasks, FIRST)
        assert not report.passed
        assert report.checks[0].untraced == ("99",)

    def test_contiguity(self):
        task = ParsedTask(Address(None, None, None, "2"), "A", (0, len(FIRST)))
        report = verify_tasks([task], FIRST)
        assert not report.checks[0].contiguous
        assert not report.passed

    def test_never_mutates(self):
        tasks = parse_instruction(TWO)
        before = list(tasks)
        verify_tasks(tasks, "nothing")
        assert tasks == before


class TestAdapter:
    def test_schema_retry_then_error(self):
        calls = []

        def complete(prompt, timeout):
            calls.append(prompt)
            return '[{"package": "A"}]'

        with pytest.raises(AdapterError):
            JsonAdapter(complete).parse(FIRST)
        assert len(calls) == 2
        assert FIRST in calls[0]

    def test_backend_failure(self):
        def complete(prompt, timeout):
            raise TimeoutError("slow")

        with pytest.raises(AdapterError):
            JsonAdapter(complete).parse(FIRST)

    def test_valid_response(self):
        adapter = JsonAdapter(lambda prompt, timeout: json.dumps([
            {"package": "package A", "region": "Green Town", "building": "16", "unit": "2"}
        ]))
        tasks = parse_instruction(FIRST, adapter)
        assert verify_tasks(tasks, FIRST).passed


class TestResolve:
    def test_modes(self, town):
        plan = resolve_locations(town, parse_instruction(
            "Deliver A to Unit 2, Building 16, Green Town; then deliver B to Unit 2, Building 12, Green Town."
        ))
        direct, explore = plan.tasks
        assert direct.mode == TaskMode.NAVIGATE_DIRECT
        assert explore.mode == TaskMode.NAVIGATE_THEN_EXPLORE
        assert explore.resolution.resolved_level == "building"
        assert explore.resolution.element_id == 120
        assert plan.flags == [1, 1]

    def test_unknown_region_does_not_abort(self, town):
        plan = resolve_locations(town, parse_instruction(
            "Deliver A to Building 16, Blue Town; then deliver B to Unit 2, Building 16, Green Town."
        ))
        assert plan.flags == [0, 1]
        assert plan.tasks[0].reason.startswith("address not resolved")
        assert plan.srtp == 0.5

    def test_mode_is_function_of_missing_levels(self, town):
        for text in (FIRST, "Deliver B to Unit 2, Building 12, Green Town."):
            item = resolve_locations(town, parse_instruction(text)).tasks[0]
            expected = TaskMode.NAVIGATE_THEN_EXPLORE if item.resolution.missing_levels else TaskMode.NAVIGATE_DIRECT
            assert mode_for(item.resolution) == item.mode == expected

    def test_plan_orders_from_start(self, town):
        text = ("Deliver A to Building 7, Green Town; then deliver B to Unit 2, Building 16, Green Town; "
                "then deliver C to Building 12, Green Town.")
        plan = plan_tasks(text, town, start=town.origin)
        assert [t.task.address.building for t in plan.tasks] == ["16", "12", "7"]
        assert plan.srtp == 1.0


class TestSequence:
    def test_single(self):
        assert optimize_order(np.array([[5.0, 5.0]]), np.zeros(2)) == [0]

    def test_collinear(self):
        points = np.array([[30.0, 0.0], [10.0, 0.0], [20.0, 0.0]])
        order = optimize_order(points, np.zeros(2))
        assert [points[i][0] for i in order] == [10.0, 20.0, 30.0]

    def test_never_longer_than_input(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            points = rng.uniform(0, 300, size=(int(rng.integers(2, 9)), 2))
            order = optimize_order(points, np.zeros(2))
            assert sorted(order) == list(range(len(points)))
            assert tour_length(points, np.zeros(2), order) <= tour_length(points, np.zeros(2), range(len(points))) + 1e-9

    def test_near_optimal(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            points = rng.uniform(0, 500, size=(7, 2))
            start = np.zeros(2)
            best = brute_force_tour(points, start)
            found = tour_length(points, start, optimize_order(points, start, group_radius=0.0))
            assert found <= best * 1.2 + 1e-9

    def test_proximate_tasks_contiguous(self):
        points = np.array([[0.0, 100.0], [100.0, 0.0], [10.0, 100.0], [110.0, 0.0]])
        order = optimize_order(points, np.zeros(2), group_radius=30.0)
        pos = {i: k for k, i in enumerate(order)}
        assert abs(pos[0] - pos[2]) == 1
        assert abs(pos[1] - pos[3]) == 1

    def test_grouping_survives_any_order(self):
        rng = np.random.default_rng(21)
        for _ in range(60):
            n = int(rng.integers(3, 9))
            points = rng.uniform(0.0, 120.0, size=(n, 2))
            order = optimize_order(points, np.zeros(2), group_radius=30.0)
            assert sorted(order) == list(range(n))
            close = np.linalg.norm(points[:, None] - points[None, :], axis=2) <= 30.0
            _, labels = connected_components(csr_matrix(close), directed=False)
            pos = {i: k for k, i in enumerate(order)}
            for label in set(labels):
                ks = sorted(pos[i] for i in np.flatnonzero(labels == label))
                assert ks[-1] - ks[0] + 1 == len(ks)

    def test_geo_sequence(self):
        start = GeoPoint(47.0, 8.0)
        positions = [GeoPoint(47.0003, 8.0), GeoPoint(47.0001, 8.0)]
        assert optimize_sequence(["far", "near"], positions, start) == ["near", "far"]
        with pytest.raises(ValueError):
            optimize_sequence(["a"], [], start)


class TestSrtp:
    def test_values(self):
        assert srtp([1] * 60) == 1.0
        assert srtp([1] * 54 + [0] * 6) == 0.9
        assert srtp([0] * 5) == 0.0

    def test_empty(self):
        with pytest.raises(ValueError):
            srtp([])

    def test_reference_corpus(self, small_world):
        grade = grade_corpus(corpus_for(small_world), small_world.document)
        assert len(grade.grades) == 60
        assert grade.srtp == 1.0

    def test_corrupted_corpus(self, small_world):
        corpus = corpus_for(small_world)
        for k, corrupt in enumerate(CORRUPTIONS):
            entry = corpus[k * 6]
            corpus[k * 6] = CorpusEntry(corrupt(entry.instruction), entry.expected)
        grade = grade_corpus(corpus, small_world.document)
        assert sum(grade.flags) == 50
        assert len(grade.failures) == 10
        assert {f.index for f in grade.failures} == {k * 6 for k in range(10)}
        assert all(f.reason for f in grade.failures)
