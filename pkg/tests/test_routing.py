import networkx as nx
import numpy as np
import pytest

from conftest import ORIGIN, local_document
from osm_core import LocalPoint, unproject
from routing import (
    EmptyGraph, NoRoute, Profile, RoadGraph, RoutingEngine, SnapFailed, build_overlay, build_partition,
    build_road_graph, flat_dijkstra, route, route_indices, snap, snap_local
)

PEDESTRIAN = Profile.from_name("pedestrian")


def random_graph(rng, n):
    """Граф ближайших соседей со случайными скоростями, возможно несвязный"""
    xy = rng.uniform(0.0, 500.0, size=(n, 2))
    edges = set()
    for u in range(n):
        distances = np.linalg.norm(xy - xy[u], axis=1)
        for v in np.argsort(distances)[1:1 + int(rng.integers(1, 4))]:
            edges.add((u, int(v)))
            if rng.random() < 0.8:
                edges.add((int(v), u))
    speeds = {e: float(rng.choice([0.8, 1.0, 1.2])) for e in sorted(edges)}
    node_ids = [int(i) for i in rng.permutation(n) + 1000]
    graph = RoadGraph(node_ids, xy, [(u, v, speeds[(u, v)]) for u, v in sorted(edges)], origin=ORIGIN)
    return graph


def oracle(graph):
    g = nx.DiGraph()
    g.add_nodes_from(range(graph.n_vertices))
    for e in range(graph.n_edges):
        u, v, w = int(graph.src[e]), int(graph.dst[e]), float(graph.cost[e])
        if not g.has_edge(u, v) or g[u][v]["weight"] > w:
            g.add_edge(u, v, weight=w)
    return g


def check_exact(graph, rng, queries):
    g = oracle(graph)
    partition = build_partition(graph, int(rng.integers(2, 10)))
    overlay = build_overlay(graph, partition)
    for _ in range(queries):
        s, t = (int(v) for v in rng.integers(0, graph.n_vertices, size=2))
        try:
            expected = nx.dijkstra_path_length(g, s, t)
        except nx.NetworkXNoPath:
            with pytest.raises(NoRoute):
                route_indices(graph, overlay, s, t)
            continue
        found = route_indices(graph, overlay, s, t)
        assert found.cost == pytest.approx(expected, abs=1e-9)
        assert found.vertices[0] == graph.node_ids[s] and found.vertices[-1] == graph.node_ids[t]


def line_document(oneway=None):
    nodes = {1: (0.0, 0.0, {}), 2: (10.0, 0.0, {}), 3: (20.0, 0.0, {})}
    tags = {"highway": "residential"}
    if oneway:
        tags["oneway"] = oneway
    return local_document(nodes, {10: ([1, 2, 3], tags)})


class TestBuildGraph:
    def test_bidirectional(self):
        graph = build_road_graph(line_document(), PEDESTRIAN)
        assert graph.n_vertices == 3
        assert graph.n_edges == 4

    def test_oneway(self):
        graph = build_road_graph(line_document("yes"), PEDESTRIAN)
        assert graph.n_edges == 2
        assert all(graph.node_ids[graph.src[e]] < graph.node_ids[graph.dst[e]] for e in range(2))

    def test_profile_filter(self):
        nodes = {1: (0.0, 0.0, {}), 2: (10.0, 0.0, {})}
        doc = local_document(nodes, {10: ([1, 2], {"highway": "footway"})})
        assert build_road_graph(doc, PEDESTRIAN).n_edges == 2
        with pytest.raises(EmptyGraph):
            build_road_graph(doc, Profile.from_name("vehicle"))

    def test_generated_grid_counts(self, small_world):
        doc = small_world.document
        roads = [w for w in doc.iter_kind("way") if "highway" in w.tags]
        vertices = {r for w in roads for r in w.refs}
        segments = sum(len(w.refs) - 1 for w in roads)
        graph = build_road_graph(doc, PEDESTRIAN)
        assert graph.n_vertices == len(vertices) == 9
        assert graph.n_edges == 2 * segments == 24

    def test_unknown_profile(self):
        with pytest.raises(ValueError):
            Profile.from_name("hovercraft")


class TestPartition:
    def test_single_cell(self, small_world):
        graph = build_road_graph(small_world.document, PEDESTRIAN)
        partition = build_partition(graph, 1)
        assert partition.cell_count == 1
        assert set(partition.cell_of) == {0}
        assert build_overlay(graph, partition).shortcut_count == 0

    def test_quadrants(self):
        centers = [(25.0, 25.0), (75.0, 25.0), (25.0, 75.0), (75.0, 75.0)]
        offsets = [(-10.0, -10.0), (10.0, -5.0), (0.0, 10.0)]
        xy = np.array([(cx + dx, cy + dy) for cx, cy in centers for dx, dy in offsets] + [(0.0, 0.0), (100.0, 100.0)])
        graph = RoadGraph(list(range(1, len(xy) + 1)), xy, [(0, 1, 1.0)])
        partition = build_partition(graph, 4)
        assert partition.cell_count == 4
        expected = (xy[:, 1] > 50.0) * 2 + (xy[:, 0] > 50.0)
        assert list(partition.cell_of) == list(expected)

    def test_invalid_target(self, small_world):
        graph = build_road_graph(small_world.document, PEDESTRIAN)
        with pytest.raises(ValueError):
            build_partition(graph, 0)

    def test_empty_graph(self):
        with pytest.raises(EmptyGraph):
            build_partition(RoadGraph([], np.zeros((0, 2)), []), 4)


class TestOverlay:
    def test_two_cells_one_bridge(self):
        xy = np.array([[0, 0], [5, 0], [10, 0], [90, 0], [95, 0], [100, 0]], dtype=float)
        edges = []
        for u, v in [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]:
            edges += [(u, v, 1.0), (v, u, 1.0)]
        graph = RoadGraph(list(range(1, 7)), xy, edges)
        overlay = build_overlay(graph, build_partition(graph, 4))
        boundary = sorted(v for vs in overlay.boundary.values() for v in vs)
        assert boundary == [2, 3]

    def test_shortcuts_match_intra_cell_dijkstra(self):
        rng = np.random.default_rng(3)
        graph = random_graph(rng, 100)
        partition = build_partition(graph, 9)
        overlay = build_overlay(graph, partition)
        g = oracle(graph)
        for c, shortcuts in overlay.shortcuts.items():
            inside = g.subgraph([v for v in range(graph.n_vertices) if partition.cell_of[v] == c])
            for s in shortcuts:
                assert s.cost == pytest.approx(nx.dijkstra_path_length(inside, s.src, s.dst), abs=1e-9)


class TestRoute:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_flat_dijkstra(self, seed):
        rng = np.random.default_rng(seed)
        for _ in range(4):
            check_exact(random_graph(rng, int(rng.integers(10, 200))), rng, queries=25)

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_flat_dijkstra_many_graphs(self, seed):
        rng = np.random.default_rng(100 + seed)
        for _ in range(40):
            check_exact(random_graph(rng, int(rng.integers(10, 200))), rng, queries=40)

    def test_flat_and_mld_agree(self):
        rng = np.random.default_rng(11)
        graph = random_graph(rng, 60)
        overlay = build_overlay(graph, build_partition(graph, 4))
        for s, t in rng.integers(0, 60, size=(30, 2)):
            try:
                flat = flat_dijkstra(graph, int(s), int(t))
            except NoRoute:
                continue
            assert route_indices(graph, overlay, int(s), int(t)).cost == pytest.approx(flat.cost, abs=1e-9)

    @pytest.mark.parametrize("seed", range(3))
    def test_triangle_inequality(self, seed):
        rng = np.random.default_rng(200 + seed)
        graph = random_graph(rng, 80)
        overlay = build_overlay(graph, build_partition(graph, 6))
        checked = 0
        for s, m, t in rng.integers(0, 80, size=(60, 3)):
            try:
                direct = route_indices(graph, overlay, int(s), int(t)).cost
                first = route_indices(graph, overlay, int(s), int(m)).cost
                second = route_indices(graph, overlay, int(m), int(t)).cost
            except NoRoute:
                continue
            assert direct <= first + second + 1e-9
            checked += 1
        assert checked > 0

    def test_same_vertex(self, small_world):
        engine = RoutingEngine(small_world.document)
        point = unproject(LocalPoint(20.0, 20.0), small_world.document.origin)
        result = engine.route(point, point)
        assert result.length == 0.0
        assert len(result.vertices) == 1

    def test_length_at_least_straight_line(self, small_world):
        engine = RoutingEngine(small_world.document)
        origin = small_world.document.origin
        result = engine.route(unproject(LocalPoint(20.0, 20.0), origin), unproject(LocalPoint(120.0, 120.0), origin))
        assert result.length == pytest.approx(200.0, abs=1e-3)
        assert result.length >= float(np.hypot(100.0, 100.0))
        assert len(result.polyline) == len(result.vertices)

    def test_disconnected(self):
        xy = np.array([[0, 0], [10, 0], [30, 0], [40, 0]], dtype=float)
        graph = RoadGraph([1, 2, 3, 4], xy, [(0, 1, 1.0), (1, 0, 1.0), (2, 3, 1.0), (3, 2, 1.0)], origin=ORIGIN)
        overlay = build_overlay(graph, build_partition(graph, 1))
        with pytest.raises(NoRoute):
            route(graph, overlay, unproject(LocalPoint(0.0, 0.0), ORIGIN), unproject(LocalPoint(40.0, 0.0), ORIGIN))

    def test_snap_too_far(self, small_world):
        engine = RoutingEngine(small_world.document)
        origin = small_world.document.origin
        near = unproject(LocalPoint(20.0, 20.0), origin)
        far = unproject(LocalPoint(500.0, 500.0), origin)
        with pytest.raises(SnapFailed):
            engine.route(near, far)


class TestSnap:
    def test_exact_vertex(self):
        graph = RoadGraph([7, 8], np.array([[0.0, 0.0], [10.0, 0.0]]), [(0, 1, 1.0)], origin=ORIGIN)
        node_id, distance = snap(graph, unproject(LocalPoint(10.0, 0.0), ORIGIN))
        assert node_id == 8
        assert distance == pytest.approx(0.0, abs=1e-6)

    def test_tie_prefers_smaller_id(self):
        graph = RoadGraph([5, 3], np.array([[0.0, 0.0], [10.0, 0.0]]), [(0, 1, 1.0)], origin=ORIGIN)
        index, _ = snap_local(graph, (5.0, 0.0))
        assert graph.node_ids[index] == 3

    def test_matches_linear_scan(self):
        rng = np.random.default_rng(5)
        graph = random_graph(rng, 80)
        for point in rng.uniform(-50.0, 550.0, size=(200, 2)):
            distances = [np.hypot(*(graph.xy[i] - point)) for i in range(graph.n_vertices)]
            best = min(range(graph.n_vertices), key=lambda i: (distances[i], graph.node_ids[i]))
            index, distance = snap_local(graph, point)
            assert distance == pytest.approx(distances[best])
            assert index == best
