import hashlib
import itertools
import math

import numpy as np
import pytest

from vlnhijack import storage
from vlnhijack.worldgen import (CATEGORIES, VOCABULARY, NavGraph, WorldError, WorldParams, generate_episodes,
                                generate_world, instruction_from_trajectory, path_length, shortest_path, turn_word)

from conftest import facing_quad, line_graph, quad_scene


def graph_digest(graph):
    return hashlib.sha256(graph.positions.tobytes() + repr(sorted(graph.edges)).encode()).hexdigest()


def test_generate_world_is_deterministic():
    s1, g1 = generate_world(1)
    s2, g2 = generate_world(1)
    assert np.array_equal(s1.vertices, s2.vertices)
    assert np.array_equal(s1.faces, s2.faces)
    assert np.array_equal(s1.face_uvs, s2.face_uvs)
    assert np.array_equal(s1.atlas.texels, s2.atlas.texels)
    assert s1.objects == s2.objects
    assert graph_digest(g1) == graph_digest(g2)


def test_different_seeds_differ():
    _, g1 = generate_world(1)
    _, g2 = generate_world(2)
    assert graph_digest(g1) != graph_digest(g2)


def test_zero_density_gives_empty_object_table():
    scene, graph = generate_world(4, WorldParams(object_density=0.0))
    assert scene.objects == {}
    scene.validate()
    graph.validate()
    assert scene.num_faces > 0


def test_world_invariants():
    scene, graph = generate_world(5)
    scene.validate()
    graph.validate()
    assert {o.category for o in scene.objects.values()} == set(CATEGORIES)
    for obj in scene.objects.values():
        faces = sorted(obj.faces)
        assert faces == list(range(faces[0], faces[0] + len(faces)))
    assert scene.atlas.texels.min() >= 0 and scene.atlas.texels.max() <= 1


@pytest.mark.parametrize("n_nodes", [4, 7])
def test_too_few_nodes_rejected(n_nodes):
    with pytest.raises(WorldError):
        generate_world(0, WorldParams(n_nodes=n_nodes))


def test_shortest_path_trivial_cases():
    g = line_graph(3)
    assert shortest_path(g, 1, 1) == (1,)
    assert shortest_path(g, 0, 1) == (0, 1)
    with pytest.raises(WorldError):
        shortest_path(NavGraph(np.zeros((2, 3)), frozenset()), 0, 1)


def brute_force_path(graph, a, b):
    best = None
    n = graph.num_nodes

    def walk(path):
        nonlocal best
        if path[-1] == b:
            key = (round(path_length(graph, path), 9), path)
            if best is None or key < best:
                best = key
            return
        for nb in graph.neighbors(path[-1]):
            if nb not in path:
                walk(path + (nb,))

    walk((a,))
    assert n <= 10
    return best[1]


def test_two_hop_path_beats_direct_edge_on_tie():
    # Edge lengths are Euclidean, so a detour can at best tie the direct edge; with the
    # intermediate node collinear, the lexicographically smaller (0, 1, 3) wins.
    pos = np.array([[0, 0, 0], [2, 0, 0], [0, 3, 0], [4, 0, 0], [4, 3, 0]], dtype=float)
    g = NavGraph(pos, frozenset({(0, 1), (1, 3), (0, 3), (0, 2), (2, 4), (3, 4)}))
    assert shortest_path(g, 0, 3) == (0, 1, 3) == brute_force_path(g, 0, 3)
    bent = NavGraph(pos + np.array([[0, 0, 0], [0, 0.2, 0], [0, 0, 0], [0, 0, 0], [0, 0, 0]]), g.edges)
    assert shortest_path(bent, 0, 3) == (0, 3) == brute_force_path(bent, 0, 3)


def test_shortest_path_matches_brute_force_on_random_graphs():
    rng = np.random.default_rng(0)
    for _ in range(30):
        n = int(rng.integers(4, 10))
        pos = np.zeros((n, 3))
        pos[:, :2] = rng.integers(0, 4, size=(n, 2))  # integer grid: lots of exact ties
        edges = {(k - 1, k) for k in range(1, n)}
        for a, b in itertools.combinations(range(n), 2):
            if rng.random() < 0.3:
                edges.add((a, b))
        g = NavGraph(pos, frozenset(edges))
        for a in range(n):
            for b in range(n):
                assert shortest_path(g, a, b) == brute_force_path(g, a, b)


def test_generate_episodes_basic():
    scene, graph = generate_world(2)
    eps = generate_episodes(graph, scene, 3, seed=0)
    assert len(eps) == 3
    assert len({e.trajectory for e in eps}) == 1
    for e in eps:
        assert 4 <= len(e.trajectory) - 1 <= 7
        assert graph.is_trajectory(e.trajectory)
        assert e.trajectory == shortest_path(graph, e.trajectory[0], e.trajectory[-1])
    assert generate_episodes(graph, scene, 3, seed=0) == eps


def test_episode_vocabulary_scan():
    scene, graph = generate_world(2)
    eps = generate_episodes(graph, scene, 300, seed=1)
    assert len(eps) == 300
    vocab = set(VOCABULARY)
    assert len(vocab) <= 128
    for e in eps:
        assert e.instruction
        assert set(e.instruction) <= vocab
        assert graph.is_trajectory(e.trajectory)


def test_generate_episodes_errors():
    scene, _ = generate_world(2)
    with pytest.raises(WorldError):
        generate_episodes(line_graph(4), scene, 3, seed=0)
    with pytest.raises(WorldError):
        generate_episodes(line_graph(8), scene, 0, seed=0)


def landmark_scene():
    sofa = facing_quad((0.5, 1.0, 0.4), 0.0, 0.3, 0.3)
    table = facing_quad((0.5, 2.0, 0.4), 0.0, 0.3, 0.3)
    return quad_scene([(sofa, 0.2), (table, 0.7)],
                      {0: ("sofa", [0], (0.5, 1.0, 0.4)), 1: ("table", [1], (0.5, 2.0, 0.4))})


def test_instruction_straight_path_past_sofa_to_table():
    scene, graph = landmark_scene(), line_graph(3)
    tokens = instruction_from_trajectory((0, 1, 2), scene, graph, 0)
    # geometric oracle: headings of both moves are 0, and the nearest objects to nodes 1 and 2
    turns = [turn_word(graph.heading(0, 1) - 0.0), turn_word(graph.heading(1, 2) - graph.heading(0, 1))]
    assert turns == ["straight", "straight"]
    near = [min(scene.objects.values(), key=lambda o: math.dist(o.center[:2], graph.positions[v][:2])).category
            for v in (1, 2)]
    assert near == ["sofa", "table"]
    assert {"straight", "sofa", "table"} <= set(tokens)
    assert tokens[-1] == "table"


def test_templates_share_landmarks():
    scene, graph = landmark_scene(), line_graph(3)
    t0 = instruction_from_trajectory((0, 1, 2), scene, graph, 0)
    t1 = instruction_from_trajectory((0, 1, 2), scene, graph, 1)
    assert t0 != t1
    landmarks = {"sofa", "table", "marker"}
    assert [t for t in t0 if t in landmarks] == [t for t in t1 if t in landmarks]
    with pytest.raises(ValueError):
        instruction_from_trajectory((0, 1, 2), scene, graph, 3)


def test_single_edge_instruction_and_marker_fallback():
    scene = quad_scene([])
    graph = line_graph(2)
    tokens = instruction_from_trajectory((0, 1), scene, graph, 0)
    assert tokens == ("go", "straight", "to", "the", "marker", "then", "stop", "at", "the", "marker")


def test_turn_words():
    assert turn_word(0.0) == "straight"
    assert turn_word(math.pi / 2) == "right"
    assert turn_word(-math.pi / 2) == "left"
    assert turn_word(math.pi) == "around"
    assert turn_word(2 * math.pi + 0.1) == "straight"


def test_world_json_roundtrip(tmp_path):
    scene, graph = generate_world(6)
    eps = generate_episodes(graph, scene, 6, seed=3)
    path = storage.save_world(tmp_path, scene, graph, eps)
    s2, g2, e2 = storage.load_world(path)
    assert np.array_equal(s2.vertices, scene.vertices) and np.array_equal(s2.faces, scene.faces)
    assert np.array_equal(s2.face_uvs, scene.face_uvs)
    assert np.array_equal(s2.atlas.texels, scene.atlas.texels)
    assert s2.objects == scene.objects
    assert graph_digest(g2) == graph_digest(graph)
    assert e2 == eps
