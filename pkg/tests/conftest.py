"""Shared scene builders and fixtures."""
import math

import numpy as np
import pytest

from vlnhijack.environment import World
from vlnhijack.attack import AttackInstance
from vlnhijack.worldgen import Episode, NavGraph, Scene, SceneObject, TextureAtlas, generate_world

# Lines collected by tests/test_acceptance.py and printed at the end of the run.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def quad_scene(quads, objects=None, atlas_size=64, tile=16, env_id="test", background=0.5):
    """Build a scene from textured quads.

    ``quads`` is a list of ``(corners, paint)`` where corners is (4, 3) in
    counter-clockwise order and paint is an RGB triple or a (tile, tile, 3)
    texture. ``objects`` maps object id -> (category, [quad indices], center).
    """
    per_row = atlas_size // tile
    if len(quads) > per_row * per_row:
        raise ValueError("too many quads for the atlas")
    texels = np.full((atlas_size, atlas_size, 3), background)
    verts, faces, uvs, tiles = [], [], [], []
    for q, (corners, paint) in enumerate(quads):
        r0, c0 = (q // per_row) * tile, (q % per_row) * tile
        texels[r0:r0 + tile, c0:c0 + tile] = paint
        base = len(verts)
        verts.extend(np.asarray(corners, dtype=float))
        u0, u1 = (c0 + 0.5) / atlas_size, (c0 + tile - 0.5) / atlas_size
        v0, v1 = (r0 + 0.5) / atlas_size, (r0 + tile - 0.5) / atlas_size
        cuv = [(u0, v1), (u1, v1), (u1, v0), (u0, v0)]
        faces += [(base, base + 1, base + 2), (base, base + 2, base + 3)]
        uvs += [[cuv[0], cuv[1], cuv[2]], [cuv[0], cuv[2], cuv[3]]]
        tiles += [(r0, c0, tile)] * 2
    objs = {}
    for oid, (cat, qidx, center) in (objects or {}).items():
        objs[oid] = SceneObject(cat, tuple(f for q in qidx for f in (2 * q, 2 * q + 1)), tuple(center))
    return Scene(
        vertices=np.array(verts, dtype=float).reshape(-1, 3),
        faces=np.array(faces, dtype=np.int64).reshape(-1, 3),
        face_uvs=np.array(uvs, dtype=float).reshape(-1, 3, 2),
        objects=objs,
        atlas=TextureAtlas(texels),
        face_tiles=np.array(tiles, dtype=np.int64).reshape(-1, 3),
        env_id=env_id,
    )


def facing_quad(center, heading, half_w, half_h):
    """Vertical quad centred at ``center`` whose normal points back along ``heading``."""
    c = np.asarray(center, dtype=float)
    right = np.array([math.cos(heading), -math.sin(heading), 0.0])
    up = np.array([0.0, 0.0, 1.0])
    return np.array([c - half_w * right - half_h * up, c + half_w * right - half_h * up,
                     c + half_w * right + half_h * up, c - half_w * right + half_h * up])


def random_scene(rng, n_quads=8, atlas_size=64, tile=16):
    """Random textured quads scattered around the origin at eye height."""
    quads = []
    for _ in range(n_quads):
        heading = rng.uniform(-math.pi, math.pi)
        dist = rng.uniform(0.8, 3.0)
        center = (dist * math.sin(heading), dist * math.cos(heading), rng.uniform(-0.6, 0.6))
        corners = facing_quad(center, heading + rng.uniform(-0.5, 0.5), rng.uniform(0.2, 0.8),
                              rng.uniform(0.2, 0.8))
        quads.append((corners, rng.uniform(0, 1, (tile, tile, 3))))
    objects = {0: ("sofa", list(range(0, n_quads, 2)), (0.0, 0.0, 0.0))}
    return quad_scene(quads, objects, atlas_size=atlas_size, tile=tile)


def line_graph(n, spacing=1.0):
    pos = np.array([[0.0, spacing * k, 0.0] for k in range(n)])
    return NavGraph(pos, frozenset((k, k + 1) for k in range(n - 1)))


def corridor_world(spacing=1.0, n=6, resolution=16, seed=0):
    """Nodes along +y; a textured sofa wall on the right, a chair wall on the left."""
    rng = np.random.default_rng(seed)
    length = spacing * (n - 1)
    sofa = np.array([[0.8, 0.5 * length - 1.2, 0.0], [0.8, 0.5 * length + 1.2, 0.0],
                     [0.8, 0.5 * length + 1.2, 1.8], [0.8, 0.5 * length - 1.2, 1.8]])
    chair = sofa * np.array([-1, 1, 1]) + np.array([0, 0.5, 0])
    floor = np.array([[-3, -3, 0], [3, -3, 0], [3, length + 3, 0], [-3, length + 3, 0]], dtype=float)
    scene = quad_scene([(sofa, rng.uniform(size=(16, 16, 3))), (chair, rng.uniform(size=(16, 16, 3))),
                        (floor, 0.4)],
                       {0: ("sofa", [0], (0.8, 0.5 * length, 0.0)), 1: ("chair", [1], (-0.8, 0.5 * length, 0.0))},
                       env_id="corridor")
    pos = np.array([[0.0, spacing * k, 0.0] for k in range(n)])
    graph = NavGraph(pos, frozenset((k, k + 1) for k in range(n - 1)))
    return World(scene, graph, resolution)


def ep(eid, traj, words=("go", "straight", "to", "the", "sofa")):
    return Episode(f"corridor/{eid}", "corridor", tuple(words), tuple(traj))


def make_instance(world, mode="trajectory", v_atk=2, attack_traj=(2, 3, 4), train=None, val=None, oid=0):
    train = train if train is not None else (ep("a", (0, 1, 2, 3)), ep("b", (1, 2, 3, 4)), ep("c", (0, 1, 2)))
    val = val if val is not None else (ep("d", (0, 1, 2, 3, 4)),)
    return AttackInstance(f"{mode}:x", world.env_id, mode, ep("t", (0, 1, 2, 3)), oid,
                          world.scene.objects[oid].category, 0.5, v_atk,
                          tuple(attack_traj) if mode == "trajectory" else (), tuple(train), tuple(val))


@pytest.fixture(scope="session")
def small_world():
    scene, graph = generate_world(3)
    return World(scene, graph, resolution=16)
