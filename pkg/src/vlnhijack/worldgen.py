"""Synthetic indoor worlds: navigation graphs, textured meshes and episodes."""
from __future__ import annotations

import hashlib
import heapq
import math
from dataclasses import dataclass, field

import numpy as np

CATEGORIES = ("chair", "cabinet", "table", "plant", "sofa", "tv_monitor")

# Per-category base colour baked into the atlas, and box footprint (w, d, h) in meters.
CATEGORY_COLORS = {
    "chair": (0.78, 0.22, 0.20),
    "cabinet": (0.52, 0.34, 0.20),
    "table": (0.88, 0.68, 0.22),
    "plant": (0.22, 0.66, 0.26),
    "sofa": (0.22, 0.32, 0.78),
    "tv_monitor": (0.16, 0.16, 0.18),
}
CATEGORY_SIZES = {
    "chair": (0.8, 0.8, 1.05),
    "cabinet": (1.15, 0.6, 1.6),
    "table": (1.25, 0.9, 0.8),
    "plant": (0.75, 0.75, 1.4),
    "sofa": (1.3, 0.95, 0.9),
    "tv_monitor": (1.15, 0.5, 1.25),
}
# Words that name each category; generated instructions use the first entry.
CATEGORY_WORDS = {
    "chair": ("chair", "seat"),
    "cabinet": ("cabinet", "cupboard"),
    "table": ("table", "desk"),
    "plant": ("plant", "houseplant"),
    "sofa": ("sofa", "couch"),
    "tv_monitor": ("tv", "monitor"),
}
FALLBACK_LANDMARK = "marker"
LANDMARK_RADIUS = 5.0

TURN_WORDS = ("straight", "left", "right", "around")
TEMPLATE_WORDS = (
    "go", "to", "the", "then", "stop", "at",
    "turn", "toward", "and", "wait", "by",
    "past", "next", "finish", "near",
)
PAD, UNK = "<pad>", "<unk>"


def _vocabulary_tokens() -> tuple[str, ...]:
    words = [PAD, UNK, *TEMPLATE_WORDS, *TURN_WORDS, FALLBACK_LANDMARK]
    for names in CATEGORY_WORDS.values():
        words.extend(names)
    return tuple(dict.fromkeys(words))


VOCABULARY = _vocabulary_tokens()


class WorldError(ValueError):
    """Raised for invalid world parameters or impossible generation requests."""


@dataclass(frozen=True)
class NavGraph:
    """Undirected navigation graph with metric node positions (z is the floor height)."""

    positions: np.ndarray
    edges: frozenset

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        adj: dict[int, list[int]] = {i: [] for i in range(len(pos))}
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        object.__setattr__(self, "_adj", {k: tuple(sorted(v)) for k, v in adj.items()})

    @property
    def num_nodes(self) -> int:
        return len(self.positions)

    def neighbors(self, node: int) -> tuple[int, ...]:
        return self._adj[node]

    def has_edge(self, a: int, b: int) -> bool:
        return (min(a, b), max(a, b)) in self.edges

    def distance(self, a: int, b: int) -> float:
        return float(np.linalg.norm(self.positions[a] - self.positions[b]))

    def heading(self, a: int, b: int) -> float:
        """Heading of the move a -> b: 0 faces +y, pi/2 faces +x."""
        d = self.positions[b] - self.positions[a]
        return math.atan2(d[0], d[1])

    def validate(self) -> None:
        n = self.num_nodes
        if not np.all(np.isfinite(self.positions)):
            raise WorldError("node positions must be finite")
        for a, b in self.edges:
            if a == b:
                raise WorldError(f"self-loop at node {a}")
            if not (0 <= a < n and 0 <= b < n) or a > b:
                raise WorldError(f"malformed edge {(a, b)}")
        seen = {0}
        stack = [0]
        while stack:
            for nb in self.neighbors(stack.pop()):
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        if len(seen) != n:
            raise WorldError("navigation graph is not connected")

    def is_trajectory(self, nodes) -> bool:
        nodes = list(nodes)
        return len(nodes) > 0 and all(self.has_edge(a, b) for a, b in zip(nodes, nodes[1:]))


@dataclass
class TextureAtlas:
    texels: np.ndarray  # (height, width, 3) float64 in [0, 1]

    @property
    def height(self) -> int:
        return self.texels.shape[0]

    @property
    def width(self) -> int:
        return self.texels.shape[1]

    def copy(self) -> "TextureAtlas":
        return TextureAtlas(self.texels.copy())


@dataclass(frozen=True)
class SceneObject:
    category: str
    faces: tuple[int, ...]
    center: tuple[float, float, float]


@dataclass
class Scene:
    """Triangle mesh with per-face UVs into a single texture atlas.

    ``face_tiles`` records the atlas rectangle (row0, col0, size) each face's UVs
    live in, so texel masks for an object can be derived without resampling.
    """

    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    face_uvs: np.ndarray  # (F, 3, 2)
    objects: dict[int, SceneObject]
    atlas: TextureAtlas
    face_tiles: np.ndarray = field(default=None)  # (F, 3) int: row0, col0, size
    env_id: str = "env"

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def with_atlas(self, atlas: TextureAtlas) -> "Scene":
        return Scene(self.vertices, self.faces, self.face_uvs, self.objects, atlas,
                     self.face_tiles, self.env_id)

    def face_mask(self, object_id: int) -> np.ndarray:
        if object_id not in self.objects:
            raise KeyError(f"unknown object id {object_id}")
        mask = np.zeros(self.num_faces, dtype=bool)
        mask[list(self.objects[object_id].faces)] = True
        return mask

    def texel_mask(self, object_id: int) -> np.ndarray:
        """Boolean (H, W) mask of atlas texels owned by the object's faces."""
        mask = np.zeros(self.atlas.texels.shape[:2], dtype=bool)
        for f in self.objects[object_id].faces:
            r0, c0, s = self.face_tiles[f]
            mask[r0:r0 + s, c0:c0 + s] = True
        return mask

    def validate(self) -> None:
        nv, nf = len(self.vertices), len(self.faces)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= nv):
            raise WorldError("face vertex index out of range")
        if self.face_uvs.shape != (nf, 3, 2):
            raise WorldError("face_uvs must be (F, 3, 2)")
        if self.face_uvs.size and (self.face_uvs.min() < 0 or self.face_uvs.max() > 1):
            raise WorldError("UV coordinates must lie in [0, 1]")
        owner = np.full(nf, -1)
        for oid, obj in self.objects.items():
            if obj.category not in CATEGORIES:
                raise WorldError(f"object {oid} has unknown category {obj.category!r}")
            for f in obj.faces:
                if owner[f] != -1:
                    raise WorldError(f"face {f} belongs to more than one object")
                owner[f] = oid
        t = self.atlas.texels
        if t.size and (t.min() < 0 or t.max() > 1):
            raise WorldError("atlas texels must lie in [0, 1]")


@dataclass(frozen=True)
class Episode:
    episode_id: str
    env_id: str
    instruction: tuple[str, ...]
    trajectory: tuple[int, ...]

    def __post_init__(self):
        if not self.instruction:
            raise WorldError("episode instruction must be non-empty")
        if len(self.trajectory) < 2:
            raise WorldError("episode trajectory needs at least 2 nodes")


@dataclass(frozen=True)
class WorldParams:
    rooms_x: int = 3
    rooms_y: int = 3
    n_nodes: int = 19
    room_size: float = 4.0
    object_density: float = 2.0
    wall_height: float = 2.5
    door_width: float = 1.0
    atlas_size: int = 256

    def validate(self) -> None:
        rooms = self.rooms_x * self.rooms_y
        if self.n_nodes < 8:
            raise WorldError(f"n_nodes must be >= 8, got {self.n_nodes}")
        if self.rooms_x < 1 or self.rooms_y < 1:
            raise WorldError("room grid dimensions must be positive")
        pairs = self.rooms_x * (self.rooms_y - 1) + self.rooms_y * (self.rooms_x - 1)
        doors = self.n_nodes - rooms
        if not (rooms - 1 <= doors <= pairs):
            raise WorldError(
                f"n_nodes={self.n_nodes} incompatible with a {self.rooms_x}x{self.rooms_y} grid "
                f"(need {2 * rooms - 1}..{rooms + pairs})")
        if self.object_density < 0:
            raise WorldError("object_density must be non-negative")
        if self.room_size < 3.0:
            raise WorldError("room_size must be at least 3 m")
        if self.atlas_size < 16:
            raise WorldError("atlas_size must be at least 16")


# --------------------------------------------------------------------------- mesh building


class _MeshBuilder:
    def __init__(self):
        self.vertices: list = []
        self.faces: list = []
        self.quads: list = []  # (face_a, face_b, texture kind, params)

    def quad(self, corners, kind, params) -> tuple[int, int]:
        """Add a quad with corners ordered (0,0), (1,0), (1,1), (0,1) in UV space."""
        base = len(self.vertices)
        self.vertices.extend(corners)
        fa = len(self.faces)
        self.faces.append((base, base + 1, base + 2))
        self.faces.append((base, base + 2, base + 3))
        self.quads.append((fa, fa + 1, kind, params))
        return fa, fa + 1


def _box(builder, center, size, params):
    cx, cy = center
    w, d, h = size
    x0, x1 = cx - w / 2, cx + w / 2
    y0, y1 = cy - d / 2, cy + d / 2
    faces = []
    shades = {"top": 1.0, "north": 0.86, "south": 0.78, "east": 0.92, "west": 0.72}
    quads = {
        "top": [(x0, y0, h), (x1, y0, h), (x1, y1, h), (x0, y1, h)],
        "south": [(x0, y0, 0), (x1, y0, 0), (x1, y0, h), (x0, y0, h)],
        "north": [(x1, y1, 0), (x0, y1, 0), (x0, y1, h), (x1, y1, h)],
        "east": [(x1, y0, 0), (x1, y1, 0), (x1, y1, h), (x1, y0, h)],
        "west": [(x0, y1, 0), (x0, y0, 0), (x0, y0, h), (x0, y1, h)],
    }
    for side, corners in quads.items():
        faces.extend(builder.quad(corners, "object", dict(params, shade=shades[side])))
    return faces


def _tile_size(n_quads: int, atlas: int) -> int:
    size = 32
    while size > 2 and (atlas // size) ** 2 < n_quads:
        size //= 2
    if (atlas // size) ** 2 < n_quads:
        raise WorldError(f"atlas of {atlas}x{atlas} cannot host {n_quads} quads")
    return size


def _paint(kind: str, params: dict, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "floor":
        base = np.asarray(params["color"])
        checker = ((yy // max(size // 4, 1) + xx // max(size // 4, 1)) % 2)[..., None]
        tex = base + 0.06 * (checker - 0.5)
    elif kind == "wall":
        base = np.asarray(params["color"])
        stripe = (np.sin(yy * 2 * np.pi / size * 2) * 0.03)[..., None]
        tex = base + stripe
    else:
        base = np.asarray(params["color"]) * params["shade"]
        band = ((xx * 3 // size) % 2)[..., None]
        tex = base + 0.05 * (band - 0.5)
    tex = tex + rng.normal(0.0, 0.015, size=(size, size, 3))
    return np.clip(tex, 0.05, 0.95)


NODE_CLEARANCE = 0.5


def generate_world(seed: int, params: WorldParams | None = None, env_id: str | None = None):
    """Build a reproducible grid-of-rooms world.

    Room centres and doorways become graph nodes (room centres first, row-major),
    each doorway joins the two rooms it connects. Objects are axis-aligned boxes
    placed in the diagonal quadrants of rooms so they never sit on a node.

    Returns ``(scene, graph)``.
    """
    params = params or WorldParams()
    params.validate()
    rng = np.random.default_rng(seed)
    env_id = env_id or f"world{seed}"
    nx, ny, s = params.rooms_x, params.rooms_y, params.room_size
    rooms = nx * ny
    room_id = lambda i, j: j * nx + i  # noqa: E731

    pairs = []
    for j in range(ny):
        for i in range(nx):
            if i + 1 < nx:
                pairs.append((room_id(i, j), room_id(i + 1, j)))
            if j + 1 < ny:
                pairs.append((room_id(i, j), room_id(i, j + 1)))
    order = rng.permutation(len(pairs))
    parent = list(range(rooms))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    doors, spare = [], []
    for k in order:
        a, b = pairs[k]
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
            doors.append(pairs[k])
        else:
            spare.append(pairs[k])
    doors.extend(spare[: params.n_nodes - rooms - len(doors)])
    doors.sort()

    centers = np.zeros((rooms, 3))
    for j in range(ny):
        for i in range(nx):
            jitter = rng.uniform(-0.3, 0.3, size=2)
            centers[room_id(i, j)] = ((i + 0.5) * s + jitter[0], (j + 0.5) * s + jitter[1], 0.0)

    door_pos = []
    door_offset = {}
    slack = min(0.6, s / 2 - params.door_width / 2 - 0.5)
    for a, b in doors:
        off = rng.uniform(-slack, slack)
        door_offset[(a, b)] = off
        ia, ja = a % nx, a // nx
        if b == a + 1:  # east-west neighbours share a vertical wall
            door_pos.append(((ia + 1) * s, (ja + 0.5) * s + off, 0.0))
        else:
            door_pos.append(((ia + 0.5) * s + off, (ja + 1) * s, 0.0))
    positions = np.vstack([centers, np.asarray(door_pos).reshape(-1, 3)])
    edges = set()
    for k, (a, b) in enumerate(doors):
        d = rooms + k
        edges.add((min(a, d), max(a, d)))
        edges.add((min(b, d), max(b, d)))
    graph = NavGraph(positions, frozenset(edges))

    builder = _MeshBuilder()
    h = params.wall_height
    for j in range(ny):
        for i in range(nx):
            color = rng.uniform(0.35, 0.6, size=3)
            x0, y0 = i * s, j * s
            builder.quad([(x0, y0, 0), (x0 + s, y0, 0), (x0 + s, y0 + s, 0), (x0, y0 + s, 0)],
                         "floor", {"color": color})

    def wall(p0, p1, color):
        builder.quad([(p0[0], p0[1], 0), (p1[0], p1[1], 0), (p1[0], p1[1], h), (p0[0], p0[1], h)],
                     "wall", {"color": color})

    wall_color = lambda: rng.uniform(0.62, 0.8, size=3)  # noqa: E731
    door_set = set(doors)
    w2 = params.door_width / 2
    # Vertical walls at x = i*s, horizontal walls at y = j*s.
    for i in range(nx + 1):
        for j in range(ny):
            y0, y1 = j * s, (j + 1) * s
            pair = (room_id(i - 1, j), room_id(i, j)) if 0 < i < nx else None
            if pair in door_set:
                c = (j + 0.5) * s + door_offset[pair]
                col = wall_color()
                wall((i * s, y0), (i * s, c - w2), col)
                wall((i * s, c + w2), (i * s, y1), col)
            else:
                wall((i * s, y0), (i * s, y1), wall_color())
    for j in range(ny + 1):
        for i in range(nx):
            x0, x1 = i * s, (i + 1) * s
            pair = (room_id(i, j - 1), room_id(i, j)) if 0 < j < ny else None
            if pair in door_set:
                c = (i + 0.5) * s + door_offset[pair]
                col = wall_color()
                wall((x0, j * s), (c - w2, j * s), col)
                wall((c + w2, j * s), (x1, j * s), col)
            else:
                wall((x0, j * s), (x1, j * s), wall_color())

    n_objects = int(round(params.object_density * rooms))
    slots = [(r, qx, qy) for r in range(rooms) for qx in (-1, 1) for qy in (-1, 1)]
    n_objects = min(n_objects, len(slots))
    cats = list(CATEGORIES) if n_objects >= len(CATEGORIES) else []
    cats += [CATEGORIES[k] for k in rng.integers(0, len(CATEGORIES), size=n_objects - len(cats))]
    cats = [cats[k] for k in rng.permutation(len(cats))]
    chosen = rng.permutation(len(slots))[:n_objects]
    objects = {}
    # Inner/outer bounds of the quadrant an object may occupy, measured from the
    # nominal room centre. Boxes may reach toward the centre-to-door axes but keep
    # NODE_CLEARANCE from the jittered centre node; doorways lie beyond ``hi``.
    lo, hi = 0.15, s / 2 - 0.35
    for oid, (slot_k, cat) in enumerate(zip(sorted(chosen), cats)):
        r, qx, qy = slots[slot_k]
        i, j = r % nx, r // nx
        scale = rng.uniform(0.9, 1.0)
        w, d, hh = (v * scale for v in CATEGORY_SIZES[cat])
        if rng.random() < 0.5:
            w, d = d, w
        w, d = min(w, hi - lo), min(d, hi - lo)
        node = centers[r, :2]
        for _ in range(100):
            cxr = rng.uniform(lo + w / 2, hi - w / 2)
            cyr = rng.uniform(lo + d / 2, hi - d / 2)
            cx = (i + 0.5) * s + qx * cxr
            cy = (j + 0.5) * s + qy * cyr
            gap = np.maximum(np.abs(node - (cx, cy)) - (w / 2, d / 2), 0.0)
            if np.hypot(*gap) >= NODE_CLEARANCE:
                break
        else:  # pragma: no cover - the outer corner of the quadrant always clears
            cx, cy = (i + 0.5) * s + qx * (hi - w / 2), (j + 0.5) * s + qy * (hi - d / 2)
        color = np.clip(np.asarray(CATEGORY_COLORS[cat]) + rng.uniform(-0.05, 0.05, size=3), 0.05, 0.95)
        faces = _box(builder, (cx, cy), (w, d, hh), {"color": color})
        objects[oid] = SceneObject(cat, tuple(faces), (cx, cy, hh / 2))

    # Atlas: one square tile per quad, UVs inset by half a texel.
    A = params.atlas_size
    tile = _tile_size(len(builder.quads), A)
    per_row = A // tile
    texels = np.full((A, A, 3), 0.5)
    nf = len(builder.faces)
    face_uvs = np.zeros((nf, 3, 2))
    face_tiles = np.zeros((nf, 3), dtype=np.int64)
    for q, (fa, fb, kind, qparams) in enumerate(builder.quads):
        r0, c0 = (q // per_row) * tile, (q % per_row) * tile
        texels[r0:r0 + tile, c0:c0 + tile] = _paint(kind, qparams, tile, rng)
        u0, u1 = (c0 + 0.5) / A, (c0 + tile - 0.5) / A
        v0, v1 = (r0 + 0.5) / A, (r0 + tile - 0.5) / A
        corner_uv = np.array([(u0, v1), (u1, v1), (u1, v0), (u0, v0)])
        face_uvs[fa] = corner_uv[[0, 1, 2]]
        face_uvs[fb] = corner_uv[[0, 2, 3]]
        face_tiles[fa] = face_tiles[fb] = (r0, c0, tile)

    scene = Scene(
        vertices=np.asarray(builder.vertices, dtype=np.float64),
        faces=np.asarray(builder.faces, dtype=np.int64).reshape(-1, 3),
        face_uvs=face_uvs,
        objects=objects,
        atlas=TextureAtlas(texels.astype(np.float32).astype(np.float64)),  # exact in the float32 blob
        face_tiles=face_tiles,
        env_id=env_id,
    )
    return scene, graph


# --------------------------------------------------------------------------- paths


def shortest_path(graph: NavGraph, a: int, b: int) -> tuple[int, ...]:
    """Minimum metric-length path from ``a`` to ``b``.

    Equal-length paths are resolved in favour of the lexicographically smallest
    node sequence. Lengths are compared after rounding to 1e-9 m.
    """
    n = graph.num_nodes
    if not (0 <= a < n and 0 <= b < n):
        raise KeyError(f"node out of range: {(a, b)}")
    heap = [(0.0, (a,), 0.0)]
    settled = set()
    while heap:
        _, path, dist = heapq.heappop(heap)
        node = path[-1]
        if node in settled:
            continue
        settled.add(node)
        if node == b:
            return path
        for nb in graph.neighbors(node):
            if nb not in settled:
                d = dist + graph.distance(node, nb)
                heapq.heappush(heap, (round(d, 9), path + (nb,), d))
    raise WorldError(f"node {b} unreachable from {a}")


def path_length(graph: NavGraph, path) -> float:
    return float(sum(graph.distance(u, v) for u, v in zip(path, path[1:])))


# --------------------------------------------------------------------------- instructions


def turn_word(relative: float) -> str:
    rel = math.remainder(relative, 2 * math.pi)
    if abs(rel) <= math.pi / 4:
        return "straight"
    if abs(rel) >= 3 * math.pi / 4:
        return "around"
    return "right" if rel > 0 else "left"


def nearest_category(scene: Scene, position) -> str | None:
    best, best_d = None, LANDMARK_RADIUS
    for oid in sorted(scene.objects):
        obj = scene.objects[oid]
        d = math.hypot(obj.center[0] - position[0], obj.center[1] - position[1])
        if d <= best_d:
            best, best_d = obj.category, d
    return best


def instruction_from_trajectory(trajectory, scene: Scene, graph: NavGraph,
                                template_index: int, initial_heading: float = 0.0) -> tuple[str, ...]:
    """Fill one of three paraphrase templates from turn directions and landmarks.

    The agent starts facing ``initial_heading``; every move is labelled relative
    to the heading of the previous move.
    """
    if template_index not in (0, 1, 2):
        raise ValueError("template_index must be 0, 1 or 2")
    traj = list(trajectory)
    heading = initial_heading
    steps = []
    for u, v in zip(traj, traj[1:]):
        h = graph.heading(u, v)
        steps.append((turn_word(h - heading), _landmark(scene, graph.positions[v])))
        heading = h
    goal = _landmark(scene, graph.positions[traj[-1]])

    tokens: list[str] = []
    if template_index == 0:
        for k, (turn, lm) in enumerate(steps):
            tokens += ["go", turn, "to", "the", lm, "then"]
        tokens += ["stop", "at", "the", goal]
    elif template_index == 1:
        for k, (turn, lm) in enumerate(steps):
            tokens += ["turn", turn, "toward", "the", lm, "and"]
        tokens += ["wait", "by", "the", goal]
    else:
        for k, (turn, lm) in enumerate(steps):
            tokens += [turn, "past", "the", lm, "next"]
        tokens += ["finish", "near", "the", goal]
    return tuple(tokens)


def _landmark(scene: Scene, position) -> str:
    cat = nearest_category(scene, position)
    if cat is None:
        return FALLBACK_LANDMARK
    return CATEGORY_WORDS[cat][0]


def generate_episodes(graph: NavGraph, scene: Scene, count: int, seed: int,
                      min_edges: int = 4, max_edges: int = 7, prefix: str = "ep") -> list[Episode]:
    """Sample shortest-path trajectories and pair each with 3 paraphrases.

    Returns ``count`` episodes; consecutive triples share one trajectory.
    """
    if count < 1:
        raise WorldError("count must be >= 1")
    pairs = []
    for a in range(graph.num_nodes):
        for b in range(graph.num_nodes):
            if a != b:
                path = shortest_path(graph, a, b)
                if min_edges <= len(path) - 1 <= max_edges:
                    pairs.append(path)
    if not pairs:
        raise WorldError(f"graph has no shortest path of {min_edges}-{max_edges} edges")
    rng = np.random.default_rng(seed)
    n_traj = -(-count // 3)
    order = rng.permutation(len(pairs))
    if n_traj > len(pairs):
        order = np.concatenate([order, rng.integers(0, len(pairs), size=n_traj - len(pairs))])
    episodes = []
    for k in range(n_traj):
        path = pairs[order[k]]
        for t in range(3):
            if len(episodes) == count:
                break
            episodes.append(Episode(
                episode_id=f"{scene.env_id}/{prefix}{seed}-{k:04d}-{t}",
                env_id=scene.env_id,
                instruction=instruction_from_trajectory(path, scene, graph, t),
                trajectory=tuple(int(v) for v in path),
            ))
    return episodes


def stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")
