"""A world bundled with its cached panoramic observations."""
from __future__ import annotations

import math

import numpy as np

from . import render
from .worldgen import NavGraph, Scene

PATCH_GRID = 4
RAW_DIM = PATCH_GRID * PATCH_GRID * 3


def patch_means(images: np.ndarray) -> np.ndarray:
    """(..., H, W, 3) -> (..., 48): 4x4 grid of patch means, channels last."""
    *lead, h, w, c = images.shape
    g = PATCH_GRID
    x = images.reshape(*lead, g, h // g, g, w // g, c)
    return x.mean(axis=(-4, -2)).reshape(*lead, g * g * c)


def candidate_direction(graph: NavGraph, node: int, neighbor: int) -> tuple[float, float]:
    """Heading toward the neighbour and elevation toward its floor point from eye height."""
    return graph.heading(node, neighbor), -math.atan2(render.EYE_HEIGHT, graph.distance(node, neighbor))


class World:
    """Scene + graph + rasterized panoramas for every node.

    ``images`` and ``raw`` reflect the current atlas; :meth:`with_texels` returns a
    world sharing geometry buffers but shaded from a different atlas.
    """

    def __init__(self, scene: Scene, graph: NavGraph, resolution: int = render.DEFAULT_RESOLUTION,
                 _cache: render.PanoramaCache | None = None, _images: np.ndarray | None = None):
        if resolution % PATCH_GRID:
            raise ValueError("resolution must be divisible by 4")
        self.scene = scene
        self.graph = graph
        self.resolution = resolution
        self.cache = _cache or render.PanoramaCache(scene, graph, resolution)
        self.images = self.cache.images if _images is None else _images
        self.raw = patch_means(self.images)  # (N, 36, 48)
        self._views = {}

    @property
    def env_id(self) -> str:
        return self.scene.env_id

    def candidates(self, node: int):
        """Sorted neighbour ids, their directions and panorama view indices."""
        out = []
        for nb in self.graph.neighbors(node):
            h, e = candidate_direction(self.graph, node, nb)
            out.append((nb, h, e, render.nearest_view(h, e)))
        return out

    def views_showing(self, node: int, object_id: int) -> list[int]:
        key = (node, object_id)
        if key not in self._views:
            self._views[key] = self.cache.views_showing(node, self.scene.face_mask(object_id))
        return self._views[key]

    def with_texels(self, texels: np.ndarray, object_id: int | None = None) -> "World":
        """World observed through ``texels``; only views showing ``object_id`` are re-shaded."""
        scene = self.scene.with_atlas(type(self.scene.atlas)(texels))
        if object_id is None:
            images = np.stack([[render.shade(b, texels) for b in bufs] for bufs in self.cache.buffers])
        else:
            images = self.images.copy()
            for node in range(self.graph.num_nodes):
                views = self.views_showing(node, object_id)
                if views:
                    images[node, views] = self.cache.shade_views(node, views, texels)
        w = World(scene, self.graph, self.resolution, _cache=self.cache, _images=images)
        w._views = self._views
        return w
