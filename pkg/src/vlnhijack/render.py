"""Unlit z-buffered rasterizer with an exact texture-space backward pass.

Visibility is resolved per pixel centre; only the bilinear texture lookup is
differentiated, so gradients w.r.t. atlas texels are exact while geometry and
occlusion are treated as constants.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .worldgen import Scene

BACKGROUND = 0.5
EYE_HEIGHT = 1.3
NEAR = 1e-3
N_HEADINGS = 12
ELEVATIONS = (-math.pi / 6, 0.0, math.pi / 6)
PANORAMA_HFOV = math.pi / 3
N_VIEWS = N_HEADINGS * len(ELEVATIONS)
DEFAULT_RESOLUTION = 32


@dataclass(frozen=True)
class Camera:
    position: tuple
    heading: float
    elevation: float = 0.0
    hfov: float = PANORAMA_HFOV
    width: int = DEFAULT_RESOLUTION
    height: int = DEFAULT_RESOLUTION

    def __post_init__(self):
        if not 0 < self.hfov < math.pi:
            raise ValueError("hfov must lie in (0, pi)")
        if self.width < 8 or self.height < 8:
            raise ValueError("camera resolution must be at least 8x8")

    def basis(self) -> np.ndarray:
        """Rows: right, up, forward (world coordinates, z up)."""
        ch, sh = math.cos(self.heading), math.sin(self.heading)
        ce, se = math.cos(self.elevation), math.sin(self.elevation)
        forward = np.array([sh * ce, ch * ce, se])
        right = np.array([ch, -sh, 0.0])
        up = np.cross(right, forward)
        return np.stack([right, up, forward])

    def pixel_directions(self) -> np.ndarray:
        """Camera-space ray directions (x, y, 1) through pixel centres, shape (H*W, 3)."""
        tx = math.tan(self.hfov / 2)
        ty = tx * self.height / self.width
        xs = ((np.arange(self.width) + 0.5) / self.width * 2 - 1) * tx
        ys = (1 - (np.arange(self.height) + 0.5) / self.height * 2) * ty
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx.ravel(), gy.ravel(), np.ones(gx.size)], axis=1)


@dataclass
class RasterBuffers:
    face_id: np.ndarray  # (H, W) int, -1 for background
    uv: np.ndarray  # (H, W, 2)
    depth: np.ndarray  # (H, W), inf for background
    atlas_shape: tuple[int, int]
    _footprint: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def covered(self) -> np.ndarray:
        return self.face_id >= 0

    def footprint(self) -> tuple[np.ndarray, np.ndarray]:
        """Flat atlas indices (H, W, 4) and bilinear weights (H, W, 4); weights are 0 off-mesh."""
        if self._footprint is None:
            self._footprint = bilinear_footprint(self.uv, self.atlas_shape, self.covered)
        return self._footprint


def bilinear_footprint(uv, atlas_shape, covered):
    ah, aw = atlas_shape
    x = uv[..., 0] * aw - 0.5
    y = uv[..., 1] * ah - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx, fy = x - x0, y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xa, xb = np.clip(x0, 0, aw - 1), np.clip(x0 + 1, 0, aw - 1)
    ya, yb = np.clip(y0, 0, ah - 1), np.clip(y0 + 1, 0, ah - 1)
    idx = np.stack([ya * aw + xa, ya * aw + xb, yb * aw + xa, yb * aw + xb], axis=-1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    w = np.where(covered[..., None], w, 0.0)
    idx = np.where(covered[..., None], idx, 0)
    return idx, w


def rasterize(scene: Scene, camera: Camera) -> RasterBuffers:
    h, w = camera.height, camera.width
    atlas_shape = scene.atlas.texels.shape[:2]
    face_id = np.full(h * w, -1, dtype=np.int64)
    uv = np.zeros((h * w, 2))
    depth = np.full(h * w, np.inf)
    if scene.num_faces == 0:
        return RasterBuffers(face_id.reshape(h, w), uv.reshape(h, w, 2), depth.reshape(h, w), atlas_shape)

    basis = camera.basis()
    eye = np.asarray(camera.position, dtype=np.float64)
    tri = (scene.vertices[scene.faces] - eye) @ basis.T  # (F, 3 verts, xyz) camera space
    tx = math.tan(camera.hfov / 2)
    ty = tx * h / w
    x, y, z = tri[..., 0], tri[..., 1], tri[..., 2]
    outside = (
        np.all(z <= NEAR, axis=1)
        | np.all(x - z * tx > 0, axis=1)
        | np.all(-x - z * tx > 0, axis=1)
        | np.all(y - z * ty > 0, axis=1)
        | np.all(-y - z * ty > 0, axis=1)
    )
    keep = np.flatnonzero(~outside)
    if keep.size == 0:
        return RasterBuffers(face_id.reshape(h, w), uv.reshape(h, w, 2), depth.reshape(h, w), atlas_shape)

    v0, v1, v2 = tri[keep, 0], tri[keep, 1], tri[keep, 2]
    e1, e2 = v1 - v0, v2 - v0
    tvec = -v0
    # Moller-Trumbore with every triple product factored out of the per-pixel term.
    a = np.cross(e2, e1)
    b = np.cross(e2, tvec)
    c = np.cross(tvec, e1)
    tnum = np.einsum("ij,ij->i", e2, c)
    dirs = camera.pixel_directions()
    det = dirs @ a.T
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        bu = (dirs @ b.T) * inv
        bv = (dirs @ c.T) * inv
        t = tnum * inv
    hit = (np.abs(det) > 1e-14) & (bu >= 0) & (bv >= 0) & (bu + bv <= 1) & (t > NEAR)
    t = np.where(hit, t, np.inf)
    best = np.argmin(t, axis=1)
    rows = np.arange(h * w)
    best_t = t[rows, best]
    covered = np.isfinite(best_t)
    fsel = keep[best[covered]]
    u_sel = bu[rows[covered], best[covered]]
    v_sel = bv[rows[covered], best[covered]]
    fuv = scene.face_uvs[fsel]
    uv[covered] = (1 - u_sel - v_sel)[:, None] * fuv[:, 0] + u_sel[:, None] * fuv[:, 1] + v_sel[:, None] * fuv[:, 2]
    face_id[covered] = fsel
    depth[covered] = best_t[covered]
    return RasterBuffers(face_id.reshape(h, w), uv.reshape(h, w, 2), depth.reshape(h, w), atlas_shape)


def shade(buffers: RasterBuffers, texels: np.ndarray) -> np.ndarray:
    idx, w = buffers.footprint()
    flat = texels.reshape(-1, 3)
    img = np.einsum("hwk,hwkc->hwc", w, flat[idx])
    img[~buffers.covered] = BACKGROUND
    return img


def render_subimage(scene: Scene, camera: Camera):
    buffers = rasterize(scene, camera)
    return shade(buffers, scene.atlas.texels), buffers


def view_index(heading_index: int, elevation_row: int) -> int:
    return elevation_row * N_HEADINGS + heading_index


def panorama_cameras(viewpoint_position, resolution: int = DEFAULT_RESOLUTION) -> list[Camera]:
    eye = np.asarray(viewpoint_position, dtype=np.float64) + np.array([0.0, 0.0, EYE_HEIGHT])
    eye = tuple(float(v) for v in eye)
    return [
        Camera(eye, k * math.pi / 6, elev, PANORAMA_HFOV, resolution, resolution)
        for elev in ELEVATIONS
        for k in range(N_HEADINGS)
    ]


def rasterize_panorama(scene: Scene, viewpoint_position, resolution: int = DEFAULT_RESOLUTION):
    return [rasterize(scene, cam) for cam in panorama_cameras(viewpoint_position, resolution)]


def render_panorama(scene: Scene, viewpoint_position, resolution: int = DEFAULT_RESOLUTION):
    """Render the 36 views at a node; index = elevation_row * 12 + heading_index.

    Returns ``(images, buffers)`` with images of shape (36, H, W, 3).
    """
    buffers = rasterize_panorama(scene, viewpoint_position, resolution)
    images = np.stack([shade(b, scene.atlas.texels) for b in buffers])
    return images, buffers


def nearest_view(heading: float, elevation: float) -> int:
    k = int(round(heading / (math.pi / 6))) % N_HEADINGS
    row = int(np.argmin([abs(elevation - e) for e in ELEVATIONS]))
    return view_index(k, row)


def coverage_from_buffers(buffers, face_mask: np.ndarray) -> np.ndarray:
    out = np.zeros(len(buffers))
    for i, b in enumerate(buffers):
        fid = b.face_id
        hit = (fid >= 0) & face_mask[np.maximum(fid, 0)]
        out[i] = hit.mean()
    return out


def object_coverage(scene: Scene, viewpoint_position, object_id: int,
                    resolution: int = DEFAULT_RESOLUTION, buffers=None) -> np.ndarray:
    """Fraction of each of the 36 views whose front-most surface belongs to the object."""
    mask = scene.face_mask(object_id)
    if buffers is None:
        buffers = rasterize_panorama(scene, viewpoint_position, resolution)
    return coverage_from_buffers(buffers, mask)


def subimages_containing(scene: Scene, viewpoint_position, object_id: int,
                         resolution: int = DEFAULT_RESOLUTION, buffers=None) -> set[int]:
    cov = object_coverage(scene, viewpoint_position, object_id, resolution, buffers)
    return {int(i) for i in np.flatnonzero(cov > 0)}


def backprop_to_texture(buffers: RasterBuffers, pixel_grads: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Scatter per-pixel colour gradients onto atlas texels through bilinear weights.

    Only pixels whose front-most face is set in ``mask`` contribute. Returns an
    array shaped like the atlas texels.
    """
    ah, aw = buffers.atlas_shape
    g = np.asarray(pixel_grads, dtype=np.float64)
    if g.shape != buffers.face_id.shape + (3,):
        raise ValueError(f"pixel_grads shape {g.shape} does not match buffers {buffers.face_id.shape}")
    out = np.zeros((ah * aw, 3))
    fid = buffers.face_id
    sel = (fid >= 0) & np.asarray(mask, dtype=bool)[np.maximum(fid, 0)]
    if sel.any():
        idx, w = buffers.footprint()
        idx, w = idx[sel].ravel(), w[sel]
        contrib = w[..., None] * g[sel][:, None, :]  # (n, 4, 3)
        contrib = contrib.reshape(-1, 3)
        for c in range(3):
            out[:, c] = np.bincount(idx, weights=contrib[:, c], minlength=ah * aw)
    return out.reshape(ah, aw, 3)


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6, 8-bit, row-major."""
    img = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


class PanoramaCache:
    """Rasterized panoramas for every node of a world.

    Geometry is fixed, so buffers are computed once; shading against a new atlas
    only touches the views that show any face in ``faces``.
    """

    def __init__(self, scene: Scene, graph, resolution: int = DEFAULT_RESOLUTION):
        self.scene = scene
        self.resolution = resolution
        self.buffers = [rasterize_panorama(scene, graph.positions[n], resolution)
                        for n in range(graph.num_nodes)]
        self.images = np.stack([
            np.stack([shade(b, scene.atlas.texels) for b in bufs]) for bufs in self.buffers
        ])  # (N, 36, H, W, 3)

    def views_showing(self, node: int, face_mask: np.ndarray) -> list[int]:
        cov = coverage_from_buffers(self.buffers[node], face_mask)
        return [int(i) for i in np.flatnonzero(cov > 0)]

    def shade_views(self, node: int, views, texels: np.ndarray) -> np.ndarray:
        return np.stack([shade(self.buffers[node][v], texels) for v in views]) if len(views) else \
            np.zeros((0, self.resolution, self.resolution, 3))

    def panoramas_with(self, texels: np.ndarray, face_mask: np.ndarray) -> np.ndarray:
        """All panoramas re-shaded from ``texels`` wherever a masked face is visible."""
        images = self.images.copy()
        for node in range(len(self.buffers)):
            views = self.views_showing(node, face_mask)
            if views:
                images[node, views] = self.shade_views(node, views, texels)
        return images
