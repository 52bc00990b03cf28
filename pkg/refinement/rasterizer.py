"""
Deterministic CPU rasterizer.

Triangles are scan-converted per bounding box with edge functions, a
top-left fill rule and a z-buffer; normals, albedo and camera-space position
are interpolated perspective-correctly and shaded afterwards (Lambertian for
refinement renders, Phong for synthetic observed images). Patch renders are
made at ``render_resolution`` and bilinearly upsampled to the patch
resolution.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .camera import CameraIntrinsics, ImagePatch, ZoomedCamera
from .exceptions import InvalidArgumentError
from .geometry import Pose
from .meshes import TriangleMesh

logger = logging.getLogger(__name__)

NEAR_PLANE = 1e-6
BACKGROUND_INDEX = -1
MODES = ('lambertian', 'phong')


@dataclass(frozen=True)
class ShadingParams:
    mode: str = 'lambertian'
    light_position: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    ambient: float = 0.3
    diffuse: float = 0.7
    specular: float = 0.0
    shininess: float = 10.0
    whiteness: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidArgumentError(f"Shading mode must be one of {MODES}, got {self.mode!r}")
        for name in ('ambient', 'diffuse', 'specular'):
            value = getattr(self, name)
            if not (math.isfinite(value) and 0.0 <= value <= 2.0):
                raise InvalidArgumentError(f"{name} must be in [0, 2], got {value}")
        if not self.shininess >= 1.0:
            raise InvalidArgumentError(f"shininess must be >= 1, got {self.shininess}")
        if not 0.0 <= self.whiteness <= 1.0:
            raise InvalidArgumentError(f"whiteness must be in [0, 1], got {self.whiteness}")
        object.__setattr__(self, 'light_position', tuple(float(x) for x in self.light_position))

    def to_dict(self):
        return {
            'mode': self.mode,
            'light_position': list(self.light_position),
            'ambient': self.ambient,
            'diffuse': self.diffuse,
            'specular': self.specular,
            'shininess': self.shininess,
            'whiteness': self.whiteness,
        }


@dataclass(frozen=True, eq=False)
class RasterBuffers:
    """Full-resolution output of rasterize_scene."""

    color: np.ndarray
    depth: np.ndarray
    object_index: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.object_index != BACKGROUND_INDEX

    def visible_pixels(self, index: int) -> int:
        return int(np.count_nonzero(self.object_index == index))


@dataclass(frozen=True, eq=False)
class RenderOutput:
    color: ImagePatch
    mask: np.ndarray
    depth: np.ndarray


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _is_top_left(ax, ay, bx, by) -> bool:
    # Shared edges are traversed in opposite directions by their two
    # triangles, so exactly one of them owns pixels lying on the edge.
    dy = by - ay
    return dy < 0 or (dy == 0 and bx - ax > 0)


class _Framebuffer:
    def __init__(self, width: int, height: int):
        self.depth = np.full((height, width), np.inf)
        self.index = np.full((height, width), BACKGROUND_INDEX, dtype=np.int64)
        self.normal = np.zeros((height, width, 3))
        self.albedo = np.zeros((height, width, 3))
        self.position = np.zeros((height, width, 3))
        self.width = width
        self.height = height

    def draw_triangle(self, screen, cam, normals, albedo, object_index):
        (x0, y0), (x1, y1), (x2, y2) = screen
        area = _edge(x0, y0, x1, y1, x2, y2)
        if area == 0.0:
            return
        if area < 0:
            # make orientation positive; attributes follow their vertices
            screen = screen[[0, 2, 1]]
            cam, normals, albedo = cam[[0, 2, 1]], normals[[0, 2, 1]], albedo[[0, 2, 1]]
            (x0, y0), (x1, y1), (x2, y2) = screen
            area = -area

        xmin = max(0, math.ceil(min(x0, x1, x2)))
        xmax = min(self.width - 1, math.floor(max(x0, x1, x2)))
        ymin = max(0, math.ceil(min(y0, y1, y2)))
        ymax = min(self.height - 1, math.floor(max(y0, y1, y2)))
        if xmin > xmax or ymin > ymax:
            return

        ys, xs = np.mgrid[ymin:ymax + 1, xmin:xmax + 1].astype(float)
        w0 = _edge(x1, y1, x2, y2, xs, ys)
        w1 = _edge(x2, y2, x0, y0, xs, ys)
        w2 = _edge(x0, y0, x1, y1, xs, ys)
        inside = (
            ((w0 > 0) | ((w0 == 0) & _is_top_left(x1, y1, x2, y2)))
            & ((w1 > 0) | ((w1 == 0) & _is_top_left(x2, y2, x0, y0)))
            & ((w2 > 0) | ((w2 == 0) & _is_top_left(x0, y0, x1, y1)))
        )
        if not inside.any():
            return

        b0, b1, b2 = w0[inside] / area, w1[inside] / area, w2[inside] / area
        vz = cam[:, 2]
        p0, p1, p2 = b0 / vz[0], b1 / vz[1], b2 / vz[2]
        inv_depth = p0 + p1 + p2
        z = 1.0 / inv_depth

        rows = ys[inside].astype(np.int64)
        cols = xs[inside].astype(np.int64)
        closer = z < self.depth[rows, cols]
        if not closer.any():
            return
        rows, cols, z = rows[closer], cols[closer], z[closer]
        weights = np.stack([p0[closer], p1[closer], p2[closer]], axis=1) * z[:, None]

        self.depth[rows, cols] = z
        self.index[rows, cols] = object_index
        self.normal[rows, cols] = weights @ normals
        self.albedo[rows, cols] = weights @ albedo
        self.position[rows, cols] = weights @ cam

    def shade(self, shading: ShadingParams) -> np.ndarray:
        color = np.zeros((self.height, self.width, 3))
        fg = self.index != BACKGROUND_INDEX
        if not fg.any():
            return color
        n = self.normal[fg]
        n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
        pos = self.position[fg]
        albedo = self.albedo[fg]
        to_light = np.asarray(shading.light_position) - pos
        to_light /= np.maximum(np.linalg.norm(to_light, axis=1, keepdims=True), 1e-12)
        n_dot_l = np.einsum('ij,ij->i', n, to_light)
        lit = np.maximum(n_dot_l, 0.0)
        shaded = albedo * (shading.ambient + shading.diffuse * lit)[:, None]

        if shading.mode == 'phong' and shading.specular > 0:
            to_eye = -pos / np.maximum(np.linalg.norm(pos, axis=1, keepdims=True), 1e-12)
            reflected = 2.0 * n_dot_l[:, None] * n - to_light
            r_dot_v = np.maximum(np.einsum('ij,ij->i', reflected, to_eye), 0.0)
            highlight = np.where(n_dot_l > 0, r_dot_v ** shading.shininess, 0.0)
            spec_color = shading.whiteness + (1.0 - shading.whiteness) * albedo
            shaded = shaded + shading.specular * highlight[:, None] * spec_color

        color[fg] = np.clip(shaded, 0.0, 1.0)
        return color


def rasterize_scene(scene: Sequence[Tuple[TriangleMesh, Pose]], intrinsics: CameraIntrinsics,
                    shading: ShadingParams) -> RasterBuffers:
    """
    Z-buffered render of every (mesh, pose) in ``scene`` at the full
    resolution of ``intrinsics``. Triangles with any vertex closer than
    NEAR_PLANE are discarded; ties in depth keep the earlier object.
    """
    fb = _Framebuffer(intrinsics.width, intrinsics.height)
    for object_index, (mesh, pose) in enumerate(scene):
        cam = pose.transform(mesh.vertices)
        normals = mesh.normals @ pose.rotation.T
        albedo = mesh.albedo
        z = cam[:, 2]
        front = z > NEAR_PLANE
        safe_z = np.where(front, z, 1.0)
        screen = np.stack([
            intrinsics.fx * cam[:, 0] / safe_z + intrinsics.cx,
            intrinsics.fy * cam[:, 1] / safe_z + intrinsics.cy,
        ], axis=1)
        keep = np.all(front[mesh.triangles], axis=1)
        if not keep.all():
            logger.debug("Discarding %d triangle(s) crossing the near plane", int((~keep).sum()))
        for tri in mesh.triangles[keep]:
            fb.draw_triangle(screen[tri], cam[tri], normals[tri], albedo[tri], object_index)
    return RasterBuffers(color=fb.shade(shading), depth=fb.depth, object_index=fb.index)


def _upsample(buffers: RasterBuffers, zoom: ZoomedCamera, render_resolution: int):
    out = zoom.out_resolution
    if render_resolution == out:
        mask = buffers.mask
        return (
            RenderOutput(color=ImagePatch(buffers.color, zoom), mask=mask, depth=buffers.depth.copy()),
            buffers.object_index.copy(),
        )

    steps = np.arange(out) * (render_resolution / out)
    rows, cols = np.meshgrid(steps, steps, indexing='ij')
    coords = np.stack([rows, cols])

    def sample(image, order):
        return ndimage.map_coordinates(image, coords, order=order, mode='nearest')

    mask = sample(buffers.mask.astype(float), 1) >= 0.5
    color = np.stack([sample(buffers.color[..., c], 1) for c in range(3)], axis=-1)
    color = np.where(mask[..., None], np.clip(color, 0.0, 1.0), 0.0)

    big = 1e30
    depth = np.where(np.isfinite(buffers.depth), buffers.depth, big)
    nearest = sample(depth, 0)
    filled = sample(ndimage.minimum_filter(depth, size=3, mode='nearest'), 0)
    depth_up = np.where(nearest < big, nearest, filled)
    mask &= depth_up < big
    depth_up = np.where(mask, depth_up, np.inf)
    color = np.where(mask[..., None], color, 0.0)

    index = np.rint(sample(buffers.object_index.astype(float), 0)).astype(np.int64)
    return RenderOutput(color=ImagePatch(color, zoom), mask=mask, depth=depth_up), index


def _check_resolution(zoom: ZoomedCamera, render_resolution: int):
    if not 1 <= render_resolution <= zoom.out_resolution:
        raise InvalidArgumentError(
            f"render_resolution must be in [1, {zoom.out_resolution}], got {render_resolution}"
        )


def render(mesh: TriangleMesh, pose: Pose, zoom: ZoomedCamera, shading: ShadingParams,
           render_resolution: int = 256) -> RenderOutput:
    """Render ``mesh`` at ``pose`` into the zoom's patch; background is black."""
    _check_resolution(zoom, render_resolution)
    buffers = rasterize_scene([(mesh, pose)], zoom.effective_intrinsics(render_resolution), shading)
    output, _ = _upsample(buffers, zoom, render_resolution)
    return output


def render_with_occluders(scene: List[Tuple[TriangleMesh, Pose]], target_index: int, zoom: ZoomedCamera,
                          shading: ShadingParams, render_resolution: int = 256) -> Tuple[RenderOutput, int]:
    """Joint render of ``scene``; also counts patch pixels where the target wins the depth test."""
    if not 0 <= target_index < len(scene):
        raise InvalidArgumentError(f"target_index {target_index} not in scene of {len(scene)}")
    _check_resolution(zoom, render_resolution)
    buffers = rasterize_scene(scene, zoom.effective_intrinsics(render_resolution), shading)
    output, index = _upsample(buffers, zoom, render_resolution)
    visible = int(np.count_nonzero(output.mask & (index == target_index)))
    return output, visible
