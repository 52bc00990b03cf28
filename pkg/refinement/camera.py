"""
Pinhole projection and the zoom-in operator.

Pixel convention: integer coordinates address pixel centers. A zoomed patch
maps base-image coordinate ``u`` to patch coordinate
``(u - corner) * out_resolution / patch_side``; the renderer, the patch
extractor and the reprojection error all use this one mapping.
"""

from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy import ndimage

from .exceptions import BehindCameraError, InvalidArgumentError
from .geometry import Pose

PATCH_MARGIN = 1.2


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgumentError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise InvalidArgumentError(f"Image size must be at least 1x1, got {self.width}x{self.height}")
        if not all(np.isfinite([self.fx, self.fy, self.cx, self.cy])):
            raise InvalidArgumentError("Intrinsics must be finite")

    @property
    def K(self) -> np.ndarray:
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    @property
    def mean_focal(self) -> float:
        return 0.5 * (self.fx + self.fy)

    def project_points(self, points: np.ndarray) -> np.ndarray:
        """Project (N, 3) camera-frame points to (N, 2) pixels; no clamping."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        z = pts[:, 2]
        if np.any(z <= 0):
            raise BehindCameraError(f"{int(np.sum(z <= 0))} point(s) at or behind the camera plane")
        u = self.fx * pts[:, 0] / z + self.cx
        v = self.fy * pts[:, 1] / z + self.cy
        return np.stack([u, v], axis=1)

    def backproject(self, pixel, depth: float) -> np.ndarray:
        """Camera-frame point at ``depth`` (z) that projects to ``pixel``."""
        u, v = pixel
        return np.array([
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        ])

    def to_dict(self) -> Dict[str, Any]:
        return {
            'fx': self.fx, 'fy': self.fy,
            'cx': self.cx, 'cy': self.cy,
            'width': self.width, 'height': self.height,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'CameraIntrinsics':
        return cls(
            fx=float(data['fx']), fy=float(data['fy']),
            cx=float(data['cx']), cy=float(data['cy']),
            width=int(data['width']), height=int(data['height']),
        )


def project(intr: CameraIntrinsics, point) -> np.ndarray:
    """Pinhole projection of one camera-frame point (meters) to pixels."""
    return intr.project_points(np.asarray(point, dtype=float).reshape(1, 3))[0]


@dataclass(frozen=True)
class ZoomedCamera:
    """Square, object-centered window of the base image resampled to out_resolution."""

    base: CameraIntrinsics
    patch_center: Tuple[float, float]
    patch_side: float
    out_resolution: int = 512

    def __post_init__(self):
        if not (np.isfinite(self.patch_side) and self.patch_side > 0):
            raise InvalidArgumentError(f"patch_side must be positive, got {self.patch_side}")
        if self.out_resolution < 2:
            raise InvalidArgumentError(f"out_resolution must be at least 2, got {self.out_resolution}")
        object.__setattr__(self, 'patch_center', tuple(float(c) for c in self.patch_center))

    @property
    def corner(self) -> np.ndarray:
        return np.asarray(self.patch_center) - 0.5 * self.patch_side

    @property
    def scale(self) -> float:
        """Patch pixels per base-image pixel."""
        return self.out_resolution / self.patch_side

    def base_to_patch(self, pixels: np.ndarray) -> np.ndarray:
        return (np.asarray(pixels, dtype=float) - self.corner) * self.scale

    def patch_to_base(self, patch_pixels: np.ndarray) -> np.ndarray:
        return np.asarray(patch_pixels, dtype=float) / self.scale + self.corner

    def effective_intrinsics(self, resolution: Optional[int] = None) -> CameraIntrinsics:
        """Intrinsics of this patch sampled at ``resolution`` (default out_resolution)."""
        res = self.out_resolution if resolution is None else int(resolution)
        s = res / self.patch_side
        cx0, cy0 = self.corner
        return CameraIntrinsics(
            fx=self.base.fx * s,
            fy=self.base.fy * s,
            cx=(self.base.cx - cx0) * s,
            cy=(self.base.cy - cy0) * s,
            width=res,
            height=res,
        )


@dataclass(frozen=True, eq=False)
class ImagePatch:
    pixels: np.ndarray
    camera: ZoomedCamera

    def __post_init__(self):
        res = self.camera.out_resolution
        if self.pixels.shape != (res, res, 3):
            raise InvalidArgumentError(f"Patch must be {res}x{res}x3, got {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise InvalidArgumentError("Patch pixels must be finite")


def make_zoom(intr: CameraIntrinsics, pose: Pose, diameter: float, out_resolution: int = 512) -> ZoomedCamera:
    """
    Zoom window for ``pose``: centered at the projected object center, with a
    side of PATCH_MARGIN times the projected diameter (mean focal * D / z).
    """
    if pose.depth <= 0:
        raise BehindCameraError(f"Object center depth must be positive, got {pose.depth}")
    if not diameter > 0:
        raise InvalidArgumentError(f"Diameter must be positive, got {diameter}")
    center = project(intr, pose.translation)
    side = PATCH_MARGIN * intr.mean_focal * diameter / pose.depth
    return ZoomedCamera(base=intr, patch_center=(center[0], center[1]), patch_side=side, out_resolution=out_resolution)


def patch_sample_grid(zoom: ZoomedCamera) -> Tuple[np.ndarray, np.ndarray]:
    """Base-image (row, col) coordinates sampled by each patch pixel."""
    steps = np.arange(zoom.out_resolution) / zoom.scale
    cx0, cy0 = zoom.corner
    rows, cols = np.meshgrid(cy0 + steps, cx0 + steps, indexing='ij')
    return rows, cols


def extract_patch(image: np.ndarray, zoom: ZoomedCamera) -> ImagePatch:
    """Bilinearly resample the zoom window of ``image``; outside reads as black."""
    image = np.asarray(image, dtype=float)
    if image.shape[:2] != (zoom.base.height, zoom.base.width) or image.ndim != 3:
        raise InvalidArgumentError(
            f"Image shape {image.shape} does not match intrinsics "
            f"{zoom.base.height}x{zoom.base.width}x3"
        )
    rows, cols = patch_sample_grid(zoom)
    coords = np.stack([rows, cols])
    channels = [
        ndimage.map_coordinates(image[..., c], coords, order=1, mode='grid-constant', cval=0.0)
        for c in range(image.shape[2])
    ]
    pixels = np.clip(np.stack(channels, axis=-1), 0.0, 1.0)
    return ImagePatch(pixels=pixels, camera=zoom)


def project_to_patch(zoom: ZoomedCamera, pose: Pose, point_object) -> np.ndarray:
    """
    Project object-frame point(s) under ``pose`` into patch pixels.

    Accepts a single 3-vector (returns a 2-vector) or an (N, 3) array
    (returns (N, 2)).
    """
    pts = np.asarray(point_object, dtype=float)
    single = pts.ndim == 1
    pixels = zoom.base.project_points(pose.transform(pts.reshape(-1, 3)))
    patch = zoom.base_to_patch(pixels)
    return patch[0] if single else patch
