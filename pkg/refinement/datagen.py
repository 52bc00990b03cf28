"""
Synthetic observed images with known ground truth.

Each frame renders one target object with randomized Phong shading over a
background image, optionally behind two occluders drawn from the other
objects. The border between object and background is blended with a
Gaussian blur, the object itself is blurred, and HSV noise can be added.
Frames are seeded from ``(seed, frame_index)`` so a worker pool produces
the same dataset as a single process.
"""

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
from scipy.spatial.transform import Rotation

from .camera import CameraIntrinsics
from .conf import config_hash
from .exceptions import InvalidArgumentError, VisibilityExhaustedError
from .geometry import Pose
from .images import load_image, save_image
from .meshes import TriangleMesh, load_mesh
from .rasterizer import ShadingParams, rasterize_scene
from .serializers import DatagenConfigSerializer, validated

logger = logging.getLogger(__name__)

# Real/synthetic sampling ratio of the training schedule this data feeds.
MIXING = {'real': 0.33, 'synthetic': 0.67}
IMAGE_SUFFIXES = ('.png', '.jpg', '.jpeg', '.ppm', '.bmp')
DATASET_FORMAT = 1


def desk_intrinsics() -> CameraIntrinsics:
    """A 640x480 Kinect-like camera, the default for generated datasets."""
    return CameraIntrinsics(fx=572.4114, fy=573.57043, cx=325.2611, cy=242.04899, width=640, height=480)


@dataclass(frozen=True)
class DatagenConfig:
    light_position_min: Tuple[float, float, float] = (-1.0, -1.0, -0.5)
    light_position_max: Tuple[float, float, float] = (1.0, 1.0, 0.5)
    ambient_range: Tuple[float, float] = (0.2, 0.5)
    diffuse_range: Tuple[float, float] = (0.5, 1.0)
    specular_range: Tuple[float, float] = (0.0, 0.5)
    shininess_range: Tuple[float, float] = (5.0, 80.0)
    whiteness_range: Tuple[float, float] = (0.0, 1.0)
    occluder_probability: float = 0.5
    occluder_count: int = 2
    min_visible_pixels: int = 200
    max_attempts: int = 100
    occluded_to_background_probability: float = 0.5
    occluder_depth_fraction: Tuple[float, float] = (0.6, 0.9)
    # lateral jitter of occluders, in target diameters
    occluder_lateral_fraction: float = 0.5
    border_blur_sigma_range: Tuple[float, float] = (1.5, 1.5)
    border_band_px: int = 3
    object_blur_sigma_range: Tuple[float, float] = (0.0, 1.0)
    hsv_noise: bool = False
    hsv_noise_amplitude: Tuple[float, float, float] = (0.02, 0.1, 0.1)
    depth_range: Tuple[float, float] = (0.6, 1.2)
    # object centers land in the central part of the image
    center_region_fraction: float = 0.5
    background_dir: Optional[str] = None
    n_backgrounds: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ('occluder_probability', 'occluded_to_background_probability', 'center_region_fraction'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidArgumentError(f"{name} must be in [0, 1], got {value}")
        if self.min_visible_pixels < 1:
            raise InvalidArgumentError(f"min_visible_pixels must be at least 1, got {self.min_visible_pixels}")
        if self.max_attempts < 1 or self.occluder_count < 0 or self.border_band_px < 1:
            raise InvalidArgumentError("max_attempts and border_band_px must be positive, occluder_count nonnegative")
        for f in fields(self):
            if f.name.endswith('_range') or f.name in ('occluder_depth_fraction',):
                lo, hi = getattr(self, f.name)
                if lo > hi:
                    raise InvalidArgumentError(f"{f.name} has min > max: {lo} > {hi}")
        if self.depth_range[0] <= 0:
            raise InvalidArgumentError("depth_range must be positive")

    def to_dict(self) -> Dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'DatagenConfig':
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidArgumentError(f"Unknown datagen option(s): {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


@dataclass(eq=False)
class GroundTruthRecord:
    frame_id: int
    object_id: str
    pose: Pose
    visible_pixels: int
    occluders: List[Tuple[str, Pose]] = field(default_factory=list)
    occluded_to_background: bool = False
    shading: Optional[ShadingParams] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'frame_id': self.frame_id,
            'object_id': self.object_id,
            'pose': self.pose.to_dict(),
            'visible_pixels': self.visible_pixels,
            'occluders': [{'object_id': name, 'pose': pose.to_dict()} for name, pose in self.occluders],
            'occluded_to_background': self.occluded_to_background,
            'shading': self.shading.to_dict() if self.shading is not None else None,
        }


def _uniform(rng: np.random.Generator, bounds) -> float:
    lo, hi = bounds
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def sample_shading(cfg: DatagenConfig, rng: np.random.Generator) -> ShadingParams:
    light = tuple(_uniform(rng, (lo, hi)) for lo, hi in zip(cfg.light_position_min, cfg.light_position_max))
    return ShadingParams(
        mode='phong',
        light_position=light,
        ambient=_uniform(rng, cfg.ambient_range),
        diffuse=_uniform(rng, cfg.diffuse_range),
        specular=_uniform(rng, cfg.specular_range),
        shininess=_uniform(rng, cfg.shininess_range),
        whiteness=_uniform(rng, cfg.whiteness_range),
    )


def sample_target_pose(intrinsics: CameraIntrinsics, cfg: DatagenConfig, rng: np.random.Generator) -> Pose:
    """Uniform rotation; center at a random depth behind a pixel of the central image region."""
    rotation = Rotation.random(random_state=rng).as_matrix()
    depth = _uniform(rng, cfg.depth_range)
    half = cfg.center_region_fraction / 2.0
    u = intrinsics.width * (0.5 + rng.uniform(-half, half))
    v = intrinsics.height * (0.5 + rng.uniform(-half, half))
    return Pose(rotation, intrinsics.backproject((u, v), depth))


def sample_occluder_pose(target: Pose, target_diameter: float, cfg: DatagenConfig,
                         rng: np.random.Generator) -> Pose:
    """An occluder between the camera and the target, along the ray to the target center."""
    fraction = _uniform(rng, cfg.occluder_depth_fraction)
    jitter = cfg.occluder_lateral_fraction * target_diameter * fraction
    offset = np.array([rng.uniform(-jitter, jitter), rng.uniform(-jitter, jitter), 0.0])
    rotation = Rotation.random(random_state=rng).as_matrix()
    return Pose(rotation, target.translation * fraction + offset)


def procedural_backgrounds(n: int = 8, size: Tuple[int, int] = (480, 640), seed: int = 0) -> List[np.ndarray]:
    """
    ``n`` textured RGB backgrounds of shape ``size + (3,)`` in [0, 1]:
    gradients, stripes, checkers and smoothed noise, in turn.
    """
    rng = np.random.default_rng(seed)
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    images = []
    for i in range(n):
        c0, c1 = rng.uniform(0.0, 1.0, 3), rng.uniform(0.0, 1.0, 3)
        kind = i % 4
        if kind == 0:
            angle = rng.uniform(0, 2 * math.pi)
            ramp = (xs * math.cos(angle) + ys * math.sin(angle))
            weight = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
        elif kind == 1:
            period = rng.uniform(8, 64)
            angle = rng.uniform(0, math.pi)
            weight = 0.5 + 0.5 * np.sin(2 * math.pi * (xs * math.cos(angle) + ys * math.sin(angle)) / period)
        elif kind == 2:
            cell = int(rng.integers(8, 48))
            weight = ((xs // cell + ys // cell) % 2).astype(float)
        else:
            noise = rng.uniform(0.0, 1.0, (h, w)).astype(np.float32)
            noise = cv2.GaussianBlur(noise, (0, 0), sigmaX=rng.uniform(2.0, 8.0))
            weight = (noise - noise.min()) / max(float(np.ptp(noise)), 1e-12)
        image = c0 * (1.0 - weight[..., None]) + c1 * weight[..., None]
        images.append(np.clip(image, 0.0, 1.0))
    return images


def load_backgrounds(directory, size: Tuple[int, int]) -> List[np.ndarray]:
    paths = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    h, w = size
    return [cv2.resize(load_image(p), (w, h), interpolation=cv2.INTER_LINEAR) for p in paths]


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Isotropic Gaussian blur with reflected borders."""
    return cv2.GaussianBlur(image.astype(np.float32), (0, 0), sigmaX=sigma).astype(np.float64)


def _border_band(mask: np.ndarray, band_px: int) -> np.ndarray:
    kernel = np.ones((band_px, band_px), np.uint8)
    m = mask.astype(np.uint8)
    return cv2.dilate(m, kernel).astype(bool) & ~cv2.erode(m, kernel).astype(bool)


def apply_hsv_noise(image: np.ndarray, amplitude: Sequence[float], rng: np.random.Generator) -> np.ndarray:
    """Per-image hue shift (fraction of a turn) and saturation/value offsets, clamped to [0, 1]."""
    hsv = cv2.cvtColor(np.clip(image, 0.0, 1.0).astype(np.float32), cv2.COLOR_RGB2HSV)
    dh, ds, dv = (rng.uniform(-a, a) for a in amplitude)
    hsv[..., 0] = np.mod(hsv[..., 0] + 360.0 * dh, 360.0)
    hsv[..., 1] = np.clip(hsv[..., 1] + ds, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] + dv, 0.0, 1.0)
    rgb = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB).astype(np.float64)
    return np.clip(rgb, 0.0, 1.0)


def generate_frame(target: Tuple[TriangleMesh, Pose], occluder_pool: Sequence[TriangleMesh],
                   backgrounds: Sequence[np.ndarray], intrinsics: CameraIntrinsics, cfg: DatagenConfig,
                   rng: np.random.Generator, frame_id: int = 0) -> Tuple[np.ndarray, GroundTruthRecord]:
    """Render one observed image of ``target`` and return it with its ground-truth record."""
    if not backgrounds:
        raise InvalidArgumentError("Background pool is empty")
    mesh, gt = target
    shading = sample_shading(cfg, rng)
    background = backgrounds[int(rng.integers(len(backgrounds)))]
    if background.shape[:2] != (intrinsics.height, intrinsics.width):
        background = cv2.resize(background, (intrinsics.width, intrinsics.height), interpolation=cv2.INTER_LINEAR)

    occluded = bool(occluder_pool) and cfg.occluder_count > 0 and rng.random() < cfg.occluder_probability
    alone = rasterize_scene([(mesh, gt)], intrinsics, shading)
    if alone.visible_pixels(0) < cfg.min_visible_pixels:
        raise VisibilityExhaustedError(
            f"Target {mesh.name!r} covers {alone.visible_pixels(0)} pixels unoccluded, "
            f"fewer than {cfg.min_visible_pixels}"
        )

    occluders: List[Tuple[TriangleMesh, Pose]] = []
    buffers = alone
    if occluded:
        for attempt in range(cfg.max_attempts):
            occluders = [
                (occluder_pool[int(rng.integers(len(occluder_pool)))],
                 sample_occluder_pose(gt, mesh.diameter, cfg, rng))
                for _ in range(cfg.occluder_count)
            ]
            buffers = rasterize_scene([(mesh, gt)] + occluders, intrinsics, shading)
            if buffers.visible_pixels(0) >= cfg.min_visible_pixels:
                break
            logger.debug("frame %d: %d visible pixels on attempt %d, resampling occluders",
                         frame_id, buffers.visible_pixels(0), attempt)
        else:
            raise VisibilityExhaustedError(
                f"frame {frame_id}: fewer than {cfg.min_visible_pixels} visible target pixels "
                f"after {cfg.max_attempts} occluder draws"
            )

    foreground = buffers.mask
    to_background = occluded and rng.random() < cfg.occluded_to_background_probability
    if to_background:
        # occluder pixels in front of the target become see-through
        foreground = foreground & ~(alone.mask & (buffers.object_index != 0))

    image = np.where(foreground[..., None], buffers.color, background)
    border_sigma = _uniform(rng, cfg.border_blur_sigma_range)
    if border_sigma > 0:
        band = _border_band(foreground, cfg.border_band_px)
        image = np.where(band[..., None], gaussian_blur(image, border_sigma), image)

    object_sigma = _uniform(rng, cfg.object_blur_sigma_range)
    if object_sigma > 0:
        target_mask = buffers.object_index == 0
        image = np.where(target_mask[..., None], gaussian_blur(image, object_sigma), image)

    if cfg.hsv_noise:
        image = apply_hsv_noise(image, cfg.hsv_noise_amplitude, rng)

    record = GroundTruthRecord(
        frame_id=frame_id,
        object_id=mesh.name,
        pose=gt,
        visible_pixels=buffers.visible_pixels(0),
        occluders=[(m.name, p) for m, p in occluders],
        occluded_to_background=to_background,
        shading=shading,
    )
    return np.clip(image, 0.0, 1.0), record


def frame_rng(seed: int, frame_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(frame_index)]))


def image_name(index: int) -> str:
    return f"{index:06d}.png"


@dataclass(frozen=True, eq=False)
class FrameContext:
    """Everything a frame job needs besides its index; shipped once per worker process."""

    meshes: Sequence[TriangleMesh]
    backgrounds: Sequence[np.ndarray]
    intrinsics: CameraIntrinsics
    cfg: DatagenConfig
    images_dir: Path


_worker_context: Optional[FrameContext] = None


def _init_worker(context: FrameContext) -> None:
    global _worker_context
    _worker_context = context


def render_frame(index: int, context: FrameContext) -> GroundTruthRecord:
    """Generate frame ``index``, write its PNG and return its ground-truth record."""
    cfg = context.cfg
    rng = frame_rng(cfg.seed, index)
    target_index = int(rng.integers(len(context.meshes)))
    mesh = context.meshes[target_index]
    pool = [m for i, m in enumerate(context.meshes) if i != target_index]
    last_error = None
    # a target pose too small to reach the visibility floor is redrawn
    for _ in range(cfg.max_attempts):
        gt = sample_target_pose(context.intrinsics, cfg, rng)
        try:
            image, record = generate_frame((mesh, gt), pool, context.backgrounds, context.intrinsics, cfg, rng,
                                           frame_id=index)
        except VisibilityExhaustedError as exc:
            last_error = exc
            continue
        save_image(context.images_dir / image_name(index), image)
        return record
    raise last_error


def _pooled_frame(index: int) -> GroundTruthRecord:
    return render_frame(index, _worker_context)


def generate_dataset(mesh_paths: Sequence, n_frames: int, cfg: DatagenConfig, root,
                     intrinsics: Optional[CameraIntrinsics] = None, workers: int = 1) -> Path:
    """
    Write ``n_frames`` frames under ``root``::

        images/NNNNNN.png  gt.json  camera.json  manifest.json

    Images are written by whichever process renders them, so memory stays
    flat in the frame count.
    """
    if n_frames < 1:
        raise InvalidArgumentError(f"n_frames must be at least 1, got {n_frames}")
    if not mesh_paths:
        raise InvalidArgumentError("At least one mesh is needed")
    intrinsics = intrinsics or desk_intrinsics()
    root = Path(root)
    meshes = [load_mesh(p) for p in mesh_paths]
    size = (intrinsics.height, intrinsics.width)
    if cfg.background_dir:
        backgrounds = load_backgrounds(cfg.background_dir, size)
    else:
        backgrounds = procedural_backgrounds(cfg.n_backgrounds, size, cfg.seed)

    context = FrameContext(meshes, backgrounds, intrinsics, cfg, root / 'images')
    context.images_dir.mkdir(parents=True, exist_ok=True)
    if workers > 1:
        chunksize = max(1, n_frames // (4 * workers))
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(context,)) as pool:
            records = list(pool.map(_pooled_frame, range(n_frames), chunksize=chunksize))
    else:
        records = [render_frame(index, context) for index in range(n_frames)]

    gt_entries = []
    for index, record in enumerate(records):
        entry = record.to_dict()
        entry['image'] = f"images/{image_name(index)}"
        gt_entries.append(entry)

    manifest = {
        'format': DATASET_FORMAT,
        'config': cfg.to_dict(),
        'seed': cfg.seed,
        'n_frames': n_frames,
        'meshes': [str(Path(p).resolve()) for p in mesh_paths],
        'intrinsics': intrinsics.to_dict(),
        'mixing': dict(MIXING),
    }
    manifest['config_hash'] = config_hash(manifest)
    _write_json(root / 'gt.json', {'config_hash': manifest['config_hash'], 'frames': gt_entries})
    _write_json(root / 'camera.json', intrinsics.to_dict())
    _write_json(root / 'manifest.json', manifest)
    occluded = sum(1 for e in gt_entries if e['occluders'])
    logger.info("Generated %d frames in %s (%d with occluders)", n_frames, root, occluded)
    return root


def regenerate_from_manifest(manifest_path, root, workers: int = 1) -> Path:
    """Rebuild a dataset from its manifest; the images come out identical."""
    manifest = json.loads(Path(manifest_path).read_text())
    config = validated(DatagenConfigSerializer, manifest['config'], f"manifest {manifest_path}")
    cfg = DatagenConfig.from_dict(config)
    intrinsics = CameraIntrinsics.from_dict(manifest['intrinsics'])
    return generate_dataset(manifest['meshes'], manifest['n_frames'], cfg, root, intrinsics, workers)


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2))
