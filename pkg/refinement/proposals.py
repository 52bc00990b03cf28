"""
Pose proposals by perturbing ground truth, and the negative-depth fix-up
applied to upstream proposals before refinement.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Optional

import numpy as np

from .exceptions import DegeneratePoseError, InvalidArgumentError
from .geometry import Pose, so3_exp

logger = logging.getLogger(__name__)

CATEGORIES = ('rotation', 'lateral', 'depth')
# 180 degrees about the camera's principal axis
FLIP_Z = np.diag([-1.0, -1.0, 1.0])
# |log 1.05|
DEFAULT_DEPTH_LOG_SIGMA = 0.04879016416943205


@dataclass(frozen=True)
class ProposalSamplerConfig:
    p_rotation: float = 0.30
    p_lateral: float = 0.30
    p_depth: float = 0.40
    rotation_sigma_deg: float = 45.0
    lateral_sigma_fraction: float = 0.1
    depth_log_sigma: float = DEFAULT_DEPTH_LOG_SIGMA
    seed: int = 0

    def __post_init__(self):
        probs = self.probabilities
        if min(probs) < 0 or not math.isclose(sum(probs), 1.0, abs_tol=1e-9):
            raise InvalidArgumentError(f"Category probabilities must be nonnegative and sum to 1, got {probs}")
        for name in ('rotation_sigma_deg', 'lateral_sigma_fraction', 'depth_log_sigma'):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise InvalidArgumentError(f"{name} must be finite and nonnegative, got {value}")

    @property
    def probabilities(self):
        return (self.p_rotation, self.p_lateral, self.p_depth)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'p_rotation': self.p_rotation,
            'p_lateral': self.p_lateral,
            'p_depth': self.p_depth,
            'rotation_sigma_deg': self.rotation_sigma_deg,
            'lateral_sigma_fraction': self.lateral_sigma_fraction,
            'depth_log_sigma': self.depth_log_sigma,
            'seed': self.seed,
        }


@dataclass(frozen=True, eq=False)
class ProposalDraw:
    pose: Pose
    category: str
    # signed angle (degrees), lateral distance (meters) or depth factor
    magnitude: float


def _truncated_angle(rng: np.random.Generator, sigma: float) -> float:
    while True:
        angle = rng.normal(0.0, sigma)
        if abs(angle) <= 180.0:
            return float(angle)


def draw_proposal(gt: Pose, diameter: float, cfg: ProposalSamplerConfig,
                  rng: np.random.Generator) -> ProposalDraw:
    """One perturbation of ``gt`` from a category drawn with the configured probabilities."""
    if gt.depth <= 0:
        raise InvalidArgumentError(f"Ground-truth depth must be positive, got {gt.depth}")
    if not diameter > 0:
        raise InvalidArgumentError(f"Diameter must be positive, got {diameter}")

    category = CATEGORIES[int(rng.choice(3, p=cfg.probabilities))]
    if category == 'rotation':
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = _truncated_angle(rng, cfg.rotation_sigma_deg)
        if angle == 0.0:
            return ProposalDraw(gt, category, 0.0)
        rotation = so3_exp(axis * math.radians(angle)) @ gt.rotation
        return ProposalDraw(Pose(rotation, gt.translation), category, angle)

    if category == 'lateral':
        phi = rng.uniform(0.0, 2.0 * math.pi)
        distance = abs(rng.normal(0.0, cfg.lateral_sigma_fraction * diameter))
        if distance == 0.0:
            return ProposalDraw(gt, category, 0.0)
        offset = distance * np.array([math.cos(phi), math.sin(phi), 0.0])
        return ProposalDraw(Pose(gt.rotation, gt.translation + offset), category, float(distance))

    factor = math.exp(rng.normal(0.0, cfg.depth_log_sigma))
    if factor == 1.0:
        return ProposalDraw(gt, category, 1.0)
    return ProposalDraw(Pose(gt.rotation, gt.translation * factor), category, factor)


def sample_proposal(gt: Pose, diameter: float, cfg: ProposalSamplerConfig,
                    rng: np.random.Generator) -> Pose:
    return draw_proposal(gt, diameter, cfg, rng).pose


class ProposalSampler:
    """Seeded proposal source. Not thread-safe; use one per thread."""

    def __init__(self, config: ProposalSamplerConfig = ProposalSamplerConfig(), seed: Optional[int] = None):
        self.config = config
        self.rng = np.random.default_rng(config.seed if seed is None else seed)

    def draw(self, gt: Pose, diameter: float) -> ProposalDraw:
        return draw_proposal(gt, diameter, self.config, self.rng)

    def sample(self, gt: Pose, diameter: float) -> Pose:
        return self.draw(gt, diameter).pose


def correct_negative_depth(pose: Pose) -> Pose:
    """
    Move a proposal with negative depth in front of the camera: negate the
    translation and turn the object 180 degrees about the principal axis.
    The projected center pixel is unchanged.
    """
    if pose.depth > 0:
        return pose
    if pose.depth == 0:
        raise DegeneratePoseError("Pose has zero depth; its projection is undefined")
    logger.debug("Correcting negative proposal depth %.4f", pose.depth)
    return Pose(FLIP_Z @ pose.rotation, -pose.translation)
