"""
The compound objective J(theta) = f(Z_theta I_obs, P_rend(theta)) and its
central-difference gradient.
"""

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .camera import CameraIntrinsics, extract_patch, make_zoom
from .critics import Critic, CriticRequest, SceneContext
from .exceptions import InvalidArgumentError
from .geometry import Pose, PoseDelta, ReferenceFrame, apply_delta
from .meshes import TriangleMesh
from .rasterizer import ShadingParams, render

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FiniteDifferenceSteps:
    rotation: float = 0.01
    lateral: float = 1.0
    depth: float = 0.005

    def __post_init__(self):
        if min(self.rotation, self.lateral, self.depth) <= 0:
            raise InvalidArgumentError(f"Finite-difference steps must be positive, got {self}")

    def as_vector(self) -> np.ndarray:
        r, l, d = self.rotation, self.lateral, self.depth
        return np.array([r, r, r, l, l, d])

    def scaled(self, factor: float) -> 'FiniteDifferenceSteps':
        return FiniteDifferenceSteps(self.rotation * factor, self.lateral * factor, self.depth * factor)


class Objective:
    """
    J over the local parameters of one refinement run.

    The reference frame (and with it the coordinate system of theta_l) is
    fixed by ``anchor``; the zoom window is recomputed for every probed pose.
    ``eval_count`` grows by exactly one per critic call.
    """

    def __init__(self, observed_image: np.ndarray, mesh: TriangleMesh, intrinsics: CameraIntrinsics,
                 critic: Critic, shading: ShadingParams = ShadingParams(),
                 context: Optional[SceneContext] = None, frame: Optional[ReferenceFrame] = None,
                 out_resolution: int = 512, render_resolution: int = 256,
                 steps: FiniteDifferenceSteps = FiniteDifferenceSteps(), probe_workers: int = 1):
        self.observed_image = observed_image
        self.mesh = mesh
        self.intrinsics = intrinsics
        self.critic = critic
        self.shading = shading
        self.context = context
        self.frame = frame
        self.out_resolution = out_resolution
        self.render_resolution = render_resolution
        self.steps = steps
        self.probe_workers = max(1, int(probe_workers))
        self.eval_count = 0
        self._count_lock = threading.Lock()

    def anchor(self, proposal: Pose) -> ReferenceFrame:
        self.frame = ReferenceFrame.at(proposal, self.intrinsics, self.mesh.diameter, self.out_resolution)
        return self.frame

    def pose_at(self, delta: PoseDelta) -> Pose:
        if self.frame is None:
            raise InvalidArgumentError("Objective has no reference frame; call anchor() first")
        return apply_delta(self.frame, delta)

    def request_for(self, pose: Pose, delta: Optional[PoseDelta] = None) -> CriticRequest:
        zoom = make_zoom(self.intrinsics, pose, self.mesh.diameter, self.out_resolution)
        return CriticRequest(
            pose=pose,
            zoom=zoom,
            delta=delta,
            context=self.context,
            observed=lambda: extract_patch(self.observed_image, zoom),
            rendered=lambda: render(self.mesh, pose, zoom, self.shading, self.render_resolution).color,
        )

    def evaluate(self, delta: PoseDelta) -> float:
        """Render, zoom and score the pose addressed by ``delta``."""
        pose = self.pose_at(delta)
        request = self.request_for(pose, delta)
        with self._count_lock:
            self.eval_count += 1
        return float(self.critic.evaluate(request))

    def probe_values(self, delta: PoseDelta, steps: Optional[FiniteDifferenceSteps] = None) -> np.ndarray:
        """J at delta +/- h along each of the 6 parameters, shape (6, 2)."""
        h = (steps or self.steps).as_vector()
        base = delta.as_vector()
        probes = []
        for i in range(6):
            for sign in (1.0, -1.0):
                shifted = base.copy()
                shifted[i] += sign * h[i]
                probes.append(PoseDelta.from_vector(shifted))
        if self.probe_workers > 1:
            with ThreadPoolExecutor(max_workers=self.probe_workers) as pool:
                values = list(pool.map(self.evaluate, probes))
        else:
            values = [self.evaluate(p) for p in probes]
        return np.asarray(values).reshape(6, 2)

    def numeric_gradient(self, delta: PoseDelta, steps: Optional[FiniteDifferenceSteps] = None) -> np.ndarray:
        """Central differences over (theta_r, theta_l, theta_d); 12 evaluations."""
        gradient, _ = self.gradient_and_estimate(delta, steps)
        return gradient

    def gradient_and_estimate(self, delta: PoseDelta, steps: Optional[FiniteDifferenceSteps] = None):
        """Gradient plus the mean of the 12 probes, an O(h^2) estimate of J(delta)."""
        h = (steps or self.steps).as_vector()
        values = self.probe_values(delta, steps)
        gradient = (values[:, 0] - values[:, 1]) / (2.0 * h)
        return gradient, float(values.mean())
