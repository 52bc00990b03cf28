"""Shared fixtures and independent oracles for the refinement tests."""

import math
import sys
import textwrap
from functools import lru_cache
from pathlib import Path

import numpy as np

from refinement.camera import CameraIntrinsics
from refinement.critics import Critic
from refinement.geometry import Pose, so3_exp
from refinement.meshes import TriangleMesh, load_mesh, shipped_mesh_path


def desk_camera(width=640, height=480) -> CameraIntrinsics:
    return CameraIntrinsics(fx=572.0, fy=572.0, cx=width / 2.0 - 0.5, cy=height / 2.0 - 0.5,
                            width=width, height=height)


@lru_cache(maxsize=None)
def shipped(name: str) -> TriangleMesh:
    return load_mesh(shipped_mesh_path(name))


def random_rotation(rng, max_angle=math.pi) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return so3_exp(axis * rng.uniform(0.0, max_angle))


def random_pose(rng, depth=1.0, spread=0.05) -> Pose:
    t = np.array([rng.uniform(-spread, spread), rng.uniform(-spread, spread), depth])
    return Pose(random_rotation(rng), t)


def rotated_about_camera_axis(pose: Pose, axis, degrees: float) -> Pose:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return Pose(so3_exp(axis * math.radians(degrees)) @ pose.rotation, pose.translation)


def rodrigues_by_quaternion(v) -> np.ndarray:
    """Rotation matrix of axis-angle ``v`` via the unit quaternion."""
    v = np.asarray(v, dtype=float)
    angle = float(np.linalg.norm(v))
    if angle == 0.0:
        return np.eye(3)
    x, y, z = v / angle * math.sin(angle / 2.0)
    w = math.cos(angle / 2.0)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def brute_force_reprojection(pose_hat, pose_true, points, zoom) -> float:
    """Point-by-point patch reprojection error through the estimated pose's zoom."""
    base = zoom.base
    corner_u = zoom.patch_center[0] - zoom.patch_side / 2.0
    corner_v = zoom.patch_center[1] - zoom.patch_side / 2.0
    scale = zoom.out_resolution / zoom.patch_side
    total = 0.0
    for p in points:
        pixels = []
        for pose in (pose_hat, pose_true):
            x, y, z = pose.rotation @ p + pose.translation
            u = base.fx * x / z + base.cx
            v = base.fy * y / z + base.cy
            pixels.append(((u - corner_u) * scale, (v - corner_v) * scale))
        (a, b), (c, d) = pixels
        total += math.hypot(a - c, b - d)
    return total / len(points)


def brute_force_add(est, gt, points) -> float:
    total = 0.0
    for p in points:
        total += float(np.linalg.norm((est.rotation @ p + est.translation) - (gt.rotation @ p + gt.translation)))
    return total / len(points)


def brute_force_adds(est, gt, points) -> float:
    total = 0.0
    for p in points:
        a = est.rotation @ p + est.translation
        total += min(float(np.linalg.norm(a - (gt.rotation @ q + gt.translation))) for q in points)
    return total / len(points)


class QuadraticCritic(Critic):
    """J = sum(w * theta^2) + floor, straight from the request's delta."""

    name = 'quadratic'

    def __init__(self, weights=(400.0, 400.0, 400.0, 1.0, 1.0, 4000.0), center=None, floor=0.0):
        self.weights = np.asarray(weights, dtype=float)
        self.center = np.zeros(6) if center is None else np.asarray(center, dtype=float)
        self.floor = floor
        self.calls = 0

    def evaluate(self, request):
        self.calls += 1
        d = request.delta.as_vector() - self.center
        return float(np.sum(self.weights * d * d) + self.floor)


class FailingCritic(Critic):
    name = 'failing'

    def __init__(self, fail_after: int, error):
        self.fail_after = fail_after
        self.error = error
        self.calls = 0

    def evaluate(self, request):
        self.calls += 1
        if self.calls > self.fail_after:
            raise self.error
        return 1.0


def write_critic_script(directory, body: str) -> str:
    """Write a line-protocol critic script and return the command running it."""
    path = Path(directory) / 'critic.py'
    path.write_text(textwrap.dedent(body))
    return f'"{sys.executable}" "{path}"'


ECHO_CRITIC = """
    import json
    import sys

    for line in sys.stdin:
        msg = json.loads(line)
        if msg['type'] == 'hello':
            print(json.dumps({'type': 'ready'}), flush=True)
        elif msg['type'] == 'eval':
            size = len(msg['observed_png']) + len(msg['rendered_png'])
            print(json.dumps({'type': 'error_px', 'value': 3.5, 'size': size}), flush=True)
"""

EXITING_CRITIC = """
    import sys
    sys.exit(3)
"""

PROJECT_ROOT = Path(__file__).resolve().parents[2]

# answers the first request after the client has given up, with a value
# that must never reach a later request
SLOW_FIRST_CRITIC = """
    import json
    import sys
    import time

    sys.stdin.readline()
    print(json.dumps({'type': 'ready'}), flush=True)
    for i, line in enumerate(sys.stdin):
        if i == 0:
            time.sleep(1.0)
        print(json.dumps({'type': 'error_px', 'value': 111.0 if i == 0 else 2.0}), flush=True)
"""

SERVED_CRITIC = """
    import sys
    sys.path.insert(0, {root!r})

    from refinement.critics import serve_critic

    serve_critic(lambda observed, rendered: float(abs(observed - rendered).mean() * 100.0))
"""


def served_critic_script(directory) -> str:
    return write_critic_script(directory, SERVED_CRITIC.format(root=str(PROJECT_ROOT)))
