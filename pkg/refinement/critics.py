"""
Critics: functions f(observed patch, rendered patch) estimating the mean
reprojection error, in patch pixels, of the pose that produced the render.

Three implementations share the ``Critic`` interface:

* ``OracleCritic`` computes the error exactly from the ground truth carried
  by the request context.
* ``NoisyCritic`` perturbs the oracle with a smooth deterministic bias,
  reproducible pseudo-random noise and the training-target saturation,
  emulating the output surface of a trained network.
* ``ExternalCritic`` talks line-delimited JSON to a subprocess hosting a
  learned model.
"""

import abc
import hashlib
import json
import logging
import math
import queue
import shlex
import subprocess
import sys
import threading
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from .camera import ImagePatch, ZoomedCamera, project_to_patch
from .conf import ppc_setting
from .exceptions import CriticProtocolError, InvalidArgumentError
from .geometry import Pose, so3_log
from .images import decode_png_base64, encode_png_base64

logger = logging.getLogger(__name__)

SATURATION_PX = 50.0
BUMPS_PER_AXIS = 3
QUANTUM = 1e-9


@dataclass(frozen=True, eq=False)
class SceneContext:
    """Ground truth handle; image-only critics never look at it."""

    pose_true: Optional[Pose]
    points: Optional[np.ndarray]
    frame_id: Any = None
    object_id: Any = None


class CriticRequest:
    """
    One critic query for the pose ``pose`` seen through ``zoom``.

    Patches are produced on first access, so critics that do not read
    images never trigger a render.
    """

    def __init__(self, pose: Pose, zoom: ZoomedCamera, context: Optional[SceneContext] = None,
                 observed: Union[ImagePatch, Callable[[], ImagePatch], None] = None,
                 rendered: Union[ImagePatch, Callable[[], ImagePatch], None] = None,
                 delta=None):
        self.pose = pose
        self.zoom = zoom
        self.delta = delta
        self.context = context
        self._observed = observed
        self._rendered = rendered

    @staticmethod
    def _resolve(source, name):
        if source is None:
            raise InvalidArgumentError(f"Critic request has no {name} patch")
        return source() if callable(source) else source

    @cached_property
    def observed(self) -> ImagePatch:
        return self._resolve(self._observed, 'observed')

    @cached_property
    def rendered(self) -> ImagePatch:
        return self._resolve(self._rendered, 'rendered')

    def patches(self) -> Tuple[ImagePatch, ImagePatch]:
        observed, rendered = self.observed, self.rendered
        if observed.pixels.shape != rendered.pixels.shape:
            raise InvalidArgumentError(
                f"Observed {observed.pixels.shape} and rendered {rendered.pixels.shape} patches differ in size"
            )
        return observed, rendered


def oracle_error(pose_hat: Pose, pose_true: Pose, points: np.ndarray, zoom_hat: ZoomedCamera) -> float:
    """
    Mean 2D distance, in patch pixels, between the model points projected
    under ``pose_hat`` and under ``pose_true``, both through the estimated
    pose's patch camera ``zoom_hat``.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise InvalidArgumentError("At least one model point is required")
    estimated = project_to_patch(zoom_hat, pose_hat, pts)
    true = project_to_patch(zoom_hat, pose_true, pts)
    return float(np.mean(np.linalg.norm(estimated - true, axis=1)))


class Critic(abc.ABC):
    name = 'critic'

    @abc.abstractmethod
    def evaluate(self, request: CriticRequest) -> float:
        """Estimated mean reprojection error in patch pixels."""

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()


def _ground_truth(request: CriticRequest) -> SceneContext:
    ctx = request.context
    if ctx is None or ctx.pose_true is None or ctx.points is None:
        raise InvalidArgumentError("This critic needs a context carrying the ground-truth pose and model points")
    return ctx


class OracleCritic(Critic):
    name = 'oracle'

    def evaluate(self, request: CriticRequest) -> float:
        ctx = _ground_truth(request)
        return oracle_error(request.pose, ctx.pose_true, ctx.points, request.zoom)


@dataclass(frozen=True)
class NoisyCriticConfig:
    noise_sigma: float = 0.0
    bias_amplitude: float = 5.0
    # rotation (rad), lateral (base px), depth (log units)
    bias_length_scale: Tuple[float, float, float] = (0.3, 10.0, 0.05)
    saturation: float = SATURATION_PX
    seed: int = 0

    def __post_init__(self):
        if not self.saturation > 0:
            raise InvalidArgumentError(f"saturation must be positive, got {self.saturation}")
        if not self.noise_sigma >= 0:
            raise InvalidArgumentError(f"noise_sigma must be nonnegative, got {self.noise_sigma}")
        if not self.bias_amplitude >= 0:
            raise InvalidArgumentError(f"bias_amplitude must be nonnegative, got {self.bias_amplitude}")
        scales = tuple(float(s) for s in self.bias_length_scale)
        if len(scales) != 3 or min(scales) <= 0:
            raise InvalidArgumentError(f"bias_length_scale needs 3 positive values, got {self.bias_length_scale}")
        object.__setattr__(self, 'bias_length_scale', scales)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'noise_sigma': self.noise_sigma,
            'bias_amplitude': self.bias_amplitude,
            'bias_length_scale': list(self.bias_length_scale),
            'saturation': self.saturation,
            'seed': self.seed,
        }


def error_coordinates(pose_hat: Pose, pose_true: Pose, zoom: ZoomedCamera) -> np.ndarray:
    """
    Six coordinates of the pose error: relative rotation vector, offset of
    the projected center in base pixels, log depth ratio.
    """
    rot = so3_log(pose_hat.rotation @ pose_true.rotation.T)
    intr = zoom.base
    centers = intr.project_points(np.stack([pose_hat.translation, pose_true.translation]))
    lateral = centers[0] - centers[1]
    log_depth = math.log(pose_hat.depth / pose_true.depth)
    return np.concatenate([rot, lateral, [log_depth]])


class NoisyCritic(Critic):
    """
    Oracle plus a smooth bias (sum of low-frequency cosine bumps per error
    coordinate, bounded by ``bias_amplitude``) plus Gaussian noise drawn
    from a counter-based generator keyed by (seed, quantized pose), clamped
    to [0, saturation].
    """

    name = 'noisy'

    def __init__(self, config: NoisyCriticConfig = NoisyCriticConfig()):
        self.config = config
        rng = np.random.default_rng(config.seed)
        weights = rng.uniform(0.2, 1.0, size=(6, BUMPS_PER_AXIS))
        self._weights = weights / weights.sum()
        self._frequencies = rng.uniform(0.5, 1.5, size=(6, BUMPS_PER_AXIS))
        self._phases = rng.uniform(0.0, 2.0 * math.pi, size=(6, BUMPS_PER_AXIS))
        rot, lat, dep = config.bias_length_scale
        self._length_scales = np.array([rot, rot, rot, lat, lat, dep])

    def bias(self, coords: np.ndarray) -> float:
        scaled = (np.asarray(coords) / self._length_scales)[:, None]
        bumps = self._weights * np.cos(self._frequencies * scaled + self._phases)
        return float(self.config.bias_amplitude * bumps.sum())

    def noise(self, pose: Pose) -> float:
        if self.config.noise_sigma == 0:
            return 0.0
        quantized = np.rint(np.concatenate([pose.rotation.ravel(), pose.translation]) / QUANTUM).astype(np.int64)
        digest = hashlib.blake2b(
            np.int64(self.config.seed).tobytes() + quantized.tobytes(), digest_size=16,
        ).digest()
        key = np.frombuffer(digest, dtype=np.uint64)
        gen = np.random.Generator(np.random.Philox(key=key))
        return float(gen.normal(0.0, self.config.noise_sigma))

    def evaluate(self, request: CriticRequest) -> float:
        ctx = _ground_truth(request)
        value = oracle_error(request.pose, ctx.pose_true, ctx.points, request.zoom)
        if self.config.bias_amplitude > 0:
            value += self.bias(error_coordinates(request.pose, ctx.pose_true, request.zoom))
        value += self.noise(request.pose)
        return min(self.config.saturation, max(0.0, value))


def noisy_critic_eval(request: CriticRequest, config: NoisyCriticConfig) -> float:
    return NoisyCritic(config).evaluate(request)


class ExternalCritic(Critic):
    """
    Learned critic hosted in a subprocess, one JSON object per line on its
    stdin/stdout. Requests are serialized; one in flight per process.

    A timeout or a dead child leaves the reply stream out of step with the
    requests, so either one kills the process and every later call raises.
    """

    name = 'external'

    def __init__(self, command: Union[str, Sequence[str]], patch_resolution: int = 512,
                 timeout: Optional[float] = None):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.patch_resolution = patch_resolution
        self.timeout = float(ppc_setting('EXTERNAL_CRITIC_TIMEOUT_S') if timeout is None else timeout)
        self._lock = threading.Lock()
        self._lines: 'queue.Queue[Optional[str]]' = queue.Queue()
        self._broken: Optional[str] = None
        try:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, bufsize=1,
            )
        except OSError as exc:
            raise CriticProtocolError(f"Could not start critic {self.command!r}: {exc}") from exc
        self._reader = threading.Thread(target=self._pump, name='critic-reader', daemon=True)
        self._reader.start()
        try:
            reply = self._exchange({'type': 'hello', 'patch_resolution': patch_resolution})
            if reply.get('type') != 'ready':
                raise CriticProtocolError(f"Expected a 'ready' handshake, got {reply!r}")
        except CriticProtocolError:
            self.close()
            raise
        logger.info("External critic %s ready", self.command[0])

    def _pump(self):
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    @property
    def broken(self) -> bool:
        return self._broken is not None

    def _abandon(self, reason: str) -> CriticProtocolError:
        self._broken = reason
        logger.error("External critic %s abandoned: %s", self.command[0], reason)
        if self._proc.poll() is None:
            self._proc.kill()
            self._proc.wait()
        return CriticProtocolError(reason)

    def _exchange(self, payload: Dict[str, Any]) -> Dict[str, Any]:
        with self._lock:
            if self._broken is not None:
                raise CriticProtocolError(f"Critic is unusable after an earlier failure: {self._broken}")
            try:
                self._proc.stdin.write(json.dumps(payload) + '\n')
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError, ValueError) as exc:
                raise self._abandon(f"Critic process is not accepting requests: {exc}") from exc
            try:
                line = self._lines.get(timeout=self.timeout)
            except queue.Empty:
                raise self._abandon(f"Critic did not answer within {self.timeout:g} s") from None
            if line is None:
                raise self._abandon(f"Critic process exited (code {self._proc.poll()})")
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CriticProtocolError(f"Malformed critic response {line.strip()!r}") from exc
        if not isinstance(reply, dict):
            raise CriticProtocolError(f"Critic response must be a JSON object, got {line.strip()!r}")
        return reply

    def evaluate(self, request: CriticRequest) -> float:
        observed, rendered = request.patches()
        reply = self._exchange({
            'type': 'eval',
            'observed_png': encode_png_base64(observed.pixels),
            'rendered_png': encode_png_base64(rendered.pixels),
        })
        if reply.get('type') != 'error_px':
            raise CriticProtocolError(f"Expected an 'error_px' response, got {reply!r}")
        try:
            value = float(reply['value'])
        except (KeyError, TypeError, ValueError) as exc:
            raise CriticProtocolError(f"Response carries no numeric value: {reply!r}") from exc
        if not math.isfinite(value) or value < 0:
            raise CriticProtocolError(f"Critic returned an invalid error estimate {value!r}")
        return value

    def close(self) -> None:
        proc = getattr(self, '_proc', None)
        if proc is None:
            return
        try:
            proc.stdin.close()
        except OSError:
            pass
        if proc.poll() is not None:
            return
        try:
            proc.wait(timeout=1.0)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()


def external_critic_eval(request: CriticRequest, endpoint: ExternalCritic) -> float:
    return endpoint.evaluate(request)


def serve_critic(estimate: Callable[[np.ndarray, np.ndarray], float], stdin=None, stdout=None) -> None:
    """
    Child side of the external-critic protocol: answers the handshake, then
    decodes each request's patches and replies with ``estimate(observed,
    rendered)``. Returns when the parent closes stdin.
    """
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout

    def reply(message):
        stdout.write(json.dumps(message) + '\n')
        stdout.flush()

    for line in stdin:
        message = json.loads(line)
        kind = message.get('type')
        if kind == 'hello':
            reply({'type': 'ready'})
        elif kind == 'eval':
            observed = decode_png_base64(message['observed_png'])
            rendered = decode_png_base64(message['rendered_png'])
            reply({'type': 'error_px', 'value': float(estimate(observed, rendered))})
        else:
            reply({'type': 'error', 'message': f"unknown request type {kind!r}"})


CRITICS = ('oracle', 'noisy', 'external')


def build_critic(selection: Dict[str, Any]) -> Critic:
    """
    Critic factory from a selection mapping, e.g. ``{"kind": "oracle"}``,
    ``{"kind": "noisy", "noise_sigma": 1.0}`` or
    ``{"kind": "external", "command": "python my_critic.py"}``.
    """
    kind = selection.get('kind', 'oracle')
    if kind == 'oracle':
        return OracleCritic()
    if kind == 'noisy':
        fields_ = {k: v for k, v in selection.items() if k != 'kind'}
        return NoisyCritic(NoisyCriticConfig(**fields_))
    if kind == 'external':
        return ExternalCritic(
            selection['command'],
            patch_resolution=selection.get('patch_resolution', ppc_setting('PATCH_RESOLUTION')),
            timeout=selection.get('timeout'),
        )
    raise InvalidArgumentError(f"Unknown critic '{kind}', expected one of {CRITICS}")
