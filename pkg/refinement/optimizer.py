"""
Decoupled stochastic refinement of a pose proposal.

Each iteration takes one central-difference gradient of J and updates three
parameter blocks simultaneously with their own optimizer and step-size
schedule:

    rotation  theta_r  Adam, betas (0.6, 0.9)
    lateral   theta_l  SGD, momentum 0.5, step 1
    depth     theta_d  Adam, betas (0.4, 0.9)

The default schedules first settle rotation and then depth, with a smooth
hand-over between the two phases; lateral runs at full step throughout.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import (
    ConfigurationError, DegeneratePoseError, InvalidArgumentError, PoseRefinementError, RefinementAborted,
)
from .geometry import Pose, PoseDelta
from .objective import FiniteDifferenceSteps, Objective

logger = logging.getLogger(__name__)

BRANCH_SELECTIONS = ('final', 'best')
DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent / 'data' / 'refinement_default.json'


@dataclass(frozen=True)
class Schedule:
    """
    Step-size multiplier as a function of the iteration, given by
    breakpoints ``(iteration, value)``. Between breakpoints the value is
    interpolated linearly, or geometrically when ``interpolation='log'``;
    outside them it is held constant.
    """

    breakpoints: Tuple[Tuple[float, float], ...]
    interpolation: str = 'linear'

    def __post_init__(self):
        points = tuple((float(i), float(v)) for i, v in self.breakpoints)
        if not points:
            raise InvalidArgumentError("A schedule needs at least one breakpoint")
        its = [i for i, _ in points]
        if its != sorted(its):
            raise InvalidArgumentError(f"Schedule breakpoints must be sorted by iteration, got {its}")
        values = [v for _, v in points]
        if not all(math.isfinite(v) and v >= 0 for v in values):
            raise InvalidArgumentError(f"Schedule values must be finite and nonnegative, got {values}")
        if self.interpolation not in ('linear', 'log'):
            raise InvalidArgumentError(f"Unknown interpolation {self.interpolation!r}")
        if self.interpolation == 'log' and min(values) <= 0:
            raise InvalidArgumentError("Log-interpolated schedules need positive values")
        object.__setattr__(self, 'breakpoints', points)

    def __call__(self, iteration: float) -> float:
        its = [i for i, _ in self.breakpoints]
        values = np.array([v for _, v in self.breakpoints])
        if self.interpolation == 'log':
            return float(np.exp(np.interp(iteration, its, np.log(values))))
        return float(np.interp(iteration, its, values))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'breakpoints': [list(p) for p in self.breakpoints],
            'interpolation': self.interpolation,
        }


def default_rotation_schedule() -> Schedule:
    return Schedule(((0, 1.0), (39, 1.0), (99, 0.05)), interpolation='log')


def default_depth_schedule() -> Schedule:
    return Schedule(((0, 0.05), (34, 0.05), (59, 1.0), (84, 1.0), (99, 0.3)))


def default_lateral_schedule() -> Schedule:
    return Schedule(((0, 1.0),))


@dataclass(frozen=True)
class RefinementConfig:
    iterations: int = 100
    rotation_step: float = 0.04
    depth_step: float = 0.01
    lateral_step: float = 1.0
    rotation_betas: Tuple[float, float] = (0.6, 0.9)
    depth_betas: Tuple[float, float] = (0.4, 0.9)
    momentum: float = 0.5
    epsilon: float = 1e-8
    fd_steps: FiniteDifferenceSteps = field(default_factory=FiniteDifferenceSteps)
    rotation_schedule: Schedule = field(default_factory=default_rotation_schedule)
    depth_schedule: Schedule = field(default_factory=default_depth_schedule)
    lateral_schedule: Schedule = field(default_factory=default_lateral_schedule)
    branch_selection: str = 'final'
    evaluate_initial: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidArgumentError(f"iterations must be at least 1, got {self.iterations}")
        if self.branch_selection not in BRANCH_SELECTIONS:
            raise InvalidArgumentError(f"branch_selection must be one of {BRANCH_SELECTIONS}")
        for betas in (self.rotation_betas, self.depth_betas):
            if not all(0.0 <= b < 1.0 for b in betas):
                raise InvalidArgumentError(f"Adam betas must lie in [0, 1), got {betas}")

    def multipliers(self, iteration: int) -> Tuple[float, float, float]:
        return (
            self.rotation_schedule(iteration),
            self.lateral_schedule(iteration),
            self.depth_schedule(iteration),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            'iterations': self.iterations,
            'rotation_step': self.rotation_step,
            'depth_step': self.depth_step,
            'lateral_step': self.lateral_step,
            'rotation_betas': list(self.rotation_betas),
            'depth_betas': list(self.depth_betas),
            'momentum': self.momentum,
            'epsilon': self.epsilon,
            'fd_steps': {
                'rotation': self.fd_steps.rotation,
                'lateral': self.fd_steps.lateral,
                'depth': self.fd_steps.depth,
            },
            'schedules': {
                'rotation': self.rotation_schedule.to_dict(),
                'depth': self.depth_schedule.to_dict(),
                'lateral': self.lateral_schedule.to_dict(),
            },
            'branch_selection': self.branch_selection,
            'evaluate_initial': self.evaluate_initial,
            'seed': self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RefinementConfig':
        """Build from the JSON form; missing entries keep their defaults."""
        base = cls()
        schedules = data.get('schedules') or {}

        def schedule(name, fallback):
            spec = schedules.get(name)
            if not spec:
                return fallback
            return Schedule(tuple(tuple(p) for p in spec['breakpoints']), spec.get('interpolation', 'linear'))

        fd = {**asdict(base.fd_steps), **(data.get('fd_steps') or {})}
        return cls(
            iterations=int(data.get('iterations', base.iterations)),
            rotation_step=float(data.get('rotation_step', base.rotation_step)),
            depth_step=float(data.get('depth_step', base.depth_step)),
            lateral_step=float(data.get('lateral_step', base.lateral_step)),
            rotation_betas=tuple(data.get('rotation_betas', base.rotation_betas)),
            depth_betas=tuple(data.get('depth_betas', base.depth_betas)),
            momentum=float(data.get('momentum', base.momentum)),
            epsilon=float(data.get('epsilon', base.epsilon)),
            fd_steps=FiniteDifferenceSteps(**fd),
            rotation_schedule=schedule('rotation', base.rotation_schedule),
            depth_schedule=schedule('depth', base.depth_schedule),
            lateral_schedule=schedule('lateral', base.lateral_schedule),
            branch_selection=data.get('branch_selection', base.branch_selection),
            evaluate_initial=bool(data.get('evaluate_initial', base.evaluate_initial)),
            seed=int(data.get('seed', base.seed)),
        )


def load_refinement_config(path=None) -> RefinementConfig:
    """Read and validate a refinement config file; ``None`` reads the shipped default."""
    from .conf import ppc_setting
    from .serializers import RefinementConfigSerializer, validated

    path = Path(path or ppc_setting('DEFAULT_REFINEMENT_CONFIG') or DEFAULT_CONFIG_PATH)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"Cannot read refinement config {path}: {exc}") from exc
    return RefinementConfig.from_dict(validated(RefinementConfigSerializer, raw, f"refinement config {path}"))


@dataclass
class AdamState:
    base_step: float
    beta1: float
    beta2: float
    epsilon: float = 1e-8
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    t: int = 0


def adam_step(state: AdamState, grad, multiplier: float = 1.0) -> np.ndarray:
    """Advance ``state`` by one bias-corrected Adam step and return the parameter update."""
    g = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(g)):
        raise InvalidArgumentError(f"Gradient must be finite, got {g.tolist()}")
    if state.m is None:
        state.m = np.zeros_like(g)
        state.v = np.zeros_like(g)
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return -state.base_step * multiplier * m_hat / (np.sqrt(v_hat) + state.epsilon)


@dataclass
class MomentumState:
    base_step: float
    momentum: float
    velocity: Optional[np.ndarray] = None


def momentum_step(state: MomentumState, grad, multiplier: float = 1.0) -> np.ndarray:
    """Heavy-ball SGD: v = mu v + g, update = -step * v."""
    g = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(g)):
        raise InvalidArgumentError(f"Gradient must be finite, got {g.tolist()}")
    if state.velocity is None:
        state.velocity = np.zeros_like(g)
    state.velocity = state.momentum * state.velocity + g
    return -state.base_step * multiplier * state.velocity


@dataclass(frozen=True, eq=False)
class TraceRecord:
    iteration: int
    delta: PoseDelta
    objective: float
    # True when ``objective`` is the mean of the gradient probes rather than J itself
    estimated: bool
    multipliers: Tuple[float, float, float]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'iteration': self.iteration,
            'delta': self.delta.to_dict(),
            'objective': self.objective,
            'estimated': self.estimated,
            'multipliers': {
                'rotation': self.multipliers[0],
                'lateral': self.multipliers[1],
                'depth': self.multipliers[2],
            },
        }


@dataclass(eq=False)
class RefinementTrace:
    branch: int = 0
    records: List[TraceRecord] = field(default_factory=list)
    final_pose: Optional[Pose] = None
    eval_count: int = 0

    def __len__(self):
        return len(self.records)

    @property
    def final_objective(self) -> float:
        return self.records[-1].objective

    def best_record(self) -> TraceRecord:
        return min(self.records, key=lambda r: r.objective)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'branch': self.branch,
            'eval_count': self.eval_count,
            'final_pose': self.final_pose.to_dict() if self.final_pose is not None else None,
            'records': [r.to_dict() for r in self.records],
        }


def refine(obj: Objective, proposal: Pose, cfg: RefinementConfig = RefinementConfig(),
           branch: int = 0) -> Tuple[Pose, RefinementTrace]:
    """
    Run ``cfg.iterations`` decoupled updates starting at ``proposal`` and
    return the pose at the final iterate with the per-iteration trace.
    """
    if proposal.depth <= 0:
        raise DegeneratePoseError(
            f"Proposal depth {proposal.depth} is not positive; correct negative depth before refining"
        )
    obj.anchor(proposal)
    start_count = obj.eval_count
    rotation = AdamState(cfg.rotation_step, *cfg.rotation_betas, epsilon=cfg.epsilon)
    depth = AdamState(cfg.depth_step, *cfg.depth_betas, epsilon=cfg.epsilon)
    lateral = MomentumState(cfg.lateral_step, cfg.momentum)
    trace = RefinementTrace(branch=branch)
    x = np.zeros(6)
    iteration = 0

    try:
        initial = obj.evaluate(PoseDelta.zeros()) if cfg.evaluate_initial else None
        for iteration in range(cfg.iterations):
            delta = PoseDelta.from_vector(x)
            grad, estimate = obj.gradient_and_estimate(delta, cfg.fd_steps)
            m_rot, m_lat, m_dep = cfg.multipliers(iteration)
            exact = iteration == 0 and initial is not None
            trace.records.append(TraceRecord(
                iteration, delta, initial if exact else estimate, not exact, (m_rot, m_lat, m_dep),
            ))
            step = np.concatenate([
                adam_step(rotation, grad[0:3], m_rot),
                momentum_step(lateral, grad[3:5], m_lat),
                adam_step(depth, grad[5:6], m_dep),
            ])
            x = x + step
            if iteration % 10 == 0:
                logger.debug("branch %d iteration %d: J~%.4f |g|=%.4g", branch, iteration, estimate,
                             float(np.linalg.norm(grad)))

        final_delta = PoseDelta.from_vector(x)
        final_value = obj.evaluate(final_delta)
        trace.records.append(TraceRecord(
            cfg.iterations, final_delta, final_value, False, cfg.multipliers(cfg.iterations),
        ))
        final_pose = obj.pose_at(final_delta)
    except PoseRefinementError as exc:
        trace.eval_count = obj.eval_count - start_count
        raise RefinementAborted(f"Refinement aborted at iteration {iteration}: {exc}", trace=trace) from exc

    trace.final_pose = final_pose
    trace.eval_count = obj.eval_count - start_count
    logger.info("branch %d: J %.4f -> %.4f px in %d evaluations", branch,
                trace.records[0].objective, final_value, trace.eval_count)
    return final_pose, trace


@dataclass(eq=False)
class SymmetricRefinement:
    pose: Pose
    branch: int
    objectives: List[Optional[float]]
    traces: List[Optional[RefinementTrace]]
    errors: List[Optional[Exception]]


def refine_with_symmetries(objective_factory: Callable[[], Objective], proposal: Pose,
                           symmetries: Sequence[np.ndarray], cfg: RefinementConfig = RefinementConfig(),
                           workers: int = 1) -> SymmetricRefinement:
    """
    Refine ``proposal`` once per object-frame symmetry and keep the branch
    whose estimated error is least (at the final iterate, or over the whole
    trace with ``branch_selection='best'``). Ties go to the lower index.
    """
    symmetries = [np.asarray(s, dtype=float) for s in symmetries]
    if not any(np.allclose(s, np.eye(3)) for s in symmetries):
        raise InvalidArgumentError("The symmetry list must contain the identity")

    def run(index):
        branch_proposal = proposal.compose_object_rotation(symmetries[index])
        return refine(objective_factory(), branch_proposal, cfg, branch=index)

    def guarded(index):
        try:
            return run(index), None
        except PoseRefinementError as exc:
            logger.warning("Symmetry branch %d failed: %s", index, exc)
            return None, exc

    indices = range(len(symmetries))
    if workers > 1 and len(symmetries) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(guarded, indices))
    else:
        outcomes = [guarded(i) for i in indices]

    objectives, traces, errors, candidates = [], [], [], []
    for index, (result, error) in enumerate(outcomes):
        errors.append(error)
        if result is None:
            objectives.append(None)
            traces.append(error.trace if isinstance(error, RefinementAborted) else None)
            continue
        final_pose, trace = result
        if cfg.branch_selection == 'best':
            record = trace.best_record()
            objective_ = record.objective
            pose = _pose_for_record(proposal, symmetries[index], record, objective_factory, final_pose, trace)
        else:
            objective_ = trace.final_objective
            pose = final_pose
        objectives.append(objective_)
        traces.append(trace)
        candidates.append((objective_, index, pose))

    if not candidates:
        raise next(e for e in errors if e is not None)
    value, index, pose = min(candidates, key=lambda c: (c[0], c[1]))
    return SymmetricRefinement(pose=pose, branch=index, objectives=objectives, traces=traces, errors=errors)


def _pose_for_record(proposal, symmetry, record, objective_factory, final_pose, trace):
    if record is trace.records[-1]:
        return final_pose
    obj = objective_factory()
    obj.anchor(proposal.compose_object_rotation(symmetry))
    return obj.pose_at(record.delta)
