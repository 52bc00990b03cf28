"""
The subcommand operations: sample proposals, refine, evaluate, generate
datasets, render patches and self-test. Management commands parse flags and
delegate here; everything below works on plain run-config dictionaries.

Dataset layout (as written by ``gen``)::

    <root>/images/NNNNNN.png  <root>/gt.json  <root>/camera.json  <root>/manifest.json

Pose files (proposals, refined poses) hold ``{frame_id, object_id, pose}``
entries, either as a bare list or under a ``"poses"`` key next to the
producing run's ``config_hash``.
"""

import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .camera import CameraIntrinsics, extract_patch, make_zoom
from .conf import config_hash, ppc_setting
from .critics import OracleCritic, SceneContext, build_critic
from .datagen import DatagenConfig, desk_intrinsics, generate_dataset
from .exceptions import (
    ConfigurationError, InvalidArgumentError, KeyMismatchError, PoseRefinementError, RefinementAborted,
)
from .geometry import Pose, rotation_angle_between, so3_exp
from .images import load_image, save_image, save_mask
from .meshes import TriangleMesh, load_mesh, model_points, shipped_mesh_path
from .metrics import (
    METRICS, MetricThresholds, SymmetrySet, add_metric, adds_metric, evaluate_instance, format_table,
    recall_table, symmetric_metric, write_results_csv,
)
from .objective import Objective
from .optimizer import RefinementConfig, load_refinement_config, refine_with_symmetries
from .proposals import ProposalSampler, ProposalSamplerConfig, correct_negative_depth
from .rasterizer import ShadingParams, render
from .serializers import (
    GroundTruthEntrySerializer, IntrinsicsSerializer, ProposalEntrySerializer, RunConfigSerializer, validated,
)

logger = logging.getLogger(__name__)

SHIPPED_MESHES = ('cube', 'box', 'wedge')
SEED_ENV = 'PPC_SEED'

InstanceKey = Tuple[int, str]


# Run configuration

def effective_seed(seed: int) -> int:
    """``PPC_SEED`` from the environment wins over the configured seed."""
    value = os.environ.get(SEED_ENV)
    if value in (None, ''):
        return int(seed)
    try:
        return int(value)
    except ValueError:
        raise ConfigurationError(f"{SEED_ENV} must be an integer, got {value!r}") from None


def load_run_config(path=None, overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Read a run-config JSON file (optional), apply flag overrides and validate."""
    raw: Dict[str, Any] = {}
    if path is not None:
        raw = read_json(path, 'run config')
        if not isinstance(raw, dict):
            raise ConfigurationError(f"Run config {path} must be a JSON object")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    raw.setdefault('parallelism', ppc_setting('WORKERS'))
    config = validated(RunConfigSerializer, raw, 'run config')
    config['seed'] = effective_seed(config['seed'])
    return config


def read_json(path, what: str = 'file'):
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"{what.capitalize()} {path} does not exist")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{what.capitalize()} {path} is not valid JSON: {exc}") from exc


def write_json(path, data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2))
    return path


def require(config: Dict[str, Any], key: str, must_exist: bool = True) -> Path:
    if not config.get(key):
        raise ConfigurationError(f"Run config needs '{key}'")
    path = Path(config[key])
    if must_exist and not path.exists():
        raise ConfigurationError(f"'{key}' path {path} does not exist")
    return path


def thresholds_from(config: Dict[str, Any]) -> MetricThresholds:
    try:
        return MetricThresholds(**(config.get('thresholds') or {}))
    except InvalidArgumentError as exc:
        raise ConfigurationError(str(exc)) from exc


def refinement_config_from(config: Dict[str, Any]) -> RefinementConfig:
    try:
        return load_refinement_config(config.get('refinement_config'))
    except InvalidArgumentError as exc:
        raise ConfigurationError(f"Invalid refinement config: {exc}") from exc


# Datasets and pose files

@dataclass(eq=False)
class GroundTruth:
    pose: Pose
    image: Path
    visible_pixels: Optional[int] = None


@dataclass(eq=False)
class Dataset:
    root: Path
    intrinsics: CameraIntrinsics
    entries: Dict[InstanceKey, GroundTruth]
    mesh_paths: List[Path] = field(default_factory=list)
    config_hash: Optional[str] = None

    def keys(self) -> List[InstanceKey]:
        return sorted(self.entries)


def load_dataset(root) -> Dataset:
    root = Path(root)
    camera = validated(IntrinsicsSerializer, read_json(root / 'camera.json', 'camera file'), 'camera.json')
    gt = read_json(root / 'gt.json', 'ground-truth file')
    frames = gt.get('frames', []) if isinstance(gt, dict) else gt
    entries: Dict[InstanceKey, GroundTruth] = {}
    for i, raw in enumerate(frames):
        data = validated(GroundTruthEntrySerializer, raw, f"gt.json entry {i}")
        key = (data['frame_id'], data['object_id'])
        if key in entries:
            raise ConfigurationError(f"gt.json lists {key} twice")
        entries[key] = GroundTruth(Pose.from_dict(data['pose']), root / data['image'], data.get('visible_pixels'))
    manifest_path = root / 'manifest.json'
    manifest = read_json(manifest_path, 'manifest') if manifest_path.exists() else {}
    return Dataset(
        root=root,
        intrinsics=CameraIntrinsics(**camera),
        entries=entries,
        mesh_paths=[Path(p) for p in manifest.get('meshes', [])],
        config_hash=manifest.get('config_hash'),
    )


@dataclass(eq=False)
class PoseEntry:
    frame_id: int
    object_id: str
    pose: Pose
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def key(self) -> InstanceKey:
        return (self.frame_id, self.object_id)

    def to_dict(self) -> Dict[str, Any]:
        return {'frame_id': self.frame_id, 'object_id': self.object_id, 'pose': self.pose.to_dict(), **self.extra}


def read_pose_entries(path, what: str = 'pose file') -> List[PoseEntry]:
    data = read_json(path, what)
    if isinstance(data, dict):
        data = data.get('poses', data.get('proposals'))
    if not isinstance(data, list):
        raise ConfigurationError(f"{what.capitalize()} {path} holds no list of poses")
    entries = []
    for i, raw in enumerate(data):
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{what.capitalize()} entry {i} is not an object")
        core = {k: raw[k] for k in ('frame_id', 'object_id', 'pose') if k in raw}
        checked = validated(ProposalEntrySerializer, core, f"{what} entry {i}")
        extra = {k: v for k, v in raw.items() if k not in core}
        entries.append(PoseEntry(checked['frame_id'], checked['object_id'], Pose.from_dict(checked['pose']), extra))
    keys = [e.key for e in entries]
    if len(set(keys)) != len(keys):
        raise ConfigurationError(f"{what.capitalize()} {path} lists an instance twice")
    return entries


def write_pose_entries(path, entries: Sequence[PoseEntry], run_hash: str, **extra) -> Path:
    ordered = sorted(entries, key=lambda e: e.key)
    return write_json(path, {'config_hash': run_hash, **extra, 'poses': [e.to_dict() for e in ordered]})


def load_meshes(config: Dict[str, Any], dataset: Optional[Dataset] = None) -> Dict[str, TriangleMesh]:
    """Meshes by object id: the configured paths, else the dataset's, else the shipped ones."""
    paths = [Path(p) for p in config.get('meshes') or []]
    if not paths and dataset is not None:
        paths = dataset.mesh_paths
    if not paths:
        paths = [shipped_mesh_path(name) for name in SHIPPED_MESHES]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise ConfigurationError(f"Mesh file(s) not found: {missing}")
    meshes = {}
    for p in paths:
        mesh = load_mesh(p)
        meshes[mesh.name] = mesh
    return meshes


def _mesh_for(meshes: Dict[str, TriangleMesh], object_id: str) -> TriangleMesh:
    try:
        return meshes[object_id]
    except KeyError:
        raise ConfigurationError(f"No mesh for object '{object_id}' (have {sorted(meshes)})") from None


# sample_proposals

def cmd_sample_proposals(config: Dict[str, Any]) -> Path:
    dataset = load_dataset(require(config, 'dataset'))
    output = require(config, 'output', must_exist=False)
    meshes = load_meshes(config, dataset)
    sampler_data = dict(config.get('sampler') or {})
    sampler_data['seed'] = config['seed']
    try:
        sampler_cfg = ProposalSamplerConfig(**sampler_data)
    except InvalidArgumentError as exc:
        raise ConfigurationError(str(exc)) from exc

    sampler = ProposalSampler(sampler_cfg)
    entries = []
    for key in dataset.keys():
        mesh = _mesh_for(meshes, key[1])
        draw = sampler.draw(dataset.entries[key].pose, mesh.diameter)
        entries.append(PoseEntry(key[0], key[1], draw.pose, {'category': draw.category}))
    run_hash = config_hash({'command': 'sample_proposals', 'sampler': sampler_cfg.to_dict(),
                            'dataset': dataset.config_hash})
    logger.info("Sampled %d proposals into %s", len(entries), output)
    return write_pose_entries(output, entries, run_hash)


# refine

@dataclass(eq=False)
class RefineJob:
    key: InstanceKey
    proposal: Pose
    gt_pose: Optional[Pose]
    image_path: Path
    mesh: TriangleMesh
    intrinsics: CameraIntrinsics
    critic: Dict[str, Any]
    cfg: RefinementConfig
    out_resolution: int
    render_resolution: int
    max_points: int
    probe_workers: int = 1


@dataclass
class RefineReport:
    output: Path
    entries: List[PoseEntry]
    failures: List[Tuple[InstanceKey, str]]
    seconds: float
    config_hash: str
    trace_files: List[Path] = field(default_factory=list)


def refine_instance(job: RefineJob):
    """Refine one (frame, object) proposal; returns (key, result dict, traces)."""
    started = time.perf_counter()
    frame_id, object_id = job.key
    proposal = correct_negative_depth(job.proposal)
    corrected = proposal is not job.proposal
    image = load_image(job.image_path)
    points = model_points(job.mesh, job.max_points)
    context = SceneContext(pose_true=job.gt_pose, points=points, frame_id=frame_id, object_id=object_id)
    symmetries = job.mesh.symmetry_set

    with build_critic(job.critic) as critic:
        def objective():
            return Objective(
                image, job.mesh, job.intrinsics, critic, ShadingParams(), context=context,
                out_resolution=job.out_resolution, render_resolution=job.render_resolution,
                probe_workers=job.probe_workers,
            )

        outcome = refine_with_symmetries(objective, proposal, symmetries, job.cfg, workers=len(symmetries))

    traces = [t for t in outcome.traces if t is not None]
    result = {
        'pose': outcome.pose,
        'initial_pose': proposal.to_dict(),
        'corrected_depth': corrected,
        'branch': outcome.branch,
        'objectives': outcome.objectives,
        'eval_count': sum(t.eval_count for t in traces),
        'seconds': time.perf_counter() - started,
        'status': 'ok',
    }
    return job.key, result, traces


def _guarded_refine(job: RefineJob):
    try:
        return refine_instance(job)
    except PoseRefinementError as exc:
        traces = [exc.trace] if isinstance(exc, RefinementAborted) and exc.trace is not None else []
        return job.key, {'status': 'failed', 'error': f"{type(exc).__name__}: {exc}"}, traces


def cmd_refine(config: Dict[str, Any]) -> RefineReport:
    dataset = load_dataset(require(config, 'dataset'))
    proposals = read_pose_entries(require(config, 'proposals'), 'proposal file')
    output = require(config, 'output', must_exist=False)
    meshes = load_meshes(config, dataset)
    cfg = refinement_config_from(config)
    critic = dict(config.get('critic') or {'kind': 'oracle'})
    if critic.get('kind') == 'noisy':
        critic.setdefault('seed', config['seed'])

    jobs = []
    for entry in sorted(proposals, key=lambda e: e.key):
        gt = dataset.entries.get(entry.key)
        if gt is None:
            raise ConfigurationError(f"Proposal for frame {entry.frame_id} object {entry.object_id!r} "
                                     f"has no dataset frame")
        jobs.append(RefineJob(
            key=entry.key, proposal=entry.pose, gt_pose=gt.pose, image_path=gt.image,
            mesh=_mesh_for(meshes, entry.object_id), intrinsics=dataset.intrinsics, critic=critic, cfg=cfg,
            out_resolution=ppc_setting('PATCH_RESOLUTION'), render_resolution=ppc_setting('RENDER_RESOLUTION'),
            max_points=ppc_setting('MAX_MODEL_POINTS'), probe_workers=config.get('probe_workers', 1),
        ))

    run_hash = config_hash({
        'command': 'refine', 'refinement': cfg.to_dict(), 'critic': critic, 'seed': config['seed'],
        'proposals': str(config['proposals']), 'dataset': dataset.config_hash,
    })
    started = time.perf_counter()
    workers = config.get('parallelism', 1)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_guarded_refine, jobs))
    else:
        results = [_guarded_refine(job) for job in jobs]
    results.sort(key=lambda r: r[0])

    entries, failures, trace_files = [], [], []
    trace_dir = output.parent / f"{output.stem}_traces"
    for job, (key, result, traces) in zip(jobs, results):
        if result['status'] == 'failed':
            logger.error("frame %d object %s: %s", key[0], key[1], result['error'])
            failures.append((key, result['error']))
            entries.append(PoseEntry(key[0], key[1], correct_or_keep(job.proposal), result))
        else:
            pose = result.pop('pose')
            entries.append(PoseEntry(key[0], key[1], pose, result))
        if config.get('trace'):
            for trace in traces:
                name = f"{key[0]:06d}_{key[1]}_b{trace.branch}.json"
                trace_files.append(write_json(trace_dir / name, {'config_hash': run_hash, **trace.to_dict()}))

    seconds = time.perf_counter() - started
    timing = {
        'total_s': seconds,
        'instances': len(jobs),
        'mean_s_per_instance': seconds / len(jobs) if jobs else 0.0,
        'failures': len(failures),
    }
    write_pose_entries(output, entries, run_hash, timing=timing)
    logger.info("Refined %d instance(s) in %.1f s, %d failure(s)", len(jobs), seconds, len(failures))
    return RefineReport(output, entries, failures, seconds, run_hash, trace_files)


def correct_or_keep(pose: Pose) -> Pose:
    try:
        return correct_negative_depth(pose)
    except InvalidArgumentError:
        return pose


# eval

@dataclass
class EvalReport:
    verdicts: list
    table: Any
    text: str
    csv_path: Path
    json_path: Path
    config_hash: str


def check_keys(estimated: Sequence[InstanceKey], expected: Sequence[InstanceKey]) -> None:
    missing = set(expected) - set(estimated)
    extra = set(estimated) - set(expected)
    if missing or extra:
        raise KeyMismatchError(missing, extra)


def cmd_eval(config: Dict[str, Any]) -> EvalReport:
    dataset = load_dataset(require(config, 'dataset'))
    estimates = read_pose_entries(require(config, 'estimates'), 'estimate file')
    output = require(config, 'output', must_exist=False)
    meshes = load_meshes(config, dataset)
    thresholds = thresholds_from(config)
    check_keys([e.key for e in estimates], dataset.keys())

    points = {name: model_points(mesh, ppc_setting('MAX_MODEL_POINTS')) for name, mesh in meshes.items()}
    verdicts = []
    for entry in sorted(estimates, key=lambda e: e.key):
        mesh = _mesh_for(meshes, entry.object_id)
        verdicts.append(evaluate_instance(
            entry.pose, dataset.entries[entry.key].pose, points[mesh.name], mesh.diameter,
            dataset.intrinsics, SymmetrySet.from_mesh(mesh), thresholds,
            frame_id=entry.frame_id, object_id=entry.object_id,
        ))

    table = recall_table(verdicts)
    text = format_table(table)
    run_hash = config_hash({'command': 'eval', 'thresholds': thresholds.to_dict(),
                            'estimates': str(config['estimates']), 'dataset': dataset.config_hash})
    output.mkdir(parents=True, exist_ok=True)
    csv_path = output / 'metrics.csv'
    write_results_csv(csv_path, verdicts, run_hash=run_hash)
    json_path = write_json(output / 'summary.json', {
        'config_hash': run_hash,
        'thresholds': thresholds.to_dict(),
        'metrics': list(METRICS),
        **table.to_dict(),
        'per_instance': [v.to_dict() for v in verdicts],
    })
    (output / 'table.txt').write_text(text + '\n')
    return EvalReport(verdicts, table, text, csv_path, json_path, run_hash)


# gen

def cmd_gen(config: Dict[str, Any]) -> Path:
    output = require(config, 'output', must_exist=False)
    data = dict(config.get('datagen') or {})
    data['seed'] = config['seed']
    try:
        cfg = DatagenConfig.from_dict(data)
    except InvalidArgumentError as exc:
        raise ConfigurationError(f"Invalid datagen config: {exc}") from exc
    mesh_paths = [Path(p) for p in config.get('meshes') or []] or [shipped_mesh_path(n) for n in SHIPPED_MESHES]
    missing = [str(p) for p in mesh_paths if not p.exists()]
    if missing:
        raise ConfigurationError(f"Mesh file(s) not found: {missing}")
    return generate_dataset(mesh_paths, config.get('n_frames') or 1, cfg, output,
                            workers=config.get('parallelism', 1))


# render

def cmd_render(config: Dict[str, Any]) -> List[Path]:
    """Observed and rendered patches (plus the render mask) for every instance, at gt or at proposals."""
    dataset = load_dataset(require(config, 'dataset'))
    output = require(config, 'output', must_exist=False)
    meshes = load_meshes(config, dataset)
    poses = {key: gt.pose for key, gt in dataset.entries.items()}
    if config.get('proposals'):
        poses = {e.key: correct_or_keep(e.pose) for e in read_pose_entries(require(config, 'proposals'))}

    written = []
    out_res = ppc_setting('PATCH_RESOLUTION')
    for key in sorted(poses):
        frame_id, object_id = key
        mesh = _mesh_for(meshes, object_id)
        zoom = make_zoom(dataset.intrinsics, poses[key], mesh.diameter, out_res)
        rendered = render(mesh, poses[key], zoom, ShadingParams(), ppc_setting('RENDER_RESOLUTION'))
        stem = f"{frame_id:06d}_{object_id}"
        save_image(output / f"{stem}_rendered.png", rendered.color.pixels)
        save_mask(output / f"{stem}_mask.png", rendered.mask)
        written += [output / f"{stem}_rendered.png", output / f"{stem}_mask.png"]
        gt = dataset.entries.get(key)
        if gt is not None:
            observed = extract_patch(load_image(gt.image), zoom)
            save_image(output / f"{stem}_observed.png", observed.pixels)
            written.append(output / f"{stem}_observed.png")
    logger.info("Rendered %d patch set(s) into %s", len(poses), output)
    return written


# selftest

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def selftest(seed: int = 0) -> List[CheckResult]:
    """Quick health check of the rotation group, metric and sampler invariants and one oracle refinement."""
    rng = np.random.default_rng(seed)
    results = []

    worst_orth, worst_inv = 0.0, 0.0
    for v in rng.normal(scale=2.0, size=(1000, 3)):
        R = so3_exp(v)
        worst_orth = max(worst_orth, float(np.abs(R.T @ R - np.eye(3)).max()), abs(np.linalg.det(R) - 1.0))
        worst_inv = max(worst_inv, float(np.abs(R @ so3_exp(-v) - np.eye(3)).max()))
    results.append(CheckResult('rotation group', worst_orth < 1e-9 and worst_inv < 1e-9,
                               f"orthonormality {worst_orth:.2e}, inverse {worst_inv:.2e}"))

    box = load_mesh(shipped_mesh_path('box'))
    pts = model_points(box)
    symmetry = SymmetrySet.from_mesh(box)
    ok = True
    for _ in range(50):
        gt = Pose(so3_exp(rng.normal(size=3)), np.array([0.0, 0.0, 1.0]) + rng.normal(scale=0.05, size=3))
        est = Pose(so3_exp(rng.normal(scale=0.3, size=3)) @ gt.rotation, gt.translation + rng.normal(scale=0.02, size=3))
        add, _ = add_metric(est, gt, pts, box.diameter)
        adds, _ = adds_metric(est, gt, pts, box.diameter)
        sym_add, _ = symmetric_metric(add_metric, est, gt, symmetry, pts, box.diameter)
        ok &= adds <= add + 1e-12 and sym_add <= add + 1e-12
    results.append(CheckResult('metric dominance', ok, 'adds <= add and symmetric <= plain on 50 pairs'))

    sampler = ProposalSampler(ProposalSamplerConfig(seed=seed))
    gt = Pose.identity((0.0, 0.0, 1.0))
    counts = {'rotation': 0, 'lateral': 0, 'depth': 0}
    n = 10000
    for _ in range(n):
        counts[sampler.draw(gt, 0.1).category] += 1
    freqs = {k: v / n for k, v in counts.items()}
    expected = {'rotation': 0.30, 'lateral': 0.30, 'depth': 0.40}
    results.append(CheckResult('sampler frequencies', all(abs(freqs[k] - expected[k]) < 0.02 for k in expected),
                               ', '.join(f"{k} {v:.3f}" for k, v in freqs.items())))

    results.append(_selftest_refinement(seed))
    return results


def _selftest_refinement(seed: int) -> CheckResult:
    cube = load_mesh(shipped_mesh_path('cube'))
    intrinsics = desk_intrinsics()
    gt = Pose(so3_exp([0.3, -0.2, 0.1]), np.array([0.0, 0.0, 1.0]))
    axis = np.random.default_rng(seed).normal(size=3)
    axis /= np.linalg.norm(axis)
    proposal = Pose(so3_exp(axis * math.radians(10.0)) @ gt.rotation, gt.translation)
    image = np.zeros((intrinsics.height, intrinsics.width, 3))
    context = SceneContext(pose_true=gt, points=model_points(cube))
    critic = OracleCritic()
    try:
        outcome = refine_with_symmetries(
            lambda: Objective(image, cube, intrinsics, critic, context=context), proposal, [np.eye(3)],
        )
    except PoseRefinementError as exc:
        return CheckResult('oracle refinement', False, str(exc))
    before = rotation_angle_between(proposal, gt)
    after = rotation_angle_between(outcome.pose, gt)
    return CheckResult('oracle refinement', after < 1.0, f"rotation error {before:.2f} -> {after:.3f} deg")
