"""
Pose accuracy metrics and recall aggregation.

Acceptance conventions: ADD, ADD-S and reprojection use a strict "<" on
their thresholds; 5cm/5deg is inclusive ("at most"). Symmetric variants
score the estimate against the most favorable symmetry of the ground truth.
"""

import csv
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .camera import CameraIntrinsics
from .exceptions import InvalidArgumentError
from .geometry import Pose, rotation_angle_between

logger = logging.getLogger(__name__)

METRICS = ('add', 'adds', 'add(-s)', 'reproj', 'reproj-s', '5cm5deg', '5cm5deg-s')
MEAN_ROW = 'Mean'


@dataclass(frozen=True)
class MetricThresholds:
    add_fraction: float = 0.1
    reproj_px: float = 5.0
    rotation_deg: float = 5.0
    translation_m: float = 0.05

    def __post_init__(self):
        for name in ('add_fraction', 'reproj_px', 'rotation_deg', 'translation_m'):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"Threshold {name} must be positive, got {getattr(self, name)}")

    def to_dict(self) -> Dict[str, float]:
        return {
            'add_fraction': self.add_fraction,
            'reproj_px': self.reproj_px,
            'rotation_deg': self.rotation_deg,
            'translation_m': self.translation_m,
        }


class SymmetrySet:
    """Object-frame rotations mapping the model onto itself; identity first."""

    def __init__(self, rotations: Iterable[np.ndarray] = ()):
        rotations = [np.asarray(r, dtype=float) for r in rotations]
        if not any(np.allclose(r, np.eye(3)) for r in rotations):
            rotations.insert(0, np.eye(3))
        self.rotations = tuple(rotations)

    @classmethod
    def from_mesh(cls, mesh) -> 'SymmetrySet':
        return cls(mesh.symmetry_set)

    @property
    def is_symmetric(self) -> bool:
        return len(self.rotations) > 1

    def __iter__(self):
        return iter(self.rotations)

    def __len__(self):
        return len(self.rotations)


def _check_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise InvalidArgumentError(f"Model points must be a nonempty (M, 3) array, got shape {pts.shape}")
    return pts


def add_metric(est: Pose, gt: Pose, points, diameter: float, fraction: float = 0.1) -> Tuple[float, bool]:
    """Mean distance of corresponding model points; accepted below ``fraction`` of the diameter."""
    pts = _check_points(points)
    value = float(np.linalg.norm(est.transform(pts) - gt.transform(pts), axis=1).mean())
    return value, value < fraction * diameter


def adds_metric(est: Pose, gt: Pose, points, diameter: float, fraction: float = 0.1) -> Tuple[float, bool]:
    """Mean closest-point distance, for objects whose symmetries make correspondence ambiguous."""
    pts = _check_points(points)
    distances, _ = cKDTree(gt.transform(pts)).query(est.transform(pts), k=1)
    value = float(np.mean(distances))
    return value, value < fraction * diameter


def reproj_metric(est: Pose, gt: Pose, points, intrinsics: CameraIntrinsics,
                  threshold_px: float = 5.0) -> Tuple[float, bool]:
    """Mean 2D distance of model points projected into the base image."""
    pts = _check_points(points)
    a = intrinsics.project_points(est.transform(pts))
    b = intrinsics.project_points(gt.transform(pts))
    value = float(np.linalg.norm(a - b, axis=1).mean())
    return value, value < threshold_px


def deg_cm_metric(est: Pose, gt: Pose, deg_threshold: float = 5.0,
                  trans_threshold_m: float = 0.05) -> Tuple[float, float, bool]:
    rot_err = rotation_angle_between(est, gt)
    trans_err = float(np.linalg.norm(est.translation - gt.translation))
    return rot_err, trans_err, rot_err <= deg_threshold and trans_err <= trans_threshold_m


def symmetric_metric(metric: Callable, est: Pose, gt: Pose, symmetry: SymmetrySet, *args, **kwargs):
    """
    ``metric`` against each symmetric equivalent of ``gt``, keeping the most
    favorable result: the least value, or for 5cm/5deg an accepted result
    before a rejected one and then the least rotation error.
    """
    results = [metric(est, gt.compose_object_rotation(s), *args, **kwargs) for s in symmetry]
    if metric is deg_cm_metric:
        return min(results, key=lambda r: (not r[2], r[0], r[1]))
    return min(results, key=lambda r: r[0])


@dataclass(frozen=True, eq=False)
class MetricVerdict:
    add_value: float
    adds_value: float
    reproj_value: float
    reproj_s_value: float
    rot_err: float
    trans_err: float
    rot_err_s: float
    trans_err_s: float
    accepted: Dict[str, bool]
    symmetric: bool = False
    frame_id: Any = None
    object_id: Any = None

    def value(self, metric: str) -> float:
        """Scalar for ``metric``; the 5cm/5deg rows report the rotation error in degrees."""
        values = {
            'add': self.add_value,
            'adds': self.adds_value,
            'add(-s)': self.adds_value if self.symmetric else self.add_value,
            'reproj': self.reproj_value,
            'reproj-s': self.reproj_s_value,
            '5cm5deg': self.rot_err,
            '5cm5deg-s': self.rot_err_s,
        }
        if metric not in values:
            raise InvalidArgumentError(f"Unknown metric '{metric}', expected one of {METRICS}")
        return values[metric]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'frame_id': self.frame_id,
            'object_id': self.object_id,
            'symmetric': self.symmetric,
            'add': self.add_value,
            'adds': self.adds_value,
            'reproj': self.reproj_value,
            'reproj_s': self.reproj_s_value,
            'rot_err_deg': self.rot_err,
            'trans_err_m': self.trans_err,
            'rot_err_s_deg': self.rot_err_s,
            'trans_err_s_m': self.trans_err_s,
            'accepted': dict(self.accepted),
        }


def evaluate_instance(est: Pose, gt: Pose, points, diameter: float, intrinsics: CameraIntrinsics,
                      symmetry: Optional[SymmetrySet] = None,
                      thresholds: MetricThresholds = MetricThresholds(),
                      frame_id=None, object_id=None) -> MetricVerdict:
    symmetry = symmetry or SymmetrySet()
    add_value, add_ok = add_metric(est, gt, points, diameter, thresholds.add_fraction)
    adds_value, adds_ok = adds_metric(est, gt, points, diameter, thresholds.add_fraction)
    reproj_value, reproj_ok = reproj_metric(est, gt, points, intrinsics, thresholds.reproj_px)
    reproj_s_value, reproj_s_ok = symmetric_metric(
        reproj_metric, est, gt, symmetry, points, intrinsics, thresholds.reproj_px,
    )
    rot_err, trans_err, deg_cm_ok = deg_cm_metric(est, gt, thresholds.rotation_deg, thresholds.translation_m)
    rot_err_s, trans_err_s, deg_cm_s_ok = symmetric_metric(
        deg_cm_metric, est, gt, symmetry, thresholds.rotation_deg, thresholds.translation_m,
    )
    return MetricVerdict(
        add_value=add_value,
        adds_value=adds_value,
        reproj_value=reproj_value,
        reproj_s_value=reproj_s_value,
        rot_err=rot_err,
        trans_err=trans_err,
        rot_err_s=rot_err_s,
        trans_err_s=trans_err_s,
        accepted={
            'add': add_ok,
            'adds': adds_ok,
            'add(-s)': adds_ok if symmetry.is_symmetric else add_ok,
            'reproj': reproj_ok,
            'reproj-s': reproj_s_ok,
            '5cm5deg': deg_cm_ok,
            '5cm5deg-s': deg_cm_s_ok,
        },
        symmetric=symmetry.is_symmetric,
        frame_id=frame_id,
        object_id=object_id,
    )


def recall(verdicts: Sequence[MetricVerdict], metric: str) -> float:
    """Percentage of instances accepted by ``metric``."""
    if metric not in METRICS:
        raise InvalidArgumentError(f"Unknown metric '{metric}', expected one of {METRICS}")
    if not verdicts:
        raise InvalidArgumentError("Recall of an empty list of verdicts is undefined")
    accepted = sum(1 for v in verdicts if v.accepted[metric])
    return 100.0 * accepted / len(verdicts)


def mean_recall(per_object: Dict[Any, float]) -> float:
    """Unweighted mean over objects, as in per-object tables' "Mean" row."""
    if not per_object:
        raise InvalidArgumentError("Mean recall needs at least one object")
    return float(np.mean(list(per_object.values())))


@dataclass
class RecallTable:
    # object -> metric -> recall; objects in sorted order
    rows: Dict[str, Dict[str, float]] = field(default_factory=OrderedDict)
    mean: Dict[str, float] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'objects': {name: dict(row) for name, row in self.rows.items()},
            'mean': dict(self.mean),
            'instances': dict(self.counts),
        }


def recall_table(verdicts: Sequence[MetricVerdict], metrics: Sequence[str] = METRICS) -> RecallTable:
    if not verdicts:
        raise InvalidArgumentError("Cannot tabulate an empty list of verdicts")
    by_object: Dict[str, List[MetricVerdict]] = {}
    for v in verdicts:
        by_object.setdefault(str(v.object_id), []).append(v)

    table = RecallTable()
    for name in sorted(by_object):
        table.rows[name] = {m: recall(by_object[name], m) for m in metrics}
        table.counts[name] = len(by_object[name])
    table.mean = {m: mean_recall({name: row[m] for name, row in table.rows.items()}) for m in metrics}
    return table


def format_table(table: RecallTable) -> str:
    """Aligned plain-text table, one row per object plus the mean."""
    metrics = list(table.mean)
    header = ['object'] + metrics
    body = [[name] + [f"{row[m]:.2f}" for m in metrics] for name, row in table.rows.items()]
    body.append([MEAN_ROW] + [f"{table.mean[m]:.2f}" for m in metrics])
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]

    def line(cells):
        first = cells[0].rjust(widths[0])
        return ' | '.join([first] + [c.rjust(w) for c, w in zip(cells[1:], widths[1:])])

    rule = '-+-'.join('-' * w for w in widths)
    return '\n'.join([line(header), rule] + [line(r) for r in body[:-1]] + [rule, line(body[-1])])


def write_results_csv(path, verdicts: Sequence[MetricVerdict], metrics: Sequence[str] = METRICS,
                      run_hash: Optional[str] = None) -> None:
    """
    One row per (instance, metric): frame_id, object, metric, value,
    accepted, plus a config_hash column when ``run_hash`` is given.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='') as fh:
        writer = csv.writer(fh)
        extra = [run_hash] if run_hash is not None else []
        writer.writerow(['frame_id', 'object', 'metric', 'value', 'accepted'] + (['config_hash'] if extra else []))
        for v in verdicts:
            for m in metrics:
                value = v.value(m)
                writer.writerow([v.frame_id, v.object_id, m, repr(value) if math.isfinite(value) else 'nan',
                                 int(v.accepted[m])] + extra)
