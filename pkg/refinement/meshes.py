"""
CAD model ingestion: ASCII OBJ / PLY triangle meshes, vertex normals,
diameters, symmetry sidecars and the model point sets used by the
reprojection error and the metrics.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from .exceptions import EmptyMeshError, InvalidArgumentError, MeshFormatError
from .geometry import so3_exp
from .serializers import ModelSidecarSerializer, validated

logger = logging.getLogger(__name__)

EXACT_DIAMETER_LIMIT = 5000
DIAMETER_BLOCK = 1000
SUBSAMPLE_SEED = 0
DEFAULT_ALBEDO = 0.8


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray
    colors: Optional[np.ndarray]
    diameter: float
    symmetries: Tuple[np.ndarray, ...] = field(default_factory=tuple)
    name: str = ''

    def __post_init__(self):
        n = len(self.vertices)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise InvalidArgumentError("Triangle index out of range")
        lengths = np.linalg.norm(self.normals, axis=1)
        if not np.allclose(lengths, 1.0, atol=1e-6):
            raise InvalidArgumentError("Vertex normals must be unit length")
        if self.colors is not None and self.colors.shape != (n, 3):
            raise InvalidArgumentError(f"Vertex colors must be ({n}, 3), got {self.colors.shape}")
        for arr in (self.vertices, self.triangles, self.normals, self.colors):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def albedo(self) -> np.ndarray:
        if self.colors is not None:
            return self.colors
        return np.full((len(self.vertices), 3), DEFAULT_ALBEDO)

    @property
    def symmetry_set(self) -> List[np.ndarray]:
        """Declared symmetries with the identity first."""
        return [np.eye(3)] + [s for s in self.symmetries if not np.allclose(s, np.eye(3))]


def compute_vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals; isolated vertices get +z."""
    v0, v1, v2 = (vertices[triangles[:, i]] for i in range(3))
    face_normals = np.cross(v1 - v0, v2 - v0)  # length = 2 * area
    normals = np.zeros_like(vertices)
    for i in range(3):
        np.add.at(normals, triangles[:, i], face_normals)
    return _normalize_rows(normals)


def _normalize_rows(normals: np.ndarray) -> np.ndarray:
    normals = np.array(normals, dtype=float)
    lengths = np.linalg.norm(normals, axis=1)
    degenerate = lengths < 1e-12
    normals[degenerate] = (0.0, 0.0, 1.0)
    lengths[degenerate] = 1.0
    return normals / lengths[:, None]


def compute_diameter(vertices: np.ndarray) -> float:
    """
    Maximum pairwise vertex distance. Exact up to EXACT_DIAMETER_LIMIT
    vertices, beyond that over a deterministic subsample (may underestimate
    by about 1%).
    """
    pts = np.asarray(vertices, dtype=float)
    if len(pts) > EXACT_DIAMETER_LIMIT:
        rng = np.random.default_rng(SUBSAMPLE_SEED)
        idx = np.sort(rng.choice(len(pts), EXACT_DIAMETER_LIMIT, replace=False))
        pts = pts[idx]
    best = 0.0
    for start in range(0, len(pts), DIAMETER_BLOCK):
        block = pts[start:start + DIAMETER_BLOCK]
        best = max(best, float(cdist(block, pts[start:]).max()))
    return best


def model_points(mesh: TriangleMesh, max_points: int = 2000) -> np.ndarray:
    """All vertices, or a seeded uniform subsample of ``max_points`` of them in vertex order."""
    if max_points < 4:
        raise InvalidArgumentError(f"max_points must be at least 4, got {max_points}")
    n = len(mesh.vertices)
    if n <= max_points:
        return np.array(mesh.vertices)
    rng = np.random.default_rng(SUBSAMPLE_SEED)
    idx = np.sort(rng.choice(n, max_points, replace=False))
    return np.array(mesh.vertices[idx])


def build_mesh(vertices, triangles, normals=None, colors=None, diameter=None,
               symmetries=(), name='') -> TriangleMesh:
    vertices = np.asarray(vertices, dtype=float).reshape(-1, 3)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if len(triangles) == 0:
        raise EmptyMeshError("Mesh has no faces", path=name or None)
    if normals is None:
        normals = compute_vertex_normals(vertices, triangles)
    else:
        normals = np.array(normals, dtype=float).reshape(-1, 3)
        missing = np.linalg.norm(normals, axis=1) < 1e-12
        if np.any(missing):
            normals[missing] = compute_vertex_normals(vertices, triangles)[missing]
        normals = _normalize_rows(normals)
    if colors is not None:
        colors = np.clip(np.asarray(colors, dtype=float).reshape(-1, 3), 0.0, 1.0)
    computed = compute_diameter(vertices)
    if diameter is None:
        diameter = computed
    elif diameter < computed * (1.0 - 1e-6):
        raise MeshFormatError(
            f"Declared diameter {diameter} is below the measured lower bound {computed}",
            path=name or None,
        )
    return TriangleMesh(
        vertices=vertices,
        triangles=triangles,
        normals=normals,
        colors=colors,
        diameter=float(diameter),
        symmetries=tuple(np.asarray(s, dtype=float) for s in symmetries),
        name=name,
    )


def _parse_obj(path: Path):
    vertices, colors, normals, triangles = [], [], [], []
    normal_refs = []
    with open(path, 'r', encoding='utf-8') as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            tag, args = parts[0], parts[1:]
            try:
                if tag == 'v':
                    if len(args) not in (3, 4, 6, 7):
                        raise ValueError(f"expected 3 or 6 vertex values, got {len(args)}")
                    values = [float(a) for a in args]
                    vertices.append(values[:3])
                    if len(values) >= 6:
                        colors.append(values[-3:])
                elif tag == 'vn':
                    normals.append([float(a) for a in args[:3]])
                elif tag == 'f':
                    if len(args) < 3:
                        raise ValueError("face needs at least 3 vertices")
                    corners = [_obj_corner(a, len(vertices), len(normals)) for a in args]
                    for i in range(1, len(corners) - 1):
                        triangles.append([corners[0][0], corners[i][0], corners[i + 1][0]])
                    normal_refs.extend(c for c in corners if c[1] is not None)
            except (ValueError, IndexError) as exc:
                raise MeshFormatError(str(exc), path=path, line=lineno) from exc
    if colors and len(colors) != len(vertices):
        raise MeshFormatError("Vertex colors given for some vertices only", path=path)

    vertex_normals = None
    if normal_refs:
        accum = np.zeros((len(vertices), 3))
        normal_arr = np.asarray(normals, dtype=float)
        for v_idx, n_idx in normal_refs:
            accum[v_idx] += normal_arr[n_idx]
        vertex_normals = accum
    return vertices, triangles, vertex_normals, (colors or None)


def _obj_corner(token: str, n_vertices: int, n_normals: int):
    fields_ = token.split('/')

    def resolve(value, count):
        idx = int(value)
        idx = idx - 1 if idx > 0 else count + idx
        if not 0 <= idx < count:
            raise IndexError(f"index {value} out of range")
        return idx

    v_idx = resolve(fields_[0], n_vertices)
    n_idx = None
    if len(fields_) == 3 and fields_[2]:
        n_idx = resolve(fields_[2], n_normals)
    return v_idx, n_idx


def _parse_ply(path: Path):
    with open(path, 'r', encoding='utf-8') as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != 'ply':
        raise MeshFormatError("Missing 'ply' magic", path=path, line=1)

    elements = []
    lineno = 1
    while True:
        if lineno >= len(lines):
            raise MeshFormatError("Header not terminated by end_header", path=path, line=lineno)
        parts = lines[lineno].split()
        lineno += 1
        if not parts or parts[0] in ('comment', 'obj_info'):
            continue
        if parts[0] == 'format':
            if parts[1] != 'ascii':
                raise MeshFormatError(f"Only ASCII PLY is supported, got {parts[1]}", path=path, line=lineno)
        elif parts[0] == 'element':
            elements.append({'name': parts[1], 'count': int(parts[2]), 'props': []})
        elif parts[0] == 'property':
            if not elements:
                raise MeshFormatError("property before element", path=path, line=lineno)
            elements[-1]['props'].append(parts[-1])
        elif parts[0] == 'end_header':
            break

    data = {}
    for element in elements:
        rows = []
        first_line = lineno + 1
        for _ in range(element['count']):
            if lineno >= len(lines):
                raise MeshFormatError(f"Unexpected end of file in element {element['name']}", path=path, line=lineno)
            try:
                rows.append([float(x) for x in lines[lineno].split()])
            except ValueError as exc:
                raise MeshFormatError(str(exc), path=path, line=lineno + 1) from exc
            lineno += 1
        data[element['name']] = (element['props'], rows, first_line)

    if 'vertex' not in data:
        raise EmptyMeshError("PLY has no vertex element", path=path)
    props, rows, _ = data['vertex']
    arr = np.asarray(rows, dtype=float).reshape(len(rows), -1)
    col = {name: i for i, name in enumerate(props)}
    try:
        vertices = arr[:, [col['x'], col['y'], col['z']]]
    except KeyError as exc:
        raise MeshFormatError(f"Vertex property {exc} missing", path=path) from exc
    normals = arr[:, [col['nx'], col['ny'], col['nz']]] if {'nx', 'ny', 'nz'} <= col.keys() else None
    colors = None
    if {'red', 'green', 'blue'} <= col.keys():
        colors = arr[:, [col['red'], col['green'], col['blue']]] / 255.0

    triangles = []
    if 'face' in data:
        _, rows, first_line = data['face']
        for offset, row in enumerate(rows):
            count = int(row[0]) if row else 0
            idx = [int(i) for i in row[1:1 + count]]
            if count < 3 or len(idx) != count:
                raise MeshFormatError(f"Face needs at least 3 vertex indices, got {row}", path=path,
                                      line=first_line + offset)
            bad = [i for i in idx if not 0 <= i < len(vertices)]
            if bad:
                raise MeshFormatError(f"Vertex index {bad[0]} out of range for {len(vertices)} vertices",
                                      path=path, line=first_line + offset)
            for i in range(1, count - 1):
                triangles.append([idx[0], idx[i], idx[i + 1]])
    return vertices, triangles, normals, colors


def read_sidecar(path: Path) -> dict:
    """Model metadata: ``{"diameter_m": float, "symmetries": [axis-angle, ...]}``."""
    sidecar = Path(path).with_suffix('.json')
    if not sidecar.exists():
        return {}
    return validated(ModelSidecarSerializer, json.loads(sidecar.read_text()), f"sidecar {sidecar}")


def load_mesh(path) -> TriangleMesh:
    """Load an ASCII OBJ or PLY mesh and its optional JSON sidecar."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == '.obj':
        vertices, triangles, normals, colors = _parse_obj(path)
    elif suffix == '.ply':
        vertices, triangles, normals, colors = _parse_ply(path)
    else:
        raise MeshFormatError(f"Unsupported mesh format '{suffix}'", path=path)
    if len(vertices) == 0 or len(triangles) == 0:
        raise EmptyMeshError("Mesh has no vertices or faces", path=path)

    meta = read_sidecar(path)
    symmetries = [so3_exp(aa) for aa in meta.get('symmetries', [])]
    mesh = build_mesh(
        vertices, triangles, normals=normals, colors=colors,
        diameter=meta.get('diameter_m'), symmetries=symmetries, name=path.stem,
    )
    logger.debug("Loaded %s: %d vertices, %d triangles, diameter %.4f m",
                 path.name, len(mesh.vertices), len(mesh.triangles), mesh.diameter)
    return mesh


def shipped_mesh_path(name: str) -> Path:
    from .conf import ppc_setting

    mesh_dir = ppc_setting('MESH_DIR') or Path(__file__).resolve().parent / 'data' / 'meshes'
    return Path(mesh_dir) / f"{name}.obj"
