"""
Template mesh, UV chart queries and point-to-surface distances.

Geometry helpers accept either numpy arrays or torch tensors. The discrete part
of every query (which face contains a UV point, which triangle is nearest to a
scan point) is resolved with numpy and carries no gradient; the continuous part
is recomputed on whatever array type the caller passed in.
"""

import hashlib
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Tuple

import numpy as np
import torch
import trimesh
from loguru import logger

from errors import AsmError, DegenerateTriangleError, UvOutOfChartError

_PAIR_BUDGET = 2_000_000


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _xp(x):
    return torch if isinstance(x, torch.Tensor) else np


def _cross2(ux, uy, vx, vy):
    return ux * vy - uy * vx


def _dot(x, y):
    return (x * y).sum(-1)


def _safe_div(num, den):
    xp = _xp(den)
    return num / xp.where(den == 0, xp.ones_like(den), den)


@dataclass(frozen=True, eq=False)
class Mesh:
    """
    Triangle template with a stored per-vertex UV chart.

    Attributes:
        vertices: (V, 3) positions in model units.
        faces: (F, 3) vertex indices, triangles only.
        uv: (V, 2) coordinates in [0, 1]^2; row i is F(v_i).
    """

    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray

    def __post_init__(self):
        vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        uv = np.ascontiguousarray(self.uv, dtype=np.float64)
        if vertices.ndim != 2 or vertices.shape[1] != 3 or len(vertices) == 0:
            raise AsmError("mesh vertices must be a non-empty (V, 3) array")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise AsmError("mesh faces must be triangles, shape (F, 3)")
        if uv.shape != (len(vertices), 2):
            raise AsmError(
                f"uv must hold exactly one coordinate per vertex: got {uv.shape[0]} for {len(vertices)} vertices"
            )
        if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise AsmError("face index out of range")
        for array in (vertices, faces, uv):
            array.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "uv", uv)

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    @property
    def face_count(self) -> int:
        return len(self.faces)

    @cached_property
    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    @cached_property
    def vertices_tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.vertices)

    @cached_property
    def uv_grid(self) -> "UvGrid":
        return UvGrid(self.uv, self.faces)

    @cached_property
    def content_hash(self) -> str:
        digest = hashlib.sha256()
        for array in (self.vertices, self.faces, self.uv):
            digest.update(np.ascontiguousarray(array).tobytes())
        return digest.hexdigest()


@dataclass(frozen=True)
class BarycentricHit:
    face_index: int
    alpha: float
    beta: float
    gamma: float

    @property
    def weights(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.gamma])

    def interpolate(self, mesh: Mesh, values: np.ndarray) -> np.ndarray:
        corners = np.asarray(values)[mesh.faces[self.face_index]]
        return self.alpha * corners[0] + self.beta * corners[1] + self.gamma * corners[2]


def triangle_contains(p, a, b, c) -> bool:
    """
    Same-sign test of the three cross products t1 = ZA x ZB, t2 = ZB x ZC, t3 = ZC x ZA.
    Points on an edge or a corner count as inside.
    """
    p, a, b, c = (np.asarray(x, dtype=np.float64) for x in (p, a, b, c))
    if _cross2(*(b - a), *(c - a)) == 0:
        raise DegenerateTriangleError(
            f"degenerate UV triangle {a.tolist()}, {b.tolist()}, {c.tolist()}: invalid UV chart"
        )
    pa, pb, pc = a - p, b - p, c - p
    t1 = _cross2(*pa, *pb)
    t2 = _cross2(*pb, *pc)
    t3 = _cross2(*pc, *pa)
    return bool((t1 >= 0 and t2 >= 0 and t3 >= 0) or (t1 <= 0 and t2 <= 0 and t3 <= 0))


def _contains_many(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    pa, pb, pc = tri[:, 0] - p, tri[:, 1] - p, tri[:, 2] - p
    t1 = _cross2(pa[:, 0], pa[:, 1], pb[:, 0], pb[:, 1])
    t2 = _cross2(pb[:, 0], pb[:, 1], pc[:, 0], pc[:, 1])
    t3 = _cross2(pc[:, 0], pc[:, 1], pa[:, 0], pa[:, 1])
    return ((t1 >= 0) & (t2 >= 0) & (t3 >= 0)) | ((t1 <= 0) & (t2 <= 0) & (t3 <= 0))


def barycentric_weights(p, a, b, c):
    """
    Vectorized barycentric weights over the last axis (x, y); works on numpy
    arrays and torch tensors alike. gamma is 1 - alpha - beta by construction.
    """
    px, py = p[..., 0], p[..., 1]
    ax, ay = a[..., 0], a[..., 1]
    bx, by = b[..., 0], b[..., 1]
    cx, cy = c[..., 0], c[..., 1]
    alpha = (-(px - bx) * (cy - by) + (py - by) * (cx - bx)) / (
        -(ax - bx) * (cy - by) + (ay - by) * (cx - bx)
    )
    beta = (-(px - cx) * (ay - cy) + (py - cy) * (ax - cx)) / (
        -(bx - cx) * (ay - cy) + (by - cy) * (ax - cx)
    )
    gamma = 1 - alpha - beta
    return alpha, beta, gamma


def barycentric(p, a, b, c) -> Tuple[float, float, float]:
    p, a, b, c = (np.asarray(x, dtype=np.float64) for x in (p, a, b, c))
    if _cross2(*(b - a), *(c - a)) == 0:
        raise DegenerateTriangleError("degenerate triangle: zero barycentric denominator")
    alpha, beta, gamma = barycentric_weights(p, a, b, c)
    return float(alpha), float(beta), float(gamma)


def expand_integer_boxes(x0, x1, y0, y1):
    """
    Enumerates every integer cell of each inclusive box [x0, x1] x [y0, y1].

    Returns:
        (box_index, x, y) arrays, one entry per covered cell.
    """
    w = np.maximum(np.asarray(x1) - x0 + 1, 0).astype(np.int64)
    h = np.maximum(np.asarray(y1) - y0 + 1, 0).astype(np.int64)
    counts = w * h
    total = int(counts.sum())
    box = np.repeat(np.arange(len(counts)), counts)
    if total == 0:
        return box, np.zeros(0, np.int64), np.zeros(0, np.int64)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    width = np.repeat(w, counts)
    x = np.repeat(np.asarray(x0, np.int64), counts) + local % width
    y = np.repeat(np.asarray(y0, np.int64), counts) + local // width
    return box, x, y


class UvGrid:
    """
    Uniform bucket grid over the UV chart. Each non-degenerate face is filed
    under every cell its bounding box touches, so a query only tests the faces
    of its own cell; results match a scan over all faces exactly.
    """

    def __init__(self, uv: np.ndarray, faces: np.ndarray, cells: int = 0):
        self.tri = uv[faces]
        area2 = _cross2(
            self.tri[:, 1, 0] - self.tri[:, 0, 0],
            self.tri[:, 1, 1] - self.tri[:, 0, 1],
            self.tri[:, 2, 0] - self.tri[:, 0, 0],
            self.tri[:, 2, 1] - self.tri[:, 0, 1],
        )
        self.face_count = len(faces)
        valid = np.flatnonzero(area2 != 0)
        self.n = cells or max(1, int(np.ceil(np.sqrt(max(self.face_count, 1) / 2.0))))
        self.lo = uv.min(0)
        extent = uv.max(0) - self.lo
        self.cell_size = np.where(extent > 0, extent / self.n, 1.0)

        cmin = self.cell_of(self.tri[valid].min(1))
        cmax = self.cell_of(self.tri[valid].max(1))
        box, cx, cy = expand_integer_boxes(cmin[:, 0], cmax[:, 0], cmin[:, 1], cmax[:, 1])
        face_ids = valid[box]
        cell = cy * self.n + cx
        order = np.lexsort((face_ids, cell))
        self.cell_faces = face_ids[order]
        self.cell_start = np.searchsorted(cell[order], np.arange(self.n * self.n + 1))
        logger.debug(
            f"UV grid built: {self.n}x{self.n} cells, {len(self.cell_faces)} face entries, "
            f"{self.face_count - len(valid)} degenerate faces skipped"
        )

    def cell_of(self, points: np.ndarray) -> np.ndarray:
        idx = np.floor((points - self.lo) / self.cell_size).astype(np.int64)
        return np.clip(idx, 0, self.n - 1)

    def locate(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Returns:
            faces: (N,) lowest-index containing face per point, -1 when outside the chart.
            weights: (N, 3) barycentric weights (zero rows for misses).
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        cells = self.cell_of(points)
        flat = cells[:, 1] * self.n + cells[:, 0]
        start = self.cell_start[flat]
        counts = self.cell_start[flat + 1] - start
        pidx = np.repeat(np.arange(len(points)), counts)
        offsets = np.arange(int(counts.sum())) - np.repeat(np.cumsum(counts) - counts, counts)
        fidx = self.cell_faces[np.repeat(start, counts) + offsets]
        inside = _contains_many(points[pidx], self.tri[fidx])

        best = np.full(len(points), self.face_count, dtype=np.int64)
        np.minimum.at(best, pidx[inside], fidx[inside])
        faces = np.where(best == self.face_count, -1, best)

        weights = np.zeros((len(points), 3))
        hit = faces >= 0
        if hit.any():
            tri = self.tri[faces[hit]]
            alpha, beta, gamma = barycentric_weights(points[hit], tri[:, 0], tri[:, 1], tri[:, 2])
            weights[hit] = np.stack([alpha, beta, gamma], axis=-1)
        return faces, weights


def locate_uv(mesh: Mesh, p) -> BarycentricHit:
    faces, weights = mesh.uv_grid.locate(np.asarray(p, dtype=np.float64)[None])
    if faces[0] < 0:
        raise UvOutOfChartError(f"uv-out-of-chart: point {np.asarray(p).tolist()} lies outside every UV triangle")
    alpha, beta, gamma = weights[0]
    return BarycentricHit(int(faces[0]), float(alpha), float(beta), float(gamma))


def clamp_to_chart(mesh: Mesh, p) -> Tuple[int, np.ndarray]:
    """Nearest covered UV point to p, with the face it lies on."""
    point = np.zeros((1, 3))
    point[0, :2] = p
    tri = np.zeros((mesh.face_count, 3, 3))
    tri[:, :, :2] = mesh.uv[mesh.faces]
    faces, _ = nearest_faces(point, tri)
    face = int(faces[0])
    closest = closest_point_on_triangle(point, tri[face, 0][None], tri[face, 1][None], tri[face, 2][None])
    return face, closest[0, :2]


def nearest_vertex_front(mesh: Mesh, p3) -> int:
    """Index of the vertex closest to p3 after dropping z; ties go to the lowest index."""
    p3 = np.asarray(p3, dtype=np.float64)
    d2 = ((mesh.vertices[:, :2] - p3[:2]) ** 2).sum(1)
    return int(np.argmin(d2))


def closest_point_on_triangle(p, a, b, c):
    """
    Closest point to p on triangle (a, b, c), batched over leading axes, by
    Voronoi-region classification. numpy arrays or torch tensors.
    """
    xp = _xp(p)

    def pick(mask, x, y):
        return xp.where(mask[..., None], x, y)

    ab, ac = b - a, c - a
    ap, bp, cp = p - a, p - b, p - c
    d1, d2 = _dot(ab, ap), _dot(ac, ap)
    d3, d4 = _dot(ab, bp), _dot(ac, bp)
    d5, d6 = _dot(ab, cp), _dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    denom = va + vb + vc
    v = _safe_div(vb, denom)
    w = _safe_div(vc, denom)
    result = a + ab * v[..., None] + ac * w[..., None]

    w_bc = _safe_div(d4 - d3, (d4 - d3) + (d5 - d6))
    result = pick((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), b + (c - b) * w_bc[..., None], result)
    w_ac = _safe_div(d2, d2 - d6)
    result = pick((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + ac * w_ac[..., None], result)
    result = pick((d6 >= 0) & (d5 <= d6), c + 0 * result, result)
    v_ab = _safe_div(d1, d1 - d3)
    result = pick((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + ab * v_ab[..., None], result)
    result = pick((d3 >= 0) & (d4 <= d3), b + 0 * result, result)
    result = pick((d1 <= 0) & (d2 <= 0), a + 0 * result, result)
    return result


def _squared_distance(p, tri):
    closest = closest_point_on_triangle(p, tri[:, 0], tri[:, 1], tri[:, 2])
    return ((p - closest) ** 2).sum(-1)


def nearest_faces(points: np.ndarray, tri: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Exact nearest triangle per point (lowest index on ties) and its squared
    distance. Triangles whose bounding-box distance exceeds a known upper bound
    are skipped; the survivors are compared exactly.
    """
    points = np.asarray(points, dtype=np.float64)
    lo, hi = tri.min(1), tri.max(1)
    faces = np.zeros(len(points), dtype=np.int64)
    sqdist = np.zeros(len(points))
    chunk = max(1, _PAIR_BUDGET // max(len(tri), 1))
    for begin in range(0, len(points), chunk):
        p = points[begin : begin + chunk]
        gap = np.maximum(lo[None] - p[:, None], 0) + np.maximum(p[:, None] - hi[None], 0)
        lower = (gap**2).sum(-1)
        seed = lower.argmin(1)
        upper = _squared_distance(p, tri[seed])
        pi, fi = np.nonzero(lower <= upper[:, None] * (1 + 1e-12) + 1e-300)
        d = _squared_distance(p[pi], tri[fi])
        order = np.lexsort((fi, d, pi))
        _, first = np.unique(pi[order], return_index=True)
        faces[begin : begin + len(p)] = fi[order][first]
        sqdist[begin : begin + len(p)] = d[order][first]
    return faces, sqdist


class SurfaceDistance(NamedTuple):
    distances: torch.Tensor
    mean: torch.Tensor
    faces: np.ndarray


def point_mesh_distance(points, mesh) -> SurfaceDistance:
    """
    Unsigned distance from each point to the nearest triangle of `mesh`
    (anything with `.vertices` and `.faces`). The nearest-triangle choice is
    frozen; gradients flow to both the points and the mesh vertices.
    """
    points_t = as_tensor(points)
    if points_t.ndim != 2 or len(points_t) == 0:
        raise AsmError("point_mesh_distance needs a non-empty (N, 3) point set")
    vertices_t = as_tensor(mesh.vertices)
    faces = np.asarray(mesh.faces, dtype=np.int64)
    tri_np = to_numpy(vertices_t)[faces]
    nearest, _ = nearest_faces(to_numpy(points_t), tri_np)
    tri = vertices_t[torch.as_tensor(faces[nearest])]
    closest = closest_point_on_triangle(points_t, tri[:, 0], tri[:, 1], tri[:, 2])
    d2 = ((points_t - closest) ** 2).sum(-1)
    distances = torch.sqrt(d2.clamp_min(1e-30))
    return SurfaceDistance(distances, distances.mean(), nearest)


def as_trimesh(vertices, faces: np.ndarray) -> trimesh.Trimesh:
    """Wraps geometry in a trimesh without merging or reordering vertices."""
    return trimesh.Trimesh(vertices=to_numpy(vertices), faces=np.asarray(faces), process=False)


def vertex_normals(vertices, faces: np.ndarray) -> np.ndarray:
    """Unit vertex normals, weighted over the incident faces."""
    return np.array(as_trimesh(vertices, faces).vertex_normals, dtype=np.float64)


def sample_surface(vertices, faces: np.ndarray, count: int, rng: np.random.Generator):
    """Area-weighted uniform samples on the surface; returns (points, face index)."""
    points, chosen = trimesh.sample.sample_surface(as_trimesh(vertices, faces), count, seed=rng)
    return np.asarray(points, dtype=np.float64), np.asarray(chosen)
