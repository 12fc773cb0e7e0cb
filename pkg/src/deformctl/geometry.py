"""Triangle meshes, rigid transforms and exact closest-point queries.

All lengths are millimetres.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import chain

import numpy as np
from scipy.spatial import cKDTree

_ORTHO_TOL = 1e-9


class MeshError(ValueError):
    pass


# --------------------------------------------------------------------------
# rigid transforms
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RigidTransform:
    """Rotation ``R`` followed by translation ``t``: ``x -> R x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation is not proper (det != +1)")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_axis_angle(cls, axis, angle_rad, center=None) -> "RigidTransform":
        """Rotation by ``angle_rad`` about ``axis`` through ``center`` (origin by default)."""
        R = axis_angle_matrix(axis, angle_rad)
        if center is None:
            return cls(R, np.zeros(3))
        c = np.asarray(center, dtype=float)
        return cls(R, c - R @ c)

    def apply(self, points) -> np.ndarray:
        return apply_transform(self, points)

    def apply_vectors(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def angle(self) -> float:
        return rotation_angle(self.rotation)


def axis_angle_matrix(axis, angle_rad) -> np.ndarray:
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    K = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    R = np.eye(3) + np.sin(angle_rad) * K + (1.0 - np.cos(angle_rad)) * (K @ K)
    # re-orthonormalise so the transform invariants hold to machine precision
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


def rotation_angle(R) -> float:
    """Rotation angle in radians, accurate for tiny angles."""
    R = np.asarray(R)
    s = np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    c = np.trace(R) - 1.0
    return float(np.arctan2(s, c))


def apply_transform(tf: RigidTransform, points) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    return p @ tf.rotation.T + tf.translation


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``compose(a, b)`` applies ``b`` first, then ``a``."""
    R = a.rotation @ b.rotation
    U, _, Vt = np.linalg.svd(R)
    return RigidTransform(U @ Vt, a.rotation @ b.translation + a.translation)


def invert(tf: RigidTransform) -> RigidTransform:
    Rt = tf.rotation.T
    return RigidTransform(Rt, -Rt @ tf.translation)


# --------------------------------------------------------------------------
# meshes
# --------------------------------------------------------------------------

def _face_cross(vertices, triangles):
    a = vertices[triangles[:, 0]]
    return np.cross(vertices[triangles[:, 1]] - a, vertices[triangles[:, 2]] - a)


def compute_vertex_normals(vertices, triangles) -> np.ndarray:
    """Area-weighted vertex normals; orientation follows triangle winding."""
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64)
    fn = _face_cross(vertices, triangles)  # |fn| = 2 * area
    acc = np.zeros_like(vertices)
    for corner in range(3):
        np.add.at(acc, triangles[:, corner], fn)
    length = np.linalg.norm(acc, axis=1)
    if np.any(length == 0.0):
        bad = int(np.flatnonzero(length == 0.0)[0])
        raise MeshError(f"vertex {bad} has no well-defined normal (isolated vertex?)")
    return acc / length[:, None]


class TriangleMesh:
    """Immutable triangle mesh with area-weighted vertex normals."""

    def __init__(self, vertices, triangles):
        v = np.array(vertices, dtype=float).reshape(-1, 3)
        f = np.array(triangles, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError("triangle index out of range")
        if len(f):
            area2 = np.linalg.norm(_face_cross(v, f), axis=1)
            scale = max(np.ptp(v, axis=0).max(), 1.0)
            if np.any(area2 <= 1e-14 * scale * scale):
                bad = int(np.flatnonzero(area2 <= 1e-14 * scale * scale)[0])
                raise MeshError(f"degenerate (zero-area) triangle {bad}")
        self.vertices = v
        self.triangles = f
        self.vertex_normals = compute_vertex_normals(v, f) if len(f) else np.zeros_like(v)
        for arr in (self.vertices, self.triangles, self.vertex_normals):
            arr.setflags(write=False)

    def __len__(self):
        return len(self.triangles)

    def transformed(self, tf: RigidTransform) -> "TriangleMesh":
        return TriangleMesh(tf.apply(self.vertices), self.triangles)

    def flipped(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.triangles[:, ::-1])

    def face_normals(self) -> np.ndarray:
        fn = _face_cross(self.vertices, self.triangles)
        return fn / np.linalg.norm(fn, axis=1)[:, None]


def grid_mesh(points_grid) -> TriangleMesh:
    """Triangulate a (rows, cols, 3) point grid, two triangles per cell.

    Winding is chosen so that a grid laid out with columns along +x and rows
    along +y gets +z normals.
    """
    rows, cols, _ = points_grid.shape
    idx = np.arange(rows * cols).reshape(rows, cols)
    v00 = idx[:-1, :-1].ravel()
    v01 = idx[:-1, 1:].ravel()
    v10 = idx[1:, :-1].ravel()
    v11 = idx[1:, 1:].ravel()
    tris = np.concatenate([np.stack([v00, v01, v11], 1), np.stack([v00, v11, v10], 1)])
    return TriangleMesh(points_grid.reshape(-1, 3), tris)


# --------------------------------------------------------------------------
# closest points
# --------------------------------------------------------------------------

@dataclass
class ClosestPointResult:
    point: np.ndarray
    normal: np.ndarray
    distance: float
    triangle_id: int


@dataclass
class ClosestPoints:
    """Batch of closest-point results, one row per query."""

    points: np.ndarray
    normals: np.ndarray
    distances: np.ndarray
    triangle_ids: np.ndarray
    barycentric: np.ndarray

    def __len__(self):
        return len(self.distances)

    def __getitem__(self, j) -> ClosestPointResult:
        return ClosestPointResult(self.points[j], self.normals[j],
                                  float(self.distances[j]), int(self.triangle_ids[j]))


def closest_on_triangles(p, a, b, c):
    """Exact closest point on triangles (a, b, c) to points p, row-wise.

    Returns (points, barycentric weights).  Voronoi-region classification of
    the query against the triangle's vertices, edges and face.
    """
    p, a, b, c = (np.asarray(x, dtype=float) for x in (p, a, b, c))
    n = len(p)
    bary = np.empty((n, 3))
    todo = np.ones(n, dtype=bool)

    def take(mask, w):
        nonlocal todo
        m = mask & todo
        bary[m] = w[m] if np.ndim(w) == 2 else w
        todo = todo & ~m

    dot = lambda x, y: np.einsum("ij,ij->i", x, y)
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = dot(ab, ap), dot(ac, ap)
    take((d1 <= 0) & (d2 <= 0), np.array([1.0, 0.0, 0.0]))

    bp = p - b
    d3, d4 = dot(ab, bp), dot(ac, bp)
    take((d3 >= 0) & (d4 <= d3), np.array([0.0, 1.0, 0.0]))

    vc = d1 * d4 - d3 * d2
    m = (vc <= 0) & (d1 >= 0) & (d3 <= 0) & todo
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(m, d1 / np.where(m, d1 - d3, 1.0), 0.0)
    take(m, np.stack([1 - v, v, np.zeros(n)], 1))

    cp = p - c
    d5, d6 = dot(ab, cp), dot(ac, cp)
    take((d6 >= 0) & (d5 <= d6), np.array([0.0, 0.0, 1.0]))

    vb = d5 * d2 - d1 * d6
    m = (vb <= 0) & (d2 >= 0) & (d6 <= 0) & todo
    w = np.where(m, d2 / np.where(m, d2 - d6, 1.0), 0.0)
    take(m, np.stack([1 - w, np.zeros(n), w], 1))

    va = d3 * d6 - d5 * d4
    m = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0) & todo
    den = np.where(m, (d4 - d3) + (d5 - d6), 1.0)
    w = np.where(m, (d4 - d3) / den, 0.0)
    take(m, np.stack([np.zeros(n), 1 - w, w], 1))

    if todo.any():
        den = np.where(todo, va + vb + vc, 1.0)
        v = vb / den
        w = vc / den
        take(todo, np.stack([1 - v - w, v, w], 1))

    pts = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:] * c
    return pts, bary


class SpatialIndex:
    """Exact nearest-point-on-mesh queries.

    Triangles are indexed by centroid in a kd-tree and bounded by their
    centroid-to-vertex radius.  A query first scores the triangle with the
    nearest centroid, which bounds the true distance from above; every
    triangle that could beat that bound has its centroid inside a ball of
    radius ``bound + max_radius`` and is then tested exactly.  Results are
    identical to a scan over all triangles.
    """

    _CHUNK = 400_000  # candidate pairs per vectorised batch

    def __init__(self, mesh: TriangleMesh):
        if len(mesh) == 0:
            raise MeshError("empty mesh")
        self.mesh = mesh
        tri = mesh.vertices[mesh.triangles]
        self._a, self._b, self._c = tri[:, 0], tri[:, 1], tri[:, 2]
        self._centroids = tri.mean(axis=1)
        self._radius = np.linalg.norm(tri - self._centroids[:, None, :], axis=2).max()
        self._tree = cKDTree(self._centroids)

    def _exact(self, q, tids):
        return closest_on_triangles(q, self._a[tids], self._b[tids], self._c[tids])

    def query(self, queries) -> ClosestPoints:
        q = np.atleast_2d(np.asarray(queries, dtype=float))
        m = len(q)
        _, nearest = self._tree.query(q)
        pts0, _ = self._exact(q, nearest)
        bound = np.linalg.norm(q - pts0, axis=1)
        radius = bound + self._radius
        radius = radius + 1e-9 * (1.0 + radius)
        cand = self._tree.query_ball_point(q, radius)

        best_d2 = np.full(m, np.inf)
        best_t = np.zeros(m, dtype=np.int64)
        best_p = np.zeros((m, 3))
        best_w = np.zeros((m, 3))

        counts = np.fromiter(map(len, cand), dtype=np.int64, count=m)
        start = 0
        while start < m:
            stop = start
            total = 0
            while stop < m and (total == 0 or total + counts[stop] <= self._CHUNK):
                total += counts[stop]
                stop += 1
            qi = np.repeat(np.arange(start, stop), counts[start:stop])
            ti = np.fromiter(chain.from_iterable(cand[start:stop]), dtype=np.int64, count=total)
            p, w = self._exact(q[qi], ti)
            d2 = np.einsum("ij,ij->i", q[qi] - p, q[qi] - p)
            # per query: smallest distance, ties to the lowest triangle id
            order = np.lexsort((ti, d2, qi))
            first = np.ones(len(order), dtype=bool)
            first[1:] = qi[order][1:] != qi[order][:-1]
            sel = order[first]
            rows = qi[sel]
            best_d2[rows] = d2[sel]
            best_t[rows] = ti[sel]
            best_p[rows] = p[sel]
            best_w[rows] = w[sel]
            start = stop

        vn = self.mesh.vertex_normals[self.mesh.triangles[best_t]]
        normals = np.einsum("ij,ijk->ik", best_w, vn)
        normals /= np.linalg.norm(normals, axis=1)[:, None]
        dist = np.linalg.norm(q - best_p, axis=1)
        return ClosestPoints(best_p, normals, dist, best_t, best_w)


def build_spatial_index(mesh: TriangleMesh) -> SpatialIndex:
    return SpatialIndex(mesh)


def closest_point(index: SpatialIndex, query) -> ClosestPointResult:
    return index.query(np.asarray(query, dtype=float)[None, :])[0]


def closest_points(index: SpatialIndex, queries) -> ClosestPoints:
    return index.query(queries)


def closest_points_posed(index: SpatialIndex, queries, pose: RigidTransform) -> ClosestPoints:
    """Closest points on the mesh after it is moved by ``pose``.

    Queries are pulled back into the mesh frame, so one index serves every pose.
    """
    local = apply_transform(invert(pose), queries)
    res = index.query(local)
    return ClosestPoints(pose.apply(res.points), pose.apply_vectors(res.normals),
                         res.distances, res.triangle_ids, res.barycentric)
