"""Mesh and point-cloud kernel.

Triangle meshes, exact nearest-neighbor queries, farthest point sampling,
alpha-shape surface reconstruction, longest-edge upsampling, and the
inside/outside test used by the penetration and reposition losses.

Conventions
-----------
* All geometry lives in one consistent unit (meters unless stated); nothing
  here rescales implicitly.
* Nearest-neighbor ties break toward the lowest point index, everywhere.
* The alpha shape keeps a Delaunay tetrahedron iff its circumradius is
  <= ``alpha_radius``.  Libraries that parameterize by ``1/alpha`` need the
  reciprocal; we expose the radius directly to avoid the ambiguity.
* Inside/outside is the nearest-vertex-normal sign test: a point is inside
  when the outward normal at the nearest surface vertex points away from it.
"""

from __future__ import annotations

import heapq
import warnings
from dataclasses import dataclass, field

import numpy as np


class GeometryError(Exception):
    """Base class for geometry failures."""


class DegenerateInputError(GeometryError):
    """Input points are too degenerate for the requested reconstruction."""


class EmptyAlphaComplexError(GeometryError):
    """No tetrahedron survived the circumradius filter (alpha too small)."""


@dataclass(frozen=True)
class TriMesh:
    """Triangle surface: (V, 3) float vertices and (F, 3) int faces."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=float).reshape(-1, 3))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        if not np.all(np.isfinite(v)):
            raise GeometryError("mesh vertices contain non-finite coordinates")
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise GeometryError(
                    f"face index out of range: valid [0, {len(v) - 1}], "
                    f"got min {f.min()} max {f.max()}"
                )
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise GeometryError("a face repeats a vertex index")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)


@dataclass(frozen=True)
class ConciseMesh:
    """Low-count surface with trusted per-vertex outward normals.

    ``source_indices`` maps each vertex back into the point set the surface
    was reconstructed from.  ``watertight`` records the edge-manifold check
    run at construction time.
    """

    mesh: TriMesh
    normals: np.ndarray
    source_indices: np.ndarray
    watertight: bool

    def __post_init__(self):
        n = np.asarray(self.normals, dtype=float).reshape(-1, 3)
        if len(n) != self.mesh.n_vertices:
            raise GeometryError("normal count must equal vertex count")
        lengths = np.linalg.norm(n, axis=1)
        if np.any(np.abs(lengths - 1.0) > 1e-6):
            raise GeometryError("concise-mesh normals must be unit length")
        object.__setattr__(self, "normals", n)
        object.__setattr__(
            self, "source_indices", np.asarray(self.source_indices, dtype=np.int64).ravel()
        )

    @property
    def vertices(self) -> np.ndarray:
        return self.mesh.vertices


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        p = np.ascontiguousarray(np.asarray(self.points, dtype=float).reshape(-1, 3))
        if not np.all(np.isfinite(p)):
            raise GeometryError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", p)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class KnnIndex:
    """Exact nearest-neighbor index over a fixed point set.

    Queries are evaluated with chunked vectorized distance computation, so
    results are identical to brute force by construction; ties break toward
    the lowest index.  At the point counts this toolkit targets (a few
    thousand) this is faster than paying tree-build cost per iteration and
    sidesteps tie-ordering differences between tree libraries.
    """

    points: np.ndarray
    _sq_norms: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.points = np.ascontiguousarray(np.asarray(self.points, dtype=float).reshape(-1, 3))
        self._sq_norms = np.einsum("ij,ij->i", self.points, self.points)

    def __len__(self) -> int:
        return len(self.points)


def build_knn(points: PointCloud | np.ndarray) -> KnnIndex:
    """Build an exact nearest-neighbor index over a point set."""
    pts = points.points if isinstance(points, PointCloud) else points
    return KnnIndex(pts)


def _pairwise_sq_dists(queries: np.ndarray, index: KnnIndex) -> np.ndarray:
    # |q - p|^2 expanded; clamp tiny negatives from cancellation.
    d2 = (
        np.einsum("ij,ij->i", queries, queries)[:, None]
        - 2.0 * queries @ index.points.T
        + index._sq_norms[None, :]
    )
    np.maximum(d2, 0.0, out=d2)
    return d2


def query_knn(index: KnnIndex, query: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k nearest stored points for one query: (indices, distances), ascending.

    Ties in distance resolve to the lowest stored index.
    """
    if k > len(index):
        raise GeometryError(f"k={k} exceeds point count {len(index)}")
    q = np.asarray(query, dtype=float).reshape(1, 3)
    d2 = _pairwise_sq_dists(q, index)[0]
    order = np.lexsort((np.arange(len(d2)), d2))[:k]
    return order, np.sqrt(d2[order])


def nearest_on_set(index: KnnIndex, points: np.ndarray, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Nearest stored point for every row of ``points``.

    Returns (indices, distances); ties break to the lowest stored index.
    Empty input yields empty arrays.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(pts)
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=float)
    for start in range(0, n, chunk):
        block = pts[start : start + chunk]
        d2 = _pairwise_sq_dists(block, index)
        # argmin returns the first (lowest-index) minimum, which is the tie rule.
        best = np.argmin(d2, axis=1)
        idx[start : start + len(block)] = best
        dist[start : start + len(block)] = np.sqrt(d2[np.arange(len(block)), best])
    return idx, dist


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted per-vertex normals, unit length.

    Zero-area faces contribute nothing.  Isolated vertices (or vertices whose
    incident faces cancel exactly) get a zero vector and trigger a warning.
    """
    if mesh.n_faces < 1:
        raise GeometryError("vertex_normals requires at least one face")
    v, f = mesh.vertices, mesh.faces
    # Cross product of edge vectors has magnitude 2*area: the area weighting
    # is free by summing unnormalized face normals.
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    acc = np.zeros_like(v)
    for c in range(3):
        np.add.at(acc, f[:, c], fn)
    lengths = np.linalg.norm(acc, axis=1)
    degenerate = lengths < 1e-20
    if np.any(degenerate):
        warnings.warn(
            f"{int(degenerate.sum())} vertices have no usable incident faces; "
            "their normals are zero",
            stacklevel=2,
        )
    safe = np.where(degenerate, 1.0, lengths)
    out = acc / safe[:, None]
    out[degenerate] = 0.0
    return out


def farthest_point_sample(
    points: PointCloud | np.ndarray, n: int, start: int = 0
) -> np.ndarray:
    """Greedy farthest point sampling: ``n`` indices, deterministic in ``start``.

    Each new index maximizes the minimum distance to the already-selected set;
    distance ties resolve to the lowest index.
    """
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=float)
    pts = pts.reshape(-1, 3)
    m = len(pts)
    if n > m:
        raise GeometryError(f"cannot sample {n} points from {m}")
    if not 0 <= start < m:
        raise GeometryError(f"start index {start} out of range")
    selected = np.empty(n, dtype=np.int64)
    selected[0] = start
    min_d2 = np.einsum("ij,ij->i", pts - pts[start], pts - pts[start])
    for i in range(1, n):
        nxt = int(np.argmax(min_d2))  # first max = lowest index on ties
        selected[i] = nxt
        diff = pts - pts[nxt]
        np.minimum(min_d2, np.einsum("ij,ij->i", diff, diff), out=min_d2)
    return selected


def _tet_circumradii(points: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Circumradius of each tetrahedron; +inf where the solve is unreliable."""
    a = points[tets[:, 0]]
    rows = np.stack(
        [points[tets[:, 1]] - a, points[tets[:, 2]] - a, points[tets[:, 3]] - a], axis=1
    )
    rhs = 0.5 * np.einsum("tij,tij->ti", rows, rows)
    M = rows  # solving M x = rhs with x = circumcenter - a
    det = np.linalg.det(M)
    edge = np.linalg.norm(rows, axis=2).max(axis=1)
    # det(M) = 6 * signed volume; treat slivers below a relative floor as
    # degenerate so their (numerically meaningless) radius never passes.
    ok = np.abs(det) > 1e-12 * np.maximum(edge, 1e-300) ** 3
    radii = np.full(len(tets), np.inf)
    if np.any(ok):
        centers = np.linalg.solve(M[ok], rhs[ok][..., None])[..., 0]
        radii[ok] = np.linalg.norm(centers, axis=1)
    return radii


def _boundary_faces(tets: np.ndarray, keep: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Outward-oriented boundary triangles of the kept tetrahedra."""
    kept = tets[keep]
    # Opposite-vertex order: face i omits vertex i.
    face_of = [(1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)]
    tris = []
    opposite = []
    for omit, (i, j, k) in enumerate(face_of):
        tris.append(kept[:, [i, j, k]])
        opposite.append(kept[:, omit])
    tris = np.concatenate(tris, axis=0)
    opposite = np.concatenate(opposite, axis=0)
    key = np.sort(tris, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    boundary = counts[inverse] == 1
    tris, opposite = tris[boundary], opposite[boundary]
    # Orient each face so its normal points away from the tet interior
    # (the opposite vertex sits on the inside).
    a, b, c = points[tris[:, 0]], points[tris[:, 1]], points[tris[:, 2]]
    n = np.cross(b - a, c - a)
    inward = np.einsum("ij,ij->i", n, points[opposite] - a) > 0
    tris[inward] = tris[inward][:, [0, 2, 1]]
    return tris


def alpha_shape(points: PointCloud | np.ndarray, alpha_radius: float) -> ConciseMesh:
    """Alpha-shape boundary surface of a 3D point set.

    Keeps every Delaunay tetrahedron with circumradius <= ``alpha_radius``
    and returns the boundary of their union, oriented outward, with
    per-vertex normals.  ``alpha_radius`` is a length in scene units (see the
    module docstring for the convention note).
    """
    from scipy.spatial import Delaunay, QhullError

    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=float)
    pts = pts.reshape(-1, 3)
    if len(pts) < 4:
        raise DegenerateInputError("alpha_shape needs at least 4 points")
    if alpha_radius <= 0:
        raise GeometryError("alpha_radius must be positive")
    try:
        delaunay = Delaunay(pts)
    except QhullError as exc:
        raise DegenerateInputError(f"Delaunay triangulation failed: {exc}") from exc
    tets = delaunay.simplices
    if tets.size == 0:
        raise DegenerateInputError("input is degenerate (coplanar or duplicate points)")
    radii = _tet_circumradii(pts, tets)
    keep = radii <= alpha_radius
    if not np.any(keep):
        raise EmptyAlphaComplexError(
            f"no tetrahedron has circumradius <= {alpha_radius} "
            f"(smallest is {radii.min():.6g})"
        )
    tris = _boundary_faces(tets, keep, pts)
    used = np.unique(tris)
    remap = np.full(len(pts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    mesh = TriMesh(pts[used], remap[tris])
    normals = vertex_normals(mesh)
    lengths = np.linalg.norm(normals, axis=1)
    # A vertex with exactly cancelling incident faces would break the unit
    # invariant; resolve it with an arbitrary fixed direction (rare, pinched).
    bad = lengths < 0.5
    if np.any(bad):
        normals[bad] = (0.0, 0.0, 1.0)
    tight, _ = is_watertight(mesh)
    return ConciseMesh(mesh=mesh, normals=normals, source_indices=used, watertight=tight)


def upsample_to_target(
    mesh: TriMesh, target: int
) -> tuple[TriMesh, dict[int, tuple[int, int, float]]]:
    """Split the longest edge at its midpoint until vertex count >= target.

    Every split adds exactly one vertex, so the target is hit exactly.
    Existing vertices never move; each new vertex lies on the segment between
    its parents.  The parent map sends a new vertex index to
    ``(endpoint_a, endpoint_b, t)`` with position ``(1-t)*a + t*b`` (t = 0.5).
    Longest-edge ties break to the lexicographically smallest (min, max)
    index pair.
    """
    if target < mesh.n_vertices:
        raise GeometryError(
            f"target {target} below current vertex count {mesh.n_vertices}"
        )
    verts = [tuple(v) for v in mesh.vertices]
    varr = mesh.vertices
    faces: dict[int, tuple[int, int, int]] = {i: tuple(f) for i, f in enumerate(mesh.faces)}
    next_face_id = len(faces)

    edge_faces: dict[tuple[int, int], set[int]] = {}

    def edge_key(a: int, b: int) -> tuple[int, int]:
        return (a, b) if a < b else (b, a)

    def register(fid: int, f: tuple[int, int, int]):
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            edge_faces.setdefault(edge_key(a, b), set()).add(fid)

    for fid, f in faces.items():
        register(fid, f)

    def length2(a: int, b: int) -> float:
        pa = verts[a]
        pb = verts[b]
        return (pa[0] - pb[0]) ** 2 + (pa[1] - pb[1]) ** 2 + (pa[2] - pb[2]) ** 2

    heap = [(-length2(a, b), a, b) for (a, b) in edge_faces]
    heapq.heapify(heap)
    parent_map: dict[int, tuple[int, int, float]] = {}

    while len(verts) < target:
        if not heap:
            raise GeometryError("mesh has no edges left to split")
        neg_l2, a, b = heapq.heappop(heap)
        key = (a, b)
        if key not in edge_faces or -neg_l2 != length2(a, b):
            continue  # stale heap entry
        mid = len(verts)
        pa, pb = verts[a], verts[b]
        verts.append(((pa[0] + pb[0]) / 2.0, (pa[1] + pb[1]) / 2.0, (pa[2] + pb[2]) / 2.0))
        parent_map[mid] = (a, b, 0.5)
        incident = sorted(edge_faces.pop(key))
        for fid in incident:
            f = faces.pop(fid)
            # Remove the face from its other two edges' incidence sets.
            for ea, eb in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                k2 = edge_key(ea, eb)
                if k2 != key and k2 in edge_faces:
                    edge_faces[k2].discard(fid)
            # Find edge (a, b) in the face regardless of direction, then split
            # preserving orientation.
            for rot in range(3):
                u, v, w = f[rot], f[(rot + 1) % 3], f[(rot + 2) % 3]
                if {u, v} == {a, b}:
                    f1 = (u, mid, w)
                    f2 = (mid, v, w)
                    break
            else:  # pragma: no cover - incidence map guarantees membership
                raise AssertionError("edge not found in incident face")
            for nf in (f1, f2):
                faces[next_face_id] = nf
                register(next_face_id, nf)
                next_face_id += 1
        # Push the new edges (midpoint to endpoints and to opposite vertices).
        new_edges = {edge_key(a, mid), edge_key(mid, b)}
        for fid in range(next_face_id - 2 * len(incident), next_face_id):
            f = faces[fid]
            for ea, eb in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                new_edges.add(edge_key(ea, eb))
        for ea, eb in new_edges:
            if (ea, eb) in edge_faces:
                heapq.heappush(heap, (-length2(ea, eb), ea, eb))

    order = sorted(faces)
    out = TriMesh(np.asarray(verts, dtype=float), np.asarray([faces[i] for i in order]))
    return out, parent_map


def is_inside(point: np.ndarray, mesh: ConciseMesh, index: KnnIndex | None = None) -> bool:
    """Nearest-vertex-normal sign test against a concise mesh.

    True iff the outward normal at the nearest surface vertex points away
    from the query, i.e. dot(n_nearest, point - v_nearest) < 0.
    """
    if index is None:
        index = build_knn(mesh.vertices)
    nearest, _ = query_knn(index, np.asarray(point, dtype=float), 1)
    i = int(nearest[0])
    return float(mesh.normals[i] @ (np.asarray(point, dtype=float) - mesh.vertices[i])) < 0.0


def points_inside(points: np.ndarray, mesh: ConciseMesh, index: KnnIndex | None = None) -> np.ndarray:
    """Vectorized :func:`is_inside` over rows of ``points``."""
    if index is None:
        index = build_knn(mesh.vertices)
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    nearest, _ = nearest_on_set(index, pts)
    d = np.einsum("ij,ij->i", mesh.normals[nearest], pts - mesh.vertices[nearest])
    return d < 0.0


def is_watertight(mesh: TriMesh) -> tuple[bool, int]:
    """Edge-manifold check plus Euler characteristic.

    Watertight iff every undirected edge is shared by exactly two faces with
    opposite directed orientation.  Geometrically degenerate (zero-area)
    faces are excluded from the manifold check but still count toward the
    Euler characteristic V - E + F.
    """
    f = mesh.faces
    if len(f) == 0:
        return False, mesh.n_vertices
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    und = np.sort(edges, axis=1)
    unique_edges = np.unique(und, axis=0)
    euler = mesh.n_vertices - len(unique_edges) + len(f)

    v = mesh.vertices
    areas = np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1)
    live = f[areas > 1e-20]
    if len(live) == 0:
        return False, euler
    directed = np.concatenate([live[:, [0, 1]], live[:, [1, 2]], live[:, [2, 0]]], axis=0)
    dir_keys, dir_counts = np.unique(directed, axis=0, return_counts=True)
    if np.any(dir_counts != 1):
        return False, euler  # duplicated directed edge: inconsistent orientation
    und_keys, und_counts = np.unique(np.sort(directed, axis=1), axis=0, return_counts=True)
    return bool(np.all(und_counts == 2)), euler
