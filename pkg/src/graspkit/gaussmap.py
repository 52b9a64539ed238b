"""Vertex-Gaussian binding and topology regularization.

Every mesh vertex is bound one-to-one to a Gaussian carrying position, scale,
color, opacity and orientation.  A frozen K-nearest-neighbor stencil defines
a graph Laplacian ``L(x) = x - sum_k w_k x[j_k]`` used to keep positions,
colors and scales locally smooth during optimization.  The stencil is built
once at binding time and never rebuilt as positions move, which keeps the
regularizer smooth and its gradient exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import KnnIndex, TriMesh, build_knn

OBJECT_MIN_OPACITY = 0.5
HAND_MIN_OPACITY = 1.0
DEFAULT_NEIGHBORS = 8


class GaussMapError(Exception):
    pass


@dataclass
class GaussianSet:
    """Per-element Gaussian attributes, all arrays sharing length N.

    ``min_opacity`` is the per-set policy floor (0.5 for objects, 1.0 for
    hands) enforced at construction.
    """

    positions: np.ndarray
    scales: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    orientations: np.ndarray
    min_opacity: float = 0.0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        n = len(self.positions)
        self.scales = np.asarray(self.scales, dtype=float).reshape(n, 3)
        self.colors = np.asarray(self.colors, dtype=float).reshape(n, 3)
        self.opacities = np.asarray(self.opacities, dtype=float).reshape(n)
        self.orientations = np.asarray(self.orientations, dtype=float).reshape(n, 4)
        if np.any(self.scales <= 0):
            raise GaussMapError("scales must be strictly positive")
        if np.any(self.opacities < self.min_opacity - 1e-12) or np.any(self.opacities > 1 + 1e-12):
            raise GaussMapError(
                f"opacities must lie in [{self.min_opacity}, 1]"
            )
        qn = np.linalg.norm(self.orientations, axis=1)
        if np.any(np.abs(qn - 1.0) > 1e-6):
            raise GaussMapError("orientation quaternions must be unit length")

    def __len__(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class VertexGaussianMap:
    """Identity pairing vertex i <-> Gaussian i over one mesh."""

    mesh: TriMesh
    gaussians: GaussianSet

    def __post_init__(self):
        if self.mesh.n_vertices != len(self.gaussians):
            raise GaussMapError("vertex count must equal Gaussian count")


@dataclass(frozen=True)
class LaplacianStencil:
    """Frozen K-nearest-neighbor adjacency: (N, K) indices and weights.

    Weight rows are nonnegative and sum to 1; no row contains its own index.
    """

    neighbors: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nb = np.asarray(self.neighbors, dtype=np.int64)
        w = np.asarray(self.weights, dtype=float)
        if nb.shape != w.shape:
            raise GaussMapError("neighbor and weight shapes differ")
        if np.any(nb == np.arange(len(nb))[:, None]):
            raise GaussMapError("stencil row contains its own index")
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-9):
            raise GaussMapError("weight rows must be nonnegative and sum to 1")
        object.__setattr__(self, "neighbors", nb)
        object.__setattr__(self, "weights", w)

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]


def _mean_incident_edge_length(mesh: TriMesh) -> np.ndarray:
    v, f = mesh.vertices, mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    lengths = np.linalg.norm(v[edges[:, 0]] - v[edges[:, 1]], axis=1)
    total = np.zeros(len(v))
    count = np.zeros(len(v))
    for c in range(2):
        np.add.at(total, edges[:, c], lengths)
        np.add.at(count, edges[:, c], 1.0)
    isolated = count == 0
    mean = total / np.where(isolated, 1.0, count)
    # Isolated vertices fall back to the global mean so scales stay positive.
    fallback = lengths.mean() if len(lengths) else 1.0
    mean[isolated] = fallback
    return mean


def bind_vertices(mesh: TriMesh, min_opacity: float) -> tuple[GaussianSet, VertexGaussianMap]:
    """Create one Gaussian per mesh vertex.

    Positions copy the vertices exactly; scales are isotropic at half the
    mean incident-edge length; colors start mid-gray, opacities at the policy
    floor, orientations at identity.
    """
    if mesh.n_vertices == 0:
        raise GaussMapError("cannot bind an empty mesh")
    n = mesh.n_vertices
    scale = 0.5 * _mean_incident_edge_length(mesh)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    gs = GaussianSet(
        positions=mesh.vertices.copy(),
        scales=np.repeat(scale[:, None], 3, axis=1),
        colors=np.full((n, 3), 0.5),
        opacities=np.full(n, float(min_opacity)),
        orientations=quats,
        min_opacity=float(min_opacity),
    )
    return gs, VertexGaussianMap(mesh=mesh, gaussians=gs)


def build_stencil(
    points: np.ndarray, k: int = DEFAULT_NEIGHBORS, inverse_distance: bool = False
) -> LaplacianStencil:
    """K-nearest-neighbor stencil over ``points`` (self excluded).

    Weights are uniform 1/K by default; ``inverse_distance`` switches to
    1/d weights normalized per row (uniform weights keep the Laplacian's
    translation null space exact, so they are the default).
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(pts)
    if not 1 <= k <= n - 1:
        raise GaussMapError(f"k={k} invalid for {n} points")
    index = build_knn(pts)
    from .geometry import _pairwise_sq_dists

    neighbors = np.empty((n, k), dtype=np.int64)
    dists = np.empty((n, k))
    chunk = 2048
    for s in range(0, n, chunk):
        block = pts[s : s + chunk]
        d2 = _pairwise_sq_dists(block, index)
        rows = np.arange(len(block))
        d2[rows, np.arange(s, s + len(block))] = np.inf  # exclude self
        # stable argsort resolves distance ties toward the lowest index
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        neighbors[s : s + len(block)] = order
        dists[s : s + len(block)] = np.sqrt(d2[rows[:, None], order])
    if inverse_distance:
        inv = 1.0 / np.maximum(dists, 1e-12)
        weights = inv / inv.sum(axis=1, keepdims=True)
    else:
        weights = np.full((n, k), 1.0 / k)
    return LaplacianStencil(neighbors=neighbors, weights=weights)


def laplacian(x: np.ndarray, stencil: LaplacianStencil) -> np.ndarray:
    """Graph Laplacian: x minus the weighted average of each row's neighbors."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
        return (x - np.einsum("nk,nkd->nd", stencil.weights, x[stencil.neighbors]))[:, 0]
    return x - np.einsum("nk,nkd->nd", stencil.weights, x[stencil.neighbors])


def laplacian_transpose(y: np.ndarray, stencil: LaplacianStencil) -> np.ndarray:
    """Apply L^T: needed for exact gradients of the quadratic loss."""
    y = np.asarray(y, dtype=float)
    out = y.copy()
    # scatter-add of -w_k * y[row] into row j_k; np.add.at is deterministic
    contrib = stencil.weights[..., None] * y[:, None, :]
    np.subtract.at(out, stencil.neighbors.ravel(), contrib.reshape(-1, y.shape[1]))
    return out


def laplacian_loss(
    positions: np.ndarray,
    reference_vertices: np.ndarray,
    colors: np.ndarray,
    scales: np.ndarray,
    weights: tuple[float, float, float],
    stencil: LaplacianStencil,
) -> tuple[float, dict[str, np.ndarray]]:
    """Topology regularizer and its exact gradients.

    loss = w_pos * |L(mu) - L(V)|^2 + w_col * |L(c)|^2 + w_scl * |L(s)|^2
    (sums of squared entries).  The operator is linear, so the gradients are
    2 w L^T applied to each residual.

    Returns (loss, {"positions": ..., "colors": ..., "scales": ...}).
    """
    mu = np.asarray(positions, dtype=float)
    v = np.asarray(reference_vertices, dtype=float)
    c = np.asarray(colors, dtype=float)
    s = np.asarray(scales, dtype=float)
    if mu.shape != v.shape or len(mu) != len(c) or len(mu) != len(s):
        raise GaussMapError("laplacian_loss inputs disagree in shape")
    w_pos, w_col, w_scl = weights
    r_pos = laplacian(mu, stencil) - laplacian(v, stencil)
    r_col = laplacian(c, stencil)
    r_scl = laplacian(s, stencil)
    loss = (
        w_pos * float(np.sum(r_pos * r_pos))
        + w_col * float(np.sum(r_col * r_col))
        + w_scl * float(np.sum(r_scl * r_scl))
    )
    grads = {
        "positions": 2.0 * w_pos * laplacian_transpose(r_pos, stencil),
        "colors": 2.0 * w_col * laplacian_transpose(r_col, stencil),
        "scales": 2.0 * w_scl * laplacian_transpose(r_scl, stencil),
    }
    return loss, grads


_GAUSSIAN_PROPS = (
    "x", "y", "z",
    "scale_x", "scale_y", "scale_z",
    "red", "green", "blue",
    "opacity",
    "quat_w", "quat_x", "quat_y", "quat_z",
)


def save_gaussians(gs: GaussianSet, path: str | Path) -> None:
    """Write a GaussianSet as binary little-endian PLY.

    One vertex element with double properties in the documented order:
    x y z, scale_x/y/z, red/green/blue, opacity, quat_w/x/y/z.
    """
    path = Path(path)
    n = len(gs)
    with path.open("wb") as fh:
        header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
        header += [f"property double {p}" for p in _GAUSSIAN_PROPS]
        header += [f"comment min_opacity {gs.min_opacity!r}", "end_header", ""]
        fh.write("\n".join(header).encode("ascii"))
        block = np.concatenate(
            [gs.positions, gs.scales, gs.colors, gs.opacities[:, None], gs.orientations],
            axis=1,
        )
        fh.write(block.astype("<f8").tobytes())


def load_gaussians(path: str | Path) -> GaussianSet:
    """Read a GaussianSet written by :func:`save_gaussians`."""
    path = Path(path)
    with path.open("rb") as fh:
        if fh.readline().strip() != b"ply":
            raise GaussMapError(f"{path}: not a PLY file")
        n = None
        props: list[str] = []
        min_opacity = 0.0
        while True:
            line = fh.readline()
            if not line:
                raise GaussMapError(f"{path}: truncated header")
            tokens = line.decode("ascii").split()
            if not tokens:
                continue
            if tokens[0] == "format" and tokens[1] != "binary_little_endian":
                raise GaussMapError(f"{path}: expected binary_little_endian")
            elif tokens[0] == "element":
                n = int(tokens[2])
            elif tokens[0] == "property":
                if tokens[1] != "double":
                    raise GaussMapError(f"{path}: expected double properties")
                props.append(tokens[2])
            elif tokens[0] == "comment" and len(tokens) >= 3 and tokens[1] == "min_opacity":
                min_opacity = float(tokens[2])
            elif tokens[0] == "end_header":
                break
        if n is None or tuple(props) != _GAUSSIAN_PROPS:
            raise GaussMapError(f"{path}: unexpected Gaussian PLY layout")
        data = np.frombuffer(fh.read(8 * len(props) * n), dtype="<f8").reshape(n, len(props))
    return GaussianSet(
        positions=data[:, 0:3],
        scales=data[:, 3:6],
        colors=data[:, 6:9],
        opacities=data[:, 9],
        orientations=data[:, 10:14],
        min_opacity=min_opacity,
    )
