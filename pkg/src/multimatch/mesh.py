"""Triangle meshes and their discrete differential operators.

All operators use the lumped (barycentric) mass matrix and the cotangent
stiffness matrix ``S`` with negative off-diagonal weights and positive
diagonal, so ``S`` and the Laplacian ``L = M^{-1} S`` are positive
semidefinite.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import dijkstra

#: sqrt(area) of every preprocessed shape.
TARGET_SQRT_AREA = 2.0 / 3.0

#: Triangles smaller than this fraction of the total area are rejected.
DEGENERATE_AREA_RATIO = 1e-12


class MeshValidationError(ValueError):
    """A mesh violates one of the structural invariants."""


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable triangle mesh.

    Parameters
    ----------
    vertices : (m, 3) float array
    triangles : (t, 3) int array of indices into ``vertices``
    id : str
        Stable shape identifier, usually the file stem.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    id: str = "mesh"

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        t = np.array(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshValidationError(f"vertices must have shape (m, 3), got {v.shape}")
        if t.size == 0:
            raise MeshValidationError("mesh has no triangles")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshValidationError(f"triangles must have shape (t, 3), got {t.shape}")
        if not np.all(np.isfinite(v)):
            raise MeshValidationError("vertex coordinates must be finite")
        m = len(v)
        bad = np.flatnonzero(np.any((t < 0) | (t >= m), axis=1))
        if bad.size:
            raise MeshValidationError(
                f"triangle {bad[0]} {t[bad[0]].tolist()} has a vertex index out of range [0, {m})"
            )
        rep = np.flatnonzero((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2]))
        if rep.size:
            raise MeshValidationError(f"triangle {rep[0]} {t[rep[0]].tolist()} repeats a vertex")
        used = np.zeros(m, dtype=bool)
        used[t.ravel()] = True
        if not used.all():
            raise MeshValidationError(f"vertex {np.flatnonzero(~used)[0]} is not referenced by any triangle")
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def with_vertices(self, vertices, id=None) -> "Mesh":
        """Same connectivity, new vertex positions."""
        return Mesh(vertices, self.triangles, self.id if id is None else id)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices).tobytes())
        h.update(np.ascontiguousarray(self.triangles).tobytes())
        return h.hexdigest()

    def edges(self) -> np.ndarray:
        """Unique undirected edges as a sorted (e, 2) array."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)


def triangle_areas(vertices, triangles) -> np.ndarray:
    v = np.asarray(vertices, dtype=np.float64)
    t = np.asarray(triangles)
    cross = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    return 0.5 * np.linalg.norm(cross, axis=1)


def surface_area(mesh: Mesh) -> float:
    return float(triangle_areas(mesh.vertices, mesh.triangles).sum())


def check_nondegenerate(mesh: Mesh) -> np.ndarray:
    """Return triangle areas, raising if any triangle is (near) degenerate."""
    areas = triangle_areas(mesh.vertices, mesh.triangles)
    total = areas.sum()
    if not total > 0:
        raise MeshValidationError(f"mesh {mesh.id!r} has zero surface area")
    bad = np.flatnonzero(areas < DEGENERATE_AREA_RATIO * total)
    if bad.size:
        raise MeshValidationError(
            f"mesh {mesh.id!r}: triangle {bad[0]} {mesh.triangles[bad[0]].tolist()} is degenerate "
            f"(area {areas[bad[0]]:.3g})"
        )
    return areas


def preprocess(mesh: Mesh) -> Mesh:
    """Center the mean vertex at the origin and rescale to sqrt(area) = 2/3."""
    area = surface_area(mesh)
    if not area > 0:
        raise MeshValidationError(f"mesh {mesh.id!r} has zero surface area")
    v = mesh.vertices - mesh.vertices.mean(axis=0)
    v = v * (TARGET_SQRT_AREA / np.sqrt(area))
    # second centering pass removes the rounding left by the first
    v = v - v.mean(axis=0)
    return mesh.with_vertices(v)


def mass_matrix(mesh: Mesh) -> np.ndarray:
    """Lumped vertex areas: one third of every incident triangle's area.

    Returns the diagonal as an (m,) array.
    """
    areas = check_nondegenerate(mesh)
    mass = np.zeros(mesh.n_vertices)
    for c in range(3):
        np.add.at(mass, mesh.triangles[:, c], areas / 3.0)
    return mass


def _cotangents(vertices, triangles) -> np.ndarray:
    """(t, 3) cotangent of the angle at each triangle corner."""
    v = vertices[triangles]
    cots = np.empty((len(triangles), 3))
    for c in range(3):
        a = v[:, (c + 1) % 3] - v[:, c]
        b = v[:, (c + 2) % 3] - v[:, c]
        cots[:, c] = np.einsum("ij,ij->i", a, b) / np.linalg.norm(np.cross(a, b), axis=1)
    return cots


def stiffness_matrix(mesh: Mesh) -> sparse.csr_matrix:
    """Cotangent stiffness matrix ``S`` (positive semidefinite).

    Off-diagonal ``S[i, j] = -1/2 * sum(cot(alpha))`` over the angles opposite
    edge (i, j); the diagonal makes every row sum to zero.
    """
    check_nondegenerate(mesh)
    t = mesh.triangles
    cots = _cotangents(mesh.vertices, t)
    m = mesh.n_vertices
    rows, cols, vals = [], [], []
    for c in range(3):
        i, j = t[:, (c + 1) % 3], t[:, (c + 2) % 3]
        w = -0.5 * cots[:, c]
        rows += [i, j]
        cols += [j, i]
        vals += [w, w]
    off = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m)
    ).tocsr()
    off.sum_duplicates()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    return (off + sparse.diags(diag)).tocsr()


def vertex_normals(mesh: Mesh) -> np.ndarray:
    """Area-weighted unit vertex normals following the stored winding."""
    return normals_from(mesh.vertices, mesh.triangles, name=mesh.id)


def normals_from(vertices, triangles, strict=True, name="mesh") -> np.ndarray:
    """Vertex normals for raw arrays (e.g. smoothed or displaced coordinates).

    With ``strict=False`` vertices whose accumulated normal vanishes get a
    zero vector instead of raising.
    """
    v = np.asarray(vertices, dtype=np.float64)
    t = np.asarray(triangles)
    # the unnormalized cross product is already area weighted (twice the area)
    fn = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    acc = np.zeros_like(v)
    for c in range(3):
        np.add.at(acc, t[:, c], fn)
    norms = np.linalg.norm(acc, axis=1)
    scale = np.abs(v).max() if v.size else 1.0
    bad = norms <= 1e-300 + 1e-14 * scale**2
    if bad.any():
        if strict:
            raise MeshValidationError(
                f"mesh {name!r}: accumulated normal vanishes at vertex {np.flatnonzero(bad)[0]}"
            )
        norms = np.where(bad, 1.0, norms)
        acc[bad] = 0.0
    return acc / norms[:, None]


def edge_graph(vertices, edges, n_vertices=None) -> sparse.csr_matrix:
    """Symmetric sparse adjacency with Euclidean edge lengths."""
    vertices = np.asarray(vertices, dtype=np.float64)
    edges = np.asarray(edges)
    m = len(vertices) if n_vertices is None else n_vertices
    lengths = np.linalg.norm(vertices[edges[:, 0]] - vertices[edges[:, 1]], axis=1)
    g = sparse.coo_matrix((lengths, (edges[:, 0], edges[:, 1])), shape=(m, m))
    return (g + g.T).tocsr()


def graph_distances(graph: sparse.csr_matrix, sources) -> np.ndarray:
    """Multi-source Dijkstra; unreachable vertices come back as ``inf``."""
    sources = np.atleast_1d(np.asarray(sources, dtype=np.int64))
    if sources.size == 0:
        raise ValueError("sources must be non-empty")
    d = dijkstra(graph, directed=False, indices=sources, min_only=True)
    n_inf = int(np.isinf(d).sum())
    if n_inf:
        warnings.warn(f"{n_inf} vertices are unreachable from the sources", RuntimeWarning, stacklevel=3)
    return d


def geodesic_distances(mesh: Mesh, sources) -> np.ndarray:
    """Approximate geodesic distances from ``sources`` along mesh edges.

    Edge-graph Dijkstra overestimates true surface geodesics (paths are
    restricted to edges), typically by a few percent on regular meshes.
    """
    return graph_distances(edge_graph(mesh.vertices, mesh.edges()), sources)


def all_pairs_geodesics(mesh: Mesh, sources=None) -> np.ndarray:
    """Row ``r`` holds the distances from ``sources[r]`` to every vertex."""
    g = edge_graph(mesh.vertices, mesh.edges())
    if sources is None:
        sources = np.arange(mesh.n_vertices)
    return dijkstra(g, directed=False, indices=np.asarray(sources, dtype=np.int64))
