"""Procedural test shapes: icospheres, planar grids and bent cylinders."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .mesh import Mesh


def icosphere(subdivisions: int = 4, radius: float = 1.0) -> Mesh:
    """Subdivided icosahedron projected onto a sphere.

    ``subdivisions=4`` gives 2562 vertices.
    """
    p = (1.0 + 5 ** 0.5) / 2.0
    v = [(-1, p, 0), (1, p, 0), (-1, -p, 0), (1, -p, 0),
         (0, -1, p), (0, 1, p), (0, -1, -p), (0, 1, -p),
         (p, 0, -1), (p, 0, 1), (-p, 0, -1), (-p, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
         (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
         (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
         (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(x, dtype=np.float64) / np.linalg.norm(x) for x in v]
    faces = list(f)
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return Mesh(np.array(verts) * radius, np.array(faces), id=f"icosphere{subdivisions}")


def grid(nx: int = 5, ny: int = 5, size: float = 1.0, jitter: float = 0.0, seed: int = 0) -> Mesh:
    """Planar triangulated grid in z = 0 with counter-clockwise winding."""
    rng = np.random.default_rng(seed)
    xs, ys = np.meshgrid(np.linspace(0, size, nx), np.linspace(0, size, ny), indexing="xy")
    v = np.stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)], axis=1)
    if jitter:
        interior = (xs.ravel() > 0) & (xs.ravel() < size) & (ys.ravel() > 0) & (ys.ravel() < size)
        v[interior, :2] += rng.uniform(-jitter, jitter, (interior.sum(), 2)) * size / (nx - 1)
    tris = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            b, c, d = a + 1, a + nx, a + nx + 1
            tris += [(a, b, d), (a, d, c)]
    return Mesh(v, np.array(tris), id=f"grid{nx}x{ny}")


def cylinder(n_around: int = 24, n_along: int = 32, radius: float = 0.25, length: float = 2.0,
             capped: bool = True, taper: float = 0.0, wobble: float = 0.0) -> Mesh:
    """Closed (capped) cylinder along the x axis, centered at the origin.

    Rings are triangulated with alternating diagonals; each cap is a fan
    around a single center vertex. ``taper`` scales the radius linearly
    from ``1 - taper / 2`` to ``1 + taper / 2`` along the axis, and
    ``wobble`` modulates it around the axis by ``cos t + sin 2t / 2``, a
    profile without rotational or mirror symmetry.
    """
    theta = 2 * np.pi * np.arange(n_around) / n_around
    xs = np.linspace(-length / 2, length / 2, n_along)
    profile = 1.0 + wobble * (np.cos(theta) + 0.5 * np.sin(2 * theta))
    v = [(x, r * np.cos(t), r * np.sin(t)) for x in xs
         for t, r in zip(theta, radius * (1.0 + taper * x / length) * profile)]
    tris = []
    for r in range(n_along - 1):
        for s in range(n_around):
            a = r * n_around + s
            b = r * n_around + (s + 1) % n_around
            c, d = a + n_around, b + n_around
            # outward facing winding for a surface around +x
            if (r + s) % 2 == 0:
                tris += [(a, b, d), (a, d, c)]
            else:
                tris += [(a, b, c), (b, d, c)]
    if capped:
        v.append((-length / 2, 0.0, 0.0))
        v.append((length / 2, 0.0, 0.0))
        c0, c1 = len(v) - 2, len(v) - 1
        last = (n_along - 1) * n_around
        for s in range(n_around):
            tris.append((c0, (s + 1) % n_around, s))
            tris.append((c1, last + s, last + (s + 1) % n_around))
    return Mesh(np.array(v), np.array(tris), id="cylinder")


def bend(mesh: Mesh, angle: float, length: float = 2.0) -> Mesh:
    """Bend a mesh lying along the x axis into a circular arc in the x-y plane.

    The centerline x in [-length/2, length/2] is mapped onto an arc of total
    turning angle ``angle``; cross sections stay orthogonal to the arc, so
    the deformation is near-isometric for thin shapes.
    """
    v = np.array(mesh.vertices)
    if abs(angle) < 1e-12:
        return mesh.with_vertices(v)
    R = length / angle
    s = v[:, 0]
    phi = s / R
    rho = R - v[:, 1]
    out = np.stack([rho * np.sin(phi), R - rho * np.cos(phi), v[:, 2]], axis=1)
    return mesh.with_vertices(out)


def bent_cylinder_family(n_shapes: int = 5, max_angle: float = np.pi, seed: int = 0,
                         n_around: int = 20, n_along: int = 30, noise: float = 0.003,
                         taper: float = 0.0, wobble: float = 0.0) -> list:
    """Cylinders bent progressively from straight to ``max_angle``.

    All members share the vertex order, so the ground-truth map between any
    two of them is the identity. ``taper`` and ``wobble`` (see
    :func:`cylinder`) optionally remove the intrinsic symmetries of the
    straight member. ``seed`` controls small vertex noise and a random
    rotation of the bending plane about the cylinder axis.
    """
    rng = np.random.default_rng(seed)
    base = cylinder(n_around=n_around, n_along=n_along, taper=taper, wobble=wobble)
    a = rng.uniform(0, 2 * np.pi)
    rot = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
    # rotating the cross section before bending changes which side folds inward
    base = base.with_vertices(base.vertices @ rot.T)
    shapes = []
    for i, ang in enumerate(np.linspace(0.0, max_angle, n_shapes)):
        m = bend(base, ang)
        v = m.vertices + rng.normal(scale=noise * 0.25, size=m.vertices.shape)
        shapes.append(Mesh(v, m.triangles, id=f"bend{i}"))
    return shapes


def write_collection(shapes, directory, gt_dir=None, suffix: str = ".ply"):
    """Save ``shapes`` as ``<id><suffix>`` files in ``directory``.

    With ``gt_dir``, also writes identity ground truth for every ordered pair
    of equally sized shapes as ``<source>__<target>.txt``.
    """
    from .evaluation import GroundTruth, write_ground_truth
    from .meshio import save_mesh

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in shapes:
        save_mesh(directory / f"{s.id}{suffix}", s)
    if gt_dir is not None:
        gt_dir = Path(gt_dir)
        gt_dir.mkdir(parents=True, exist_ok=True)
        for a in shapes:
            for b in shapes:
                if a is not b and a.n_vertices == b.n_vertices:
                    write_ground_truth(gt_dir / f"{a.id}__{b.id}.txt", GroundTruth.identity(a.n_vertices))
