"""Shape graph over a bending family and maps passed along shortest paths.

Matching the straight cylinder directly onto the half circle is the
hardest pair; chaining the easier neighboring matches does better.
"""

import itertools

import numpy as np

from multimatch.evaluation import GroundTruth, geodesic_error
from multimatch.graph import PairStore, build_graph, mds_embedding, multi_match
from multimatch.matching import hierarchical_match
from multimatch.mesh import mass_matrix, preprocess, stiffness_matrix
from multimatch.spectral import eigendecomposition, wks_descriptor
from multimatch.synthetic import bent_cylinder_family

shapes = {}
for mesh in bent_cylinder_family(5, seed=2):
    mesh = preprocess(mesh)
    basis = eigendecomposition(mass_matrix(mesh), stiffness_matrix(mesh), 31)
    shapes[mesh.id] = (mesh, basis, wks_descriptor(basis, 128))
ids = list(shapes)

store = PairStore({k: v[0] for k, v in shapes.items()})
for a, b in itertools.permutations(ids, 2):
    (s, sb, sw), (t, tb, tw) = shapes[a], shapes[b]
    store.add(a, b, hierarchical_match(s, sb, t, tb, sw, tw))

gt = GroundTruth.identity(shapes[ids[0]][0].n_vertices)
for topology in ("full", "mst", "tsp", "star"):
    graph = build_graph(store, ids, topology)
    mm = multi_match(graph, store, 0, 4)
    err = geodesic_error(mm.pi, gt, shapes["bend4"][0]).mean_error
    print(f"{topology:4s}: path {[ids[p] for p in mm.path]}, error {err:.4f}, cycle score {mm.cycle_score:.3f}")

direct = geodesic_error(store["bend0", "bend4"].pi, gt, shapes["bend4"][0]).mean_error
print(f"direct map bend0 -> bend4: error {direct:.4f}")

graph = build_graph(store, ids)
print("affinity weights:\n", np.round(graph.weights, 3))
print("MDS layout (the poses line up in bending order):\n", np.round(mds_embedding(graph), 3))
