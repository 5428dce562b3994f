"""Geodesic error and cumulative error curves in the usual benchmark convention.

Errors are divided by the square root of the target area, so they do not
depend on the scale of the mesh.
"""

import numpy as np

from multimatch.evaluation import GroundTruth, aggregate, geodesic_error
from multimatch.matching import Correspondence
from multimatch.mesh import Mesh
from multimatch.synthetic import icosphere

sphere = icosphere(3)
n = sphere.n_vertices
rng = np.random.default_rng(0)
gt = GroundTruth.identity(n)

# perturb a growing share of a perfect map with random vertices
reports = []
for share in (0.0, 0.1, 0.5):
    idx = np.arange(n)
    hit = rng.random(n) < share
    idx[hit] = rng.integers(0, n, hit.sum())
    rep = geodesic_error(Correspondence(idx, n), gt, sphere)
    reports.append(rep)
    print(f"{share:.0%} random: mean error {rep.mean_error:.4f}, "
          f"within 0.05: {rep.fraction_below(0.05):.2f}, within 0.25: {rep.curve[-1]:.2f}")

big = Mesh(10 * sphere.vertices, sphere.triangles)
rep10 = geodesic_error(Correspondence(np.roll(np.arange(n), 1), n), gt, big)
rep1 = geodesic_error(Correspondence(np.roll(np.arange(n), 1), n), gt, sphere)
print("scaling the target by 10 changes the mean error by", abs(rep10.mean_error - rep1.mean_error))
print("pooled mean over all three maps:", round(aggregate(reports).mean_error, 4))
