"""Laplace-Beltrami eigenpairs and wave kernel signatures on a sphere.

After undoing the area normalization the eigenvalues of the unit sphere
are l(l+1) with multiplicity 2l+1: 0, then 2 three times, then 6 five times.
"""

import numpy as np

from multimatch.mesh import mass_matrix, preprocess, stiffness_matrix, surface_area
from multimatch.spectral import eigendecomposition, smooth, wks_descriptor
from multimatch.synthetic import icosphere

mesh = preprocess(icosphere(4))
mass = mass_matrix(mesh)
basis = eigendecomposition(mass, stiffness_matrix(mesh), 16)
print("vertices:", mesh.n_vertices)
print("eigenvalues on the unit sphere:", np.round(basis.evals * surface_area(mesh) / (4 * np.pi), 3))

# the coordinate functions are first-order harmonics: the constant alone
# collapses the sphere to its center, four eigenfunctions restore it
for k in (1, 4, 9):
    err = np.linalg.norm(smooth(basis, mesh.vertices, k) - mesh.vertices, axis=1).max()
    print(f"smoothed with {k} eigenfunctions: largest vertex displacement {err:.2e}")

# every vertex of a sphere looks the same, so its descriptor is constant
wks = wks_descriptor(basis, 32)
print("WKS spread across vertices:", float(np.ptp(wks, axis=0).max()))
