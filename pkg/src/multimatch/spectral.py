"""Laplace-Beltrami eigenbases, spectral smoothing and shell embeddings."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import eigsh

from .mesh import Mesh, normals_from

#: Below this vertex count the eigenproblem is solved densely.
DENSE_LIMIT = 600

#: Extra eigenpairs requested from the sparse solver and then discarded.
#: Lanczos can skip members of highly degenerate eigenspaces (spheres,
#: cylinders) when asked for exactly k pairs.
OVERSAMPLE = 10


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    """Truncated eigenpairs of ``S psi = lambda M psi`` (M-orthonormal).

    Attributes
    ----------
    evecs : (m, k) array
    evals : (k,) array, ascending
    mass : (m,) lumped mass diagonal the basis is orthonormal against
    """

    evecs: np.ndarray
    evals: np.ndarray
    mass: np.ndarray

    @property
    def k(self) -> int:
        return self.evecs.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.evecs.shape[0]

    def truncate(self, k: int) -> np.ndarray:
        if not 1 <= k <= self.k:
            raise ValueError(f"level {k} outside [1, {self.k}]")
        return self.evecs[:, :k]

    def pinv(self, k: int) -> np.ndarray:
        """M-weighted pseudoinverse ``Psi_k^T M`` of the first k eigenfunctions."""
        return self.truncate(k).T * self.mass[None, :]


def _fix_signs(evecs: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(evecs), axis=0)
    signs = np.sign(evecs[idx, np.arange(evecs.shape[1])])
    signs[signs == 0] = 1.0
    return evecs * signs


def eigendecomposition(mass, stiffness, k: int) -> SpectralBasis:
    """The k smallest eigenpairs of the generalized problem ``S psi = lambda M psi``.

    The lumped mass makes this a standard symmetric problem for
    ``M^{-1/2} S M^{-1/2}``. Each eigenvector is signed so that its
    largest-magnitude entry is positive.
    """
    mass = np.asarray(mass, dtype=np.float64)
    m = len(mass)
    if k < 1 or k > m:
        raise ValueError(f"cannot compute {k} eigenpairs of a {m}-vertex mesh")
    if np.any(mass <= 0):
        raise ValueError("mass matrix must be positive")
    d = 1.0 / np.sqrt(mass)
    A = sparse.diags(d) @ sparse.csr_matrix(stiffness) @ sparse.diags(d)
    A = 0.5 * (A + A.T)
    if m <= DENSE_LIMIT or k + OVERSAMPLE >= m - 2:
        w, phi = np.linalg.eigh(A.toarray())
        w, phi = w[:k], phi[:, :k]
    else:
        # deterministic start vector keeps cached bases reproducible
        v0 = np.random.default_rng(0).standard_normal(m)
        kk = min(k + OVERSAMPLE, m - 2)
        try:
            w, phi = eigsh(A.tocsc(), k=kk, sigma=-1e-6, which="LM", v0=v0, tol=1e-12)
        except Exception as e:  # ArpackNoConvergence and factorization failures
            raise RuntimeError(f"eigensolver failed to converge for k={k}: {e}") from e
        order = np.argsort(w, kind="stable")[:k]
        w, phi = w[order], phi[:, order]
    evecs = _fix_signs(phi * d[:, None])
    w = np.where(np.abs(w) < 1e-12 * max(1.0, abs(w[-1])), 0.0, w)
    return SpectralBasis(evecs, np.maximum(w, 0.0), mass)


def smooth(basis: SpectralBasis, signal, k: int) -> np.ndarray:
    """Low-pass reconstruction ``Psi_k Psi_k^T M signal``."""
    signal = np.asarray(signal, dtype=np.float64)
    psi = basis.truncate(k)
    return psi @ (basis.pinv(k) @ signal)


@dataclass(frozen=True, eq=False)
class ShellEmbedding:
    """Per-vertex features ``(Psi_k, S_k(V), N_k)`` of one shape at level k."""

    level: int
    spectral: np.ndarray
    coords: np.ndarray
    normals: np.ndarray
    triangles: np.ndarray

    @property
    def width(self) -> int:
        return self.level + 6

    def features(self) -> np.ndarray:
        return np.hstack([self.spectral, self.coords, self.normals])


def shell_embedding(mesh: Mesh, basis: SpectralBasis, k: int) -> ShellEmbedding:
    psi = basis.truncate(k)
    coords = smooth(basis, mesh.vertices, k)
    normals = normals_from(coords, mesh.triangles, name=mesh.id)
    return ShellEmbedding(k, psi, coords, normals, mesh.triangles)


def deformed_embedding(embedding: ShellEmbedding, C, tau, strict=True) -> ShellEmbedding:
    """Apply a functional map and spectral displacement to an embedding.

    Returns ``(Psi C^T, S(V) + Psi tau, N)`` where ``N`` are the vertex
    normals of the displaced coordinates.
    """
    k = embedding.level
    C = np.asarray(C, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    if C.shape != (k, k) or tau.shape != (k, 3):
        raise ValueError(f"expected C {(k, k)} and tau {(k, 3)}, got {C.shape} and {tau.shape}")
    psi = embedding.spectral
    coords = embedding.coords + psi @ tau
    normals = normals_from(coords, embedding.triangles, strict=strict)
    return ShellEmbedding(k, psi @ C.T, coords, normals, embedding.triangles)


def wks_descriptor(basis: SpectralBasis, n_energies: int = 128, variance: float | None = None,
                   normalize: bool = True) -> np.ndarray:
    """Wave kernel signature.

    Energies are spaced uniformly in log space between the first non-zero
    and the largest eigenvalue. ``variance`` is the Gaussian width sigma in
    log-energy units; by default seven energy steps. With ``normalize`` each
    column is divided by its maximum.

    Returns an (m, n_energies) array.
    """
    if basis.k < 2:
        raise ValueError("WKS needs at least two eigenpairs")
    evals = basis.evals
    nz = evals > 1e-12 * max(evals.max(), 1e-300)
    if not nz.any():
        raise ValueError("all eigenvalues are zero")
    lam = evals[nz]
    psi2 = basis.evecs[:, nz] ** 2
    log_lam = np.log(lam)
    energies = np.linspace(log_lam[0], log_lam[-1], n_energies)
    if variance is None:
        step = (log_lam[-1] - log_lam[0]) / max(n_energies - 1, 1)
        variance = 7.0 * step if step > 0 else 1.0
    weights = np.exp(-((energies[:, None] - log_lam[None, :]) ** 2) / (2.0 * variance**2))
    desc = psi2 @ weights.T / weights.sum(axis=1)[None, :]
    if normalize:
        desc = desc / desc.max(axis=0, keepdims=True)
    return desc


# ---------------------------------------------------------------------------
# per-mesh cache

CACHE_MAGIC = b"MMSPEC"
CACHE_VERSION = 1


def save_basis(path, basis: SpectralBasis, mesh_hash: str):
    """Binary cache: magic, version, JSON header, then evals, evecs, mass as float64."""
    header = json.dumps({"m": basis.n_vertices, "k": basis.k, "mesh_hash": mesh_hash},
                        sort_keys=True).encode()
    payload = b"".join([
        CACHE_MAGIC, struct.pack("<HI", CACHE_VERSION, len(header)), header,
        np.ascontiguousarray(basis.evals, "<f8").tobytes(),
        np.ascontiguousarray(basis.evecs, "<f8").tobytes(),
        np.ascontiguousarray(basis.mass, "<f8").tobytes(),
    ])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def load_basis(path, mesh_hash: str | None = None) -> SpectralBasis | None:
    """Read a cached basis; ``None`` if absent, stale or from another version."""
    path = Path(path)
    if not path.exists():
        return None
    data = path.read_bytes()
    n0 = len(CACHE_MAGIC)
    if data[:n0] != CACHE_MAGIC:
        return None
    version, hlen = struct.unpack_from("<HI", data, n0)
    if version != CACHE_VERSION:
        return None
    off = n0 + struct.calcsize("<HI")
    head = json.loads(data[off:off + hlen])
    if mesh_hash is not None and head["mesh_hash"] != mesh_hash:
        return None
    off += hlen
    m, k = head["m"], head["k"]
    evals = np.frombuffer(data, "<f8", k, off).copy()
    off += 8 * k
    evecs = np.frombuffer(data, "<f8", m * k, off).reshape(m, k).copy()
    off += 8 * m * k
    mass = np.frombuffer(data, "<f8", m, off).copy()
    return SpectralBasis(evecs, evals, mass)

