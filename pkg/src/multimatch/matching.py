"""Pairwise matching: entropic optimal transport over smooth-shell embeddings.

A pair of shapes is aligned coarse to fine. At every spectral level ``k``
the source embedding is deformed by a functional map ``C`` and a spectral
displacement ``tau``; a Sinkhorn step fixes the soft correspondence and a
linear least-squares step refits ``(C, tau)``.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from .mesh import Mesh
from .spectral import ShellEmbedding, SpectralBasis, deformed_embedding, shell_embedding

#: Tikhonov damping of the alignment normal equations.
DAMPING = 1e-9


@dataclass(frozen=True)
class MatchConfig:
    """Parameters of :func:`hierarchical_match`.

    ``n_levels`` log-spaced spectral resolutions between ``k_min`` and
    ``k_max`` are visited (rounded, duplicates removed).
    """

    k_min: int = 6
    k_max: int = 21
    n_levels: int = 6
    entropy: float = 0.5
    sinkhorn_iters: int = 3000
    sinkhorn_tol: float = 1e-6
    inner_iters: int = 1
    area_marginals: bool = False
    init_shell_prior: bool = True
    subsample: int | None = None

    def __post_init__(self):
        if not 1 <= self.k_min <= self.k_max:
            raise ValueError(f"need 1 <= k_min <= k_max, got {self.k_min}, {self.k_max}")
        if self.entropy <= 0:
            raise ValueError("entropy weight must be positive")
        if self.n_levels < 1 or self.inner_iters < 1:
            raise ValueError("n_levels and inner_iters must be >= 1")

    def schedule(self) -> list:
        if self.k_min == self.k_max:
            return [self.k_min]
        ks = np.round(np.geomspace(self.k_min, self.k_max, self.n_levels)).astype(int)
        return sorted(set(int(k) for k in ks))

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class TransportPlan:
    weights: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    n_iters: int = 0
    residual: float = 0.0
    converged: bool = True


@dataclass(frozen=True, eq=False)
class Correspondence:
    """Total map from source vertices to target vertices."""

    target_index: np.ndarray
    n_target: int

    def __post_init__(self):
        idx = np.asarray(self.target_index, dtype=np.int64)
        if idx.ndim != 1:
            raise ValueError("target_index must be one-dimensional")
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_target):
            raise ValueError(f"target indices must lie in [0, {self.n_target})")
        idx.setflags(write=False)
        object.__setattr__(self, "target_index", idx)

    def __len__(self):
        return len(self.target_index)

    def __eq__(self, other):
        return (isinstance(other, Correspondence) and self.n_target == other.n_target
                and np.array_equal(self.target_index, other.target_index))

    def as_matrix(self) -> np.ndarray:
        P = np.zeros((len(self), self.n_target))
        P[np.arange(len(self)), self.target_index] = 1.0
        return P

    @classmethod
    def identity(cls, m: int) -> "Correspondence":
        return cls(np.arange(m), m)


@dataclass(frozen=True, eq=False)
class AlignmentParams:
    C: np.ndarray
    tau: np.ndarray

    @property
    def level(self) -> int:
        return self.C.shape[0]

    @classmethod
    def identity(cls, k: int) -> "AlignmentParams":
        return cls(np.eye(k), np.zeros((k, 3)))

    def lift(self, k: int) -> "AlignmentParams":
        """Zero-pad to level k, with identity on the new diagonal block."""
        k0 = self.level
        if k < k0:
            raise ValueError("cannot lift to a coarser level")
        C = np.eye(k)
        C[:k0, :k0] = self.C
        tau = np.zeros((k, 3))
        tau[:k0] = self.tau
        return AlignmentParams(C, tau)


@dataclass(frozen=True, eq=False)
class MatchResult:
    pi: Correspondence
    registration: np.ndarray
    match_loss: float
    level_energies: tuple
    alignment: AlignmentParams
    schedule: tuple = ()
    converged: bool = True
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# energies


def sq_distances(F, G) -> np.ndarray:
    """Fast squared Euclidean distance matrix (BLAS expansion, clipped at 0)."""
    F = np.asarray(F, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    D = (F * F).sum(1)[:, None] + (G * G).sum(1)[None, :] - 2.0 * (F @ G.T)
    return np.maximum(D, 0.0)


def _chunk_rows(n_rows, n_cols, width, budget=2 ** 24):
    step = max(1, budget // max(1, n_cols * width))
    for i0 in range(0, n_rows, step):
        yield i0, min(n_rows, i0 + step)


def _exact_sq_distances(F, G, i0, i1):
    diff = F[i0:i1, None, :] - G[None, :, :]
    return (diff * diff).sum(axis=2)


def match_energy(F, G, plan) -> float:
    """Transport cost ``sum_ij P_ij ||F_i - G_j||^2``.

    ``plan`` is a :class:`TransportPlan`, a dense (m, n) array or a
    :class:`Correspondence` (read as its 0/1 assignment matrix).
    """
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    if F.shape[1] != G.shape[1]:
        raise ValueError(f"feature dimensions differ: {F.shape[1]} vs {G.shape[1]}")
    if isinstance(plan, Correspondence):
        if len(plan) != len(F) or plan.n_target != len(G):
            raise ValueError("correspondence does not fit the feature matrices")
        diff = F - G[plan.target_index]
        return float((diff * diff).sum(axis=1).sum())
    P = plan.weights if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    if P.shape != (len(F), len(G)):
        raise ValueError(f"plan shape {P.shape} does not match features {(len(F), len(G))}")
    rows = np.empty(len(F))
    for i0, i1 in _chunk_rows(len(F), len(G), F.shape[1]):
        rows[i0:i1] = (P[i0:i1] * _exact_sq_distances(F, G, i0, i1)).sum(axis=1)
    return float(rows.sum())


def entropy_term(P) -> float:
    """``sum P log P`` with the convention 0 log 0 = 0."""
    P = np.asarray(P)
    pos = P > 0
    return float((P[pos] * np.log(P[pos])).sum())


def regularized_energy(cost, P, entropy: float) -> float:
    """Entropic objective from a precomputed cost matrix."""
    P = P.weights if isinstance(P, TransportPlan) else P
    return float((P * cost).sum()) + entropy * entropy_term(P)


# ---------------------------------------------------------------------------
# Sinkhorn


class SinkhornUnderflowError(FloatingPointError):
    pass


def _scale(C, a, b, f, g, eps, tol, max_iters, detect_stall):
    """Kernel scaling iterations around the potentials ``f`` and ``g``.

    Returns updated potentials, the iteration count and the last residual.
    With ``detect_stall`` the loop gives up once the residual fails to halve
    over 200 iterations.
    """
    m, n = C.shape
    log_a, log_b = np.log(a), np.log(b)
    f, g = f.copy(), g.copy()

    def kernel():
        return np.exp((f[:, None] + g[None, :] - C) / eps)

    K = kernel()
    u, v = np.ones(m), np.ones(n)
    residual = float(max(np.abs(K.sum(axis=1) - a).max(), np.abs(K.sum(axis=0) - b).max()))
    history = []
    it = 0
    while it < max_iters and residual > tol:
        it += 1
        Kv = K @ v
        if np.any(Kv <= 1e-250):
            f += eps * np.log(u)
            g += eps * np.log(v)
            f = eps * (log_a - logsumexp((g[None, :] - C) / eps, axis=1))
            g = eps * (log_b - logsumexp((f[:, None] - C) / eps, axis=0))
            K, u, v = kernel(), np.ones(m), np.ones(n)
            continue
        u = a / Kv
        Ktu = K.T @ u
        if np.any(Ktu <= 1e-250):
            f += eps * np.log(u)
            g = eps * (log_b - logsumexp((f[:, None] - C) / eps, axis=0))
            K, u, v = kernel(), np.ones(m), np.ones(n)
            continue
        v = b / Ktu
        if it % 10 == 0 or it == max_iters:
            # columns are exact right after the v update
            residual = float(np.abs(u * (K @ v) - a).max())
            history.append(residual)
            # less than a halving over the last 200 iterations
            if detect_stall and len(history) > 20 and residual > 0.5 * history[-21]:
                break
        if np.abs(np.log(u)).max() > 200 or np.abs(np.log(v)).max() > 200:
            f += eps * np.log(u)
            g += eps * np.log(v)
            K, u, v = kernel(), np.ones(m), np.ones(n)
    return f + eps * np.log(u), g + eps * np.log(v), it, residual


def _newton_polish(C, a, b, f, g, eps, tol, max_steps):
    """Damped Newton iterations on the dual potentials.

    Scaling iterations converge linearly, and very slowly once the plan is
    nearly a permutation; Newton's method finishes quadratically from there.
    The Hessian is eliminated onto ``g`` via its Schur complement.
    """
    def plan(f, g):
        with np.errstate(over="ignore"):
            return np.exp((f[:, None] + g[None, :] - C) / eps)

    def grad(P):
        return a - P.sum(axis=1), b - P.sum(axis=0)

    P = plan(f, g)
    gf, gg = grad(P)
    norm = np.sqrt(gf @ gf + gg @ gg)
    steps = 0
    while steps < max_steps and max(np.abs(gf).max(), np.abs(gg).max()) > tol:
        steps += 1
        r, c = P.sum(axis=1), P.sum(axis=0)
        W = P / r[:, None]
        S = np.diag(c) - P.T @ W
        # constants are in the kernel of the Hessian; a tiny shift fixes the gauge
        S[np.diag_indices_from(S)] += 1e-12 * c.max()
        try:
            dg = np.linalg.solve(S, eps * (gg - W.T @ gf))
        except np.linalg.LinAlgError:
            break
        df = (eps * gf - P @ dg) / r
        t = 1.0
        while t > 1e-8:
            f1, g1 = f + t * df, g + t * dg
            P1 = plan(f1, g1)
            if np.all(np.isfinite(P1)):
                gf1, gg1 = grad(P1)
                # an overshooting trial step may overflow here; it is rejected
                with np.errstate(over="ignore"):
                    norm1 = np.sqrt(gf1 @ gf1 + gg1 @ gg1)
                if norm1 <= (1.0 - 1e-4 * t) * norm:
                    break
            t *= 0.5
        else:
            break
        f, g, P, gf, gg, norm = f1, g1, P1, gf1, gg1, norm1
    return f, g, steps


def sinkhorn(cost, row_marginal=None, col_marginal=None, entropy: float = 0.5,
             max_iters: int = 5000, tol: float = 1e-6) -> TransportPlan:
    """Entropic optimal transport with stabilized scaling iterations.

    Minimizes ``<P, cost> + entropy * sum P log P`` over plans with the
    given marginals (uniform by default). Iterates on kernel scalings and
    absorbs them into log-domain potentials whenever they grow large, so
    small ``entropy`` values do not underflow. When the scaling iterations
    stall, damped Newton steps on the dual potentials finish the solve.
    Stops once the maximal absolute marginal deviation is at most ``tol``;
    ``max_iters`` bounds scaling and Newton iterations together.
    """
    C = np.asarray(cost, dtype=np.float64)
    if C.ndim != 2:
        raise ValueError("cost must be a matrix")
    m, n = C.shape
    a = np.full(m, 1.0 / m) if row_marginal is None else np.asarray(row_marginal, dtype=np.float64)
    b = np.full(n, 1.0 / n) if col_marginal is None else np.asarray(col_marginal, dtype=np.float64)
    if entropy <= 0:
        raise ValueError("entropy weight must be positive")
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("marginals must be positive")
    if not np.isclose(a.sum(), b.sum(), rtol=1e-9, atol=0):
        raise ValueError(f"marginals carry different mass: {a.sum()} vs {b.sum()}")
    if np.isnan(C).any() or np.isneginf(C).any():
        raise ValueError("cost entries must be finite or +inf")
    blocked = np.isinf(C)
    if blocked.all(axis=1).any() or blocked.all(axis=0).any():
        r = np.flatnonzero(blocked.all(axis=1))
        where = f"row {r[0]}" if r.size else f"column {np.flatnonzero(blocked.all(axis=0))[0]}"
        raise SinkhornUnderflowError(f"every kernel entry of {where} is zero; no transport plan exists. "
                                     "Use a larger entropy weight or finite costs")
    eps = float(entropy)
    log_a, log_b = np.log(a), np.log(b)

    # log-domain half steps give potentials under which no row or column underflows
    f = np.zeros(m)
    g = eps * (log_b - logsumexp(-C / eps, axis=0))
    f = eps * (log_a - logsumexp((g[None, :] - C) / eps, axis=1))
    g = eps * (log_b - logsumexp((f[:, None] - C) / eps, axis=0))

    f, g, it, residual = _scale(C, a, b, f, g, eps, tol, max_iters, detect_stall=True)
    if residual > tol and it < max_iters:
        f, g, steps = _newton_polish(C, a, b, f, g, eps, tol, max_iters - it)
        it += steps
        # Newton can fail far from the optimum; scaling then resumes
        f, g, more, residual = _scale(C, a, b, f, g, eps, tol, max_iters - it, detect_stall=False)
        it += more
    P = np.exp((f[:, None] + g[None, :] - C) / eps)
    rows, cols = P.sum(axis=1), P.sum(axis=0)
    if np.any(rows == 0):
        raise SinkhornUnderflowError(
            f"transport plan row {int(np.flatnonzero(rows == 0)[0])} underflowed; "
            "increase the entropy weight"
        )
    residual = float(max(np.abs(rows - a).max(), np.abs(cols - b).max()))
    converged = residual <= tol
    if not converged:
        warnings.warn(f"Sinkhorn stopped after {it} iterations with marginal residual {residual:.3g}",
                      RuntimeWarning, stacklevel=2)
    return TransportPlan(P, a, b, it, residual, converged)


# ---------------------------------------------------------------------------
# alignment


def fit_alignment(plan, source: ShellEmbedding, target: ShellEmbedding,
                  damping: float = DAMPING) -> AlignmentParams:
    """Least-squares ``(C, tau)`` for a fixed transport plan.

    Target eigenfunctions and smoothed coordinates are pulled back through
    the row-normalized plan; ``C`` and ``tau`` then solve damped normal
    equations weighted by the row marginals. Normals are not part of the fit.
    """
    if source.level != target.level:
        raise ValueError(f"embedding levels differ: {source.level} vs {target.level}")
    P = plan.weights if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    psi_x = source.spectral
    r = P.sum(axis=1)
    gram = psi_x.T @ (r[:, None] * psi_x)
    gram += damping * np.eye(len(gram))
    rhs_c = psi_x.T @ (P @ target.spectral)
    rhs_tau = psi_x.T @ (P @ target.coords - r[:, None] * source.coords)
    try:
        CT = np.linalg.solve(gram, rhs_c)
        tau = np.linalg.solve(gram, rhs_tau)
    except np.linalg.LinAlgError as e:
        raise np.linalg.LinAlgError(f"alignment system is singular: {e}") from e
    if not (np.all(np.isfinite(CT)) and np.all(np.isfinite(tau))):
        raise np.linalg.LinAlgError("alignment system is rank deficient beyond damping")
    return AlignmentParams(CT.T, tau)


def nearest_neighbor_assignment(source, target) -> Correspondence:
    """Hard assignment to the closest target row; ties go to the smallest index."""
    F = np.atleast_2d(np.asarray(source, dtype=np.float64))
    G = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if F.shape[1] != G.shape[1]:
        raise ValueError(f"embedding dimensions differ: {F.shape[1]} vs {G.shape[1]}")
    idx = np.empty(len(F), dtype=np.int64)
    for i0, i1 in _chunk_rows(len(F), len(G), F.shape[1]):
        idx[i0:i1] = np.argmin(_exact_sq_distances(F, G, i0, i1), axis=1)
    return Correspondence(idx, len(G))


def farthest_point_sampling(points, count: int, start: int = 0) -> np.ndarray:
    """Greedy Euclidean farthest-point sample of ``count`` indices, sorted."""
    points = np.asarray(points, dtype=np.float64)
    count = min(count, len(points))
    chosen = [start]
    d = np.linalg.norm(points - points[start], axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, np.linalg.norm(points - points[nxt], axis=1))
    return np.sort(np.array(chosen, dtype=np.int64))


def _rows(emb: ShellEmbedding, idx) -> ShellEmbedding:
    if idx is None:
        return emb
    return ShellEmbedding(emb.level, emb.spectral[idx], emb.coords[idx], emb.normals[idx], emb.triangles)


def _with_params(deformed: ShellEmbedding, base: ShellEmbedding, params: AlignmentParams):
    """Re-deform ``base`` but keep the normals of ``deformed`` frozen."""
    return ShellEmbedding(base.level, base.spectral @ params.C.T, base.coords + base.spectral @ params.tau,
                          deformed.normals, base.triangles)


def _marginals(mesh_mass, idx, area_weighted):
    if not area_weighted:
        n = len(mesh_mass) if idx is None else len(idx)
        return np.full(n, 1.0 / n)
    w = mesh_mass if idx is None else mesh_mass[idx]
    return w / w.sum()


def hierarchical_match(source: Mesh, source_basis: SpectralBasis, target: Mesh,
                       target_basis: SpectralBasis, source_features, target_features,
                       config: MatchConfig = MatchConfig(), trace: list | None = None) -> MatchResult:
    """Match ``source`` onto ``target``.

    The initial soft correspondence comes from the input features (plus the
    shell distance at the coarsest level when ``config.init_shell_prior``).
    Each level then runs Sinkhorn and the alignment fit; normals of the
    deformed source are recomputed once at the start of every level and held
    fixed within it, so each step can only lower the regularized energy.

    If ``trace`` is a list, one record per step is appended with the
    regularized energy before and after the step.
    """
    schedule = config.schedule()
    if not schedule:
        raise ValueError("empty level schedule")
    k_max = schedule[-1]
    for name, basis in (("source", source_basis), ("target", target_basis)):
        if basis.k < k_max:
            raise ValueError(f"{name} basis has {basis.k} eigenpairs; level {k_max} requested")
    F0 = np.asarray(source_features, dtype=np.float64)
    G0 = np.asarray(target_features, dtype=np.float64)
    if F0.shape[1] != G0.shape[1]:
        raise ValueError("initial feature dimensions differ")
    if len(F0) != source.n_vertices or len(G0) != target.n_vertices:
        raise ValueError("initial features must have one row per vertex")

    sidx = tidx = None
    if config.subsample is not None:
        if source.n_vertices > config.subsample:
            sidx = farthest_point_sampling(source.vertices, config.subsample)
        if target.n_vertices > config.subsample:
            tidx = farthest_point_sampling(target.vertices, config.subsample)
    a = _marginals(source_basis.mass, sidx, config.area_marginals)
    b = _marginals(target_basis.mass, tidx, config.area_marginals)
    eps = config.entropy

    def solve(cost):
        return sinkhorn(cost, a, b, eps, config.sinkhorn_iters, config.sinkhorn_tol)

    def sel(x, idx):
        return x if idx is None else x[idx]

    converged = True
    cost0 = sq_distances(sel(F0, sidx), sel(G0, tidx))
    k0 = schedule[0]
    if config.init_shell_prior:
        src0 = shell_embedding(source, source_basis, k0)
        tgt0 = shell_embedding(target, target_basis, k0)
        # eigenbases of different shapes are not yet aligned, so only the
        # extrinsic block (smoothed coordinates and normals) is comparable
        ext_s = np.hstack([src0.coords, src0.normals])
        ext_t = np.hstack([tgt0.coords, tgt0.normals])
        cost0 = cost0 + sq_distances(sel(ext_s, sidx), sel(ext_t, tidx))
    plan = solve(cost0)
    converged &= plan.converged
    src_emb = _rows(shell_embedding(source, source_basis, k0), sidx)
    tgt_emb = _rows(shell_embedding(target, target_basis, k0), tidx)
    params = fit_alignment(plan, src_emb, tgt_emb)

    energies = []
    for k in schedule:
        params = params.lift(k)
        src_full = shell_embedding(source, source_basis, k)
        tgt_emb = _rows(shell_embedding(target, target_basis, k), tidx)
        deformed = _rows(deformed_embedding(src_full, params.C, params.tau, strict=False), sidx)
        src_emb = _rows(src_full, sidx)
        G = tgt_emb.features()
        if k != schedule[0]:
            # identity padding is a poor guess for the new eigenfunctions, whose
            # order and signs differ between shapes; refit from the last plan
            before = regularized_energy(sq_distances(deformed.features(), G), plan, eps) if trace is not None else None
            params = fit_alignment(plan, src_emb, tgt_emb)
            deformed = _with_params(deformed, src_emb, params)
            if trace is not None:
                trace.append({"level": k, "step": "lift", "before": before,
                              "after": regularized_energy(sq_distances(deformed.features(), G), plan, eps)})
        for _ in range(config.inner_iters):
            cost = sq_distances(deformed.features(), G)
            before = regularized_energy(cost, plan, eps) if trace is not None else None
            plan = solve(cost)
            converged &= plan.converged
            if trace is not None:
                trace.append({"level": k, "step": "sinkhorn", "before": before,
                              "after": regularized_energy(cost, plan, eps)})
            params = fit_alignment(plan, src_emb, tgt_emb)
            deformed_new = _with_params(deformed, src_emb, params)
            if trace is not None:
                trace.append({"level": k, "step": "fit", "before": regularized_energy(cost, plan, eps),
                              "after": regularized_energy(sq_distances(deformed_new.features(), G), plan, eps)})
            deformed = deformed_new
        energies.append(match_energy(deformed.features(), G, plan))

    final_src = deformed_embedding(shell_embedding(source, source_basis, k_max), params.C, params.tau,
                                   strict=False)
    final_tgt = shell_embedding(target, target_basis, k_max)
    pi = nearest_neighbor_assignment(final_src.features(), final_tgt.features())
    registration = source.vertices + source_basis.truncate(k_max) @ params.tau
    return MatchResult(
        pi=pi,
        registration=registration,
        match_loss=float(np.sum(energies)),
        level_energies=tuple(energies),
        alignment=params,
        schedule=tuple(schedule),
        converged=bool(converged),
        meta={"source": source.id, "target": target.id},
    )
