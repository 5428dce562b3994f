"""Multi-shape matching: pairwise smooth-shell registration chained over a shape graph."""

__version__ = "0.1.0"

from .evaluation import EvalReport, GroundTruth, aggregate, geodesic_error
from .graph import (PairStore, ShapeGraph, MultiMatch, affinity_weight, build_graph, compose_maps,
                    cycle_consistency_score, mds_embedding, multi_match, shortest_path)
from .matching import (AlignmentParams, Correspondence, MatchConfig, MatchResult, TransportPlan,
                       fit_alignment, hierarchical_match, match_energy, nearest_neighbor_assignment,
                       sinkhorn)
from .mesh import Mesh, MeshValidationError, mass_matrix, preprocess, stiffness_matrix
from .meshio import MeshFormatError, load_mesh, save_mesh
from .spectral import (ShellEmbedding, SpectralBasis, eigendecomposition, shell_embedding, smooth,
                       wks_descriptor)

__all__ = [
    "AlignmentParams", "Correspondence", "EvalReport", "GroundTruth", "MatchConfig", "MatchResult",
    "Mesh", "MeshFormatError", "MeshValidationError", "MultiMatch", "PairStore", "ShapeGraph",
    "ShellEmbedding", "SpectralBasis", "TransportPlan", "affinity_weight", "aggregate", "build_graph",
    "compose_maps", "cycle_consistency_score", "eigendecomposition", "fit_alignment", "geodesic_error",
    "hierarchical_match", "load_mesh", "mass_matrix", "match_energy", "mds_embedding", "multi_match",
    "nearest_neighbor_assignment", "preprocess", "save_mesh", "shell_embedding", "shortest_path",
    "sinkhorn", "smooth", "stiffness_matrix", "wks_descriptor",
]
