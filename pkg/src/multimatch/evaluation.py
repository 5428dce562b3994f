"""Geodesic correspondence error in the Princeton benchmark convention.

Errors are geodesic distances on the target between predicted and true
matches, divided by the square root of the target's surface area.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import dijkstra

from .matching import Correspondence
from .mesh import Mesh, edge_graph, surface_area

#: Curve thresholds span [0, CURVE_MAX] of normalized geodesic distance.
CURVE_MAX = 0.25
CURVE_SAMPLES = 200


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Reference pairs ``(source index, target index)``; sparse or dense."""

    source: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.source, dtype=np.int64).ravel()
        t = np.asarray(self.target, dtype=np.int64).ravel()
        if s.shape != t.shape:
            raise ValueError("ground truth needs as many target as source indices")
        if s.size and (s.min() < 0 or t.min() < 0):
            raise ValueError("ground-truth indices must be non-negative")
        if len(np.unique(s)) != len(s):
            raise ValueError("ground truth lists a source vertex twice")
        s.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "source", s)
        object.__setattr__(self, "target", t)

    def __len__(self):
        return len(self.source)

    @classmethod
    def identity(cls, m: int) -> "GroundTruth":
        return cls(np.arange(m), np.arange(m))

    def validate(self, n_source: int, n_target: int):
        if len(self) and self.source.max() >= n_source:
            raise ValueError(f"ground-truth source index {self.source.max()} >= {n_source}")
        if len(self) and self.target.max() >= n_target:
            raise ValueError(f"ground-truth target index {self.target.max()} >= {n_target}")


@dataclass(frozen=True, eq=False)
class EvalReport:
    per_vertex_error: np.ndarray
    mean_error: float
    thresholds: np.ndarray
    curve: np.ndarray

    def fraction_below(self, threshold: float) -> float:
        if len(self.per_vertex_error) == 0:
            return float("nan")
        return float(np.mean(self.per_vertex_error <= threshold))


def error_curve(errors, n_samples: int = CURVE_SAMPLES, max_threshold: float = CURVE_MAX):
    """Fraction of errors at or below each of ``n_samples`` uniform thresholds."""
    thresholds = np.linspace(0.0, max_threshold, n_samples)
    errors = np.sort(np.asarray(errors, dtype=np.float64))
    if errors.size == 0:
        return thresholds, np.zeros(n_samples)
    frac = np.searchsorted(errors, thresholds, side="right") / errors.size
    return thresholds, frac


def report_from_errors(errors) -> EvalReport:
    errors = np.asarray(errors, dtype=np.float64)
    thresholds, curve = error_curve(errors)
    mean = float(errors.mean()) if errors.size else float("nan")
    return EvalReport(errors, mean, thresholds, curve)


def geodesic_error(pred: Correspondence, gt: GroundTruth, target: Mesh) -> EvalReport:
    """Normalized geodesic error of ``pred`` at every ground-truth pair.

    Distances are edge-graph Dijkstra distances on ``target``. Pairs whose
    predicted vertex cannot reach the true one are dropped with a warning.
    """
    if pred.n_target != target.n_vertices:
        raise ValueError("prediction does not map into the target mesh")
    gt.validate(len(pred), target.n_vertices)
    if len(gt) == 0:
        return report_from_errors([])
    predicted = pred.target_index[gt.source]
    g = edge_graph(target.vertices, target.edges())
    # one Dijkstra per distinct true target vertex
    sources, inverse = np.unique(gt.target, return_inverse=True)
    D = dijkstra(g, directed=False, indices=sources)
    dist = D[inverse, predicted]
    finite = np.isfinite(dist)
    if not finite.all():
        warnings.warn(f"{int((~finite).sum())} ground-truth pairs are unreachable on the target and were "
                      "excluded", RuntimeWarning, stacklevel=2)
    return report_from_errors(dist[finite] / np.sqrt(surface_area(target)))


def aggregate(reports) -> EvalReport:
    """Pool the per-vertex errors of several reports."""
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to aggregate")
    return report_from_errors(np.concatenate([r.per_vertex_error for r in reports]))


# ---------------------------------------------------------------------------
# files


def read_ground_truth(path) -> GroundTruth:
    """Two whitespace-separated 0-based integer columns per line; ``#`` comments allowed."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected two indices, got {len(parts)} fields")
        try:
            rows.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: indices must be integers") from None
    arr = np.array(rows, dtype=np.int64).reshape(-1, 2)
    return GroundTruth(arr[:, 0], arr[:, 1])


def write_ground_truth(path, gt: GroundTruth):
    Path(path).write_text("".join(f"{s} {t}\n" for s, t in zip(gt.source, gt.target)))


def curve_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "fraction"])
    for t, f in zip(report.thresholds, report.curve):
        w.writerow([repr(float(t)), repr(float(f))])
    return buf.getvalue()


def summary_json(report: EvalReport, pair) -> str:
    doc = {"pair": list(pair), "meanError": report.mean_error, "count": int(len(report.per_vertex_error))}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
