"""End-to-end collection pipeline with content-addressed caching.

Stages: preprocess, spectral, pairwise matching, graph, multi-match,
evaluation and color exports. Every stage result is stored under a key
derived from its inputs and the relevant configuration, so a rerun only
recomputes what changed.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import os
import shutil
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import __version__
from .evaluation import aggregate, curve_csv, geodesic_error, read_ground_truth, summary_json
from .graph import (TOPOLOGIES, MultiMatch, PairStore, graph_from_json, graph_to_json, mds_embedding,
                    multi_match, refine)
from .matching import AlignmentParams, Correspondence, MatchConfig, MatchResult, hierarchical_match
from .mesh import Mesh, MeshValidationError, mass_matrix, preprocess, stiffness_matrix
from .meshio import MeshFormatError, load_mesh, read_arrays, write_ply
from .spectral import SpectralBasis, eigendecomposition, load_basis, save_basis, wks_descriptor

#: Environment variable naming the cache root.
CACHE_ENV = "MULTIMATCH_CACHE"

MESH_SUFFIXES = (".off", ".ply")

#: Pairwise matching is refused above this size unless subsampling is on.
MAX_VERTICES = 10_000


class ConfigError(ValueError):
    """Invalid configuration or command-line input."""


class StageError(RuntimeError):
    """A pipeline stage failed; names the stage and the offending item."""

    def __init__(self, stage, subject, cause):
        super().__init__(f"stage {stage!r} failed on {subject}: {cause}")
        self.stage = stage
        self.subject = subject
        self.cause = cause


VALIDATION_ERRORS = (ConfigError, MeshValidationError, MeshFormatError)


@dataclass(frozen=True)
class PipelineConfig:
    match: MatchConfig = field(default_factory=MatchConfig)
    topology: str = "full"
    wks_energies: int = 128
    basis_extra: int = 10
    refine_iterations: int = 1
    cycle_weight: float = 0.5  # stored for reference, unused without training
    max_vertices: int = MAX_VERTICES
    jobs: int = 1

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise ConfigError(f"unknown topology {self.topology!r}; expected one of {TOPOLOGIES}")
        if self.wks_energies < 1 or self.basis_extra < 0 or self.jobs < 1 or self.refine_iterations < 1:
            raise ConfigError("wks_energies, jobs and refine_iterations must be >= 1, basis_extra >= 0")

    @property
    def basis_size(self) -> int:
        return self.match.k_max + self.basis_extra

    def to_dict(self) -> dict:
        d = asdict(self)
        d["match"] = self.match.to_dict()
        return d

    def match_dict(self) -> dict:
        """Settings that influence pairwise results (jobs and topology do not)."""
        return {"match": self.match.to_dict(), "wks_energies": self.wks_energies,
                "basis_size": self.basis_size}

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        doc = dict(doc)
        match_doc = doc.pop("match", {})
        match_names = {f.name for f in fields(MatchConfig)}
        top_names = {f.name for f in fields(cls)} - {"match"}
        for key in list(doc):
            # flat files may mix matching and pipeline keys
            if key in match_names and key not in top_names:
                match_doc[key] = doc.pop(key)
        unknown = (set(doc) - top_names) | (set(match_doc) - match_names)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        try:
            return cls(match=MatchConfig(**match_doc), **doc)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e


def load_config(path) -> PipelineConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return PipelineConfig.from_dict(doc)


def with_overrides(config: PipelineConfig, **kw) -> PipelineConfig:
    """Apply non-``None`` overrides; matching keys go to the nested config."""
    kw = {k: v for k, v in kw.items() if v is not None}
    match_names = {f.name for f in fields(MatchConfig)}
    mkw = {k: kw.pop(k) for k in list(kw) if k in match_names}
    try:
        return replace(config, match=replace(config.match, **mkw), **kw)
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e


# ---------------------------------------------------------------------------
# hashing and atomic files


def digest(*parts) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(parts, sort_keys=True, default=str).encode())
    return h.hexdigest()[:24]


def atomic_write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_correspondence(path, pi: Correspondence):
    atomic_write_text(path, "".join(f"{int(i)}\n" for i in pi.target_index))


def read_correspondence(path, n_target: int) -> Correspondence:
    text = Path(path).read_text().split()
    try:
        idx = np.array([int(x) for x in text], dtype=np.int64)
    except ValueError as e:
        raise MeshFormatError(f"{path}: correspondence entries must be integers") from e
    return Correspondence(idx, n_target)


def pair_name(a: str, b: str) -> str:
    return f"{a}__{b}"


class Cache:
    """Directory of stage artifacts addressed by key, with hit/miss counts."""

    def __init__(self, root):
        self.root = Path(root)
        self.stats = {}

    def path(self, stage: str, key: str) -> Path:
        return self.root / stage / key

    def _count(self, stage, hit):
        s = self.stats.setdefault(stage, {"hits": 0, "misses": 0})
        s["hits" if hit else "misses"] += 1

    def lookup(self, stage: str, key: str):
        p = self.path(stage, key)
        hit = p.exists()
        self._count(stage, hit)
        return p if hit else None

    def commit_dir(self, stage: str, key: str, build) -> Path:
        """Run ``build(tmpdir)`` and move the directory into place atomically."""
        final = self.path(stage, key)
        final.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".{key}.", dir=final.parent))
        try:
            build(tmp)
            try:
                os.replace(tmp, final)
            except OSError:
                # another writer finished first; its copy is equivalent
                shutil.rmtree(tmp, ignore_errors=True)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        return final


# ---------------------------------------------------------------------------
# per-shape stages


@dataclass
class Shape:
    id: str
    mesh: Mesh
    key: str
    basis: SpectralBasis | None = None
    wks: np.ndarray | None = None


def list_collection(directory) -> list:
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"collection {directory} is not a directory")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in MESH_SUFFIXES)
    stems = [p.stem for p in files]
    dup = sorted({s for s in stems if stems.count(s) > 1})
    if dup:
        raise ConfigError(f"several mesh files share the id {dup[0]!r}")
    if len(files) < 2:
        raise ConfigError(f"collection {directory} holds {len(files)} meshes; at least 2 are needed")
    return files


def preprocess_stage(files, cache: Cache) -> list:
    shapes = []
    for path in files:
        try:
            raw = load_mesh(path)
            key = digest("preprocess", raw.content_hash())
            hit = cache.lookup("preprocess", key)
            if hit is None:
                mesh = preprocess(raw)
                hit = cache.commit_dir("preprocess", key,
                                       lambda d: write_ply(d / "mesh.ply", mesh.vertices, mesh.triangles))
            v, t = read_arrays(hit / "mesh.ply")
            shapes.append(Shape(raw.id, Mesh(v, t, id=raw.id), key))
        except VALIDATION_ERRORS:
            raise
        except Exception as e:
            raise StageError("preprocess", path.name, e) from e
    return shapes


def spectral_stage(shapes, config: PipelineConfig, cache: Cache):
    for s in shapes:
        k = min(config.basis_size, s.mesh.n_vertices)
        key = digest("spectral", s.key, k)
        try:
            hit = cache.lookup("spectral", key)
            if hit is None:
                basis = eigendecomposition(mass_matrix(s.mesh), stiffness_matrix(s.mesh), k)
                hit = cache.commit_dir("spectral", key, lambda d: save_basis(d / "basis.bin", basis, s.key))
            s.basis = load_basis(hit / "basis.bin", s.key)
            if s.basis is None:
                raise RuntimeError("cached basis is unreadable")
            s.wks = wks_descriptor(s.basis, config.wks_energies)
        except VALIDATION_ERRORS:
            raise
        except Exception as e:
            raise StageError("spectral", s.id, e) from e
        if s.basis.k < config.match.k_max:
            raise ConfigError(f"mesh {s.id!r} has {s.mesh.n_vertices} vertices, too few for k_max="
                              f"{config.match.k_max}")


# ---------------------------------------------------------------------------
# pairwise matching


def _match_job(args):
    src, tgt, cfg = args
    return hierarchical_match(src.mesh, src.basis, tgt.mesh, tgt.basis, src.wks, tgt.wks, cfg)


def save_match(directory, result: MatchResult, source: Mesh, config_hash: str):
    directory = Path(directory)
    write_correspondence(directory / "correspondence.txt", result.pi)
    write_ply(directory / "registration.ply", result.registration, source.triangles)
    meta = {
        "source": result.meta.get("source"),
        "target": result.meta.get("target"),
        "matchLoss": result.match_loss,
        "perLevelEnergy": list(result.level_energies),
        "schedule": list(result.schedule),
        "converged": result.converged,
        "configHash": config_hash,
        "C": result.alignment.C.tolist(),
        "tau": result.alignment.tau.tolist(),
    }
    atomic_write_text(directory / "meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_match(directory, n_target: int) -> MatchResult:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    pi = read_correspondence(directory / "correspondence.txt", n_target)
    reg, _ = read_arrays(directory / "registration.ply")
    return MatchResult(
        pi=pi, registration=reg, match_loss=meta["matchLoss"],
        level_energies=tuple(meta["perLevelEnergy"]),
        alignment=AlignmentParams(np.array(meta["C"]), np.array(meta["tau"])),
        schedule=tuple(meta["schedule"]), converged=meta["converged"],
        meta={"source": meta["source"], "target": meta["target"]},
    )


def check_guardrail(shapes, config: PipelineConfig):
    if config.match.subsample is not None:
        return
    for s in shapes:
        if s.mesh.n_vertices > config.max_vertices:
            raise ConfigError(f"mesh {s.id!r} has {s.mesh.n_vertices} vertices (limit {config.max_vertices}); "
                              "pass --subsample N to match a farthest-point sample")


def cached_stage(cache: Cache, stage: str, key: str, build, dest) -> Path:
    """Reuse or build the artifact directory of a stage and copy it to ``dest``."""
    src = cache.lookup(stage, key) or cache.commit_dir(stage, key, build)
    shutil.copytree(src, dest, dirs_exist_ok=True)
    return src


def match_stage(shapes, config: PipelineConfig, cache: Cache, pairs=None) -> tuple:
    """Match every ordered pair (or the given ones); returns (store, keys)."""
    check_guardrail(shapes, config)
    by_id = {s.id: s for s in shapes}
    if pairs is None:
        pairs = list(itertools.permutations([s.id for s in shapes], 2))
    cfg_hash = digest(config.match_dict())
    keys = {(a, b): digest("match", by_id[a].key, by_id[b].key, cfg_hash) for a, b in pairs}
    todo = []
    for p in pairs:
        if cache.lookup("match", keys[p]) is None:
            todo.append(p)

    def commit(p, result):
        a, b = p
        result = replace(result, meta={"source": a, "target": b})
        cache.commit_dir("match", keys[p], lambda d: save_match(d, result, by_id[a].mesh, cfg_hash))

    jobs = [(by_id[a], by_id[b], config.match) for a, b in todo]
    if config.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(config.jobs, len(jobs))) as pool:
            futures = [pool.submit(_match_job, j) for j in jobs]
            for p, fut in zip(todo, futures):
                try:
                    commit(p, fut.result())
                except Exception as e:
                    raise StageError("match", f"pair {p[0]!r} -> {p[1]!r}", e) from e
    else:
        for p, job in zip(todo, jobs):
            try:
                commit(p, _match_job(job))
            except Exception as e:
                raise StageError("match", f"pair {p[0]!r} -> {p[1]!r}", e) from e

    store = PairStore({s.id: s.mesh.vertices for s in shapes})
    for a, b in pairs:
        store.add(a, b, load_match(cache.path("match", keys[a, b]), by_id[b].mesh.n_vertices))
    return store, keys


# ---------------------------------------------------------------------------
# collection-level stages


def position_colors(vertices) -> np.ndarray:
    """RGB in [0, 255] from the bounding-box normalized position."""
    v = np.asarray(vertices, dtype=np.float64)
    lo, hi = v.min(axis=0), v.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    return np.round(255.0 * (v - lo) / span)


def transfer_colors(colors, pi: Correspondence, target_vertices) -> np.ndarray:
    """Carry source colors to the target along ``pi``.

    Target vertices hit by several sources get the mean color; vertices no
    source maps to copy their nearest hit neighbour.
    """
    colors = np.asarray(colors, dtype=np.float64)
    n = pi.n_target
    acc = np.zeros((n, 3))
    cnt = np.zeros(n)
    np.add.at(acc, pi.target_index, colors)
    np.add.at(cnt, pi.target_index, 1.0)
    hit = cnt > 0
    out = np.zeros((n, 3))
    out[hit] = acc[hit] / cnt[hit, None]
    if (~hit).any():
        tv = np.asarray(target_vertices)
        hit_idx = np.flatnonzero(hit)
        _, nn = cKDTree(tv[hit_idx]).query(tv[~hit])
        out[~hit] = out[hit_idx[nn]]
    return np.round(out)


def read_pairs(path, ids) -> list:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise ConfigError(f"{path}:{lineno}: expected two shape ids")
        for p in parts:
            if p not in ids:
                raise ConfigError(f"{path}:{lineno}: unknown shape id {p!r}")
        if parts[0] == parts[1]:
            raise ConfigError(f"{path}:{lineno}: query pair repeats {parts[0]!r}")
        pairs.append((parts[0], parts[1]))
    return pairs


STAGES = ("preprocess", "spectral", "match", "graph", "multi-match", "evaluate", "mds", "export-colors")


@dataclass
class PipelineResult:
    shapes: list
    store: PairStore | None = None
    graph: object = None
    coords: np.ndarray | None = None
    multi: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)


def run_pipeline(collection, out_dir, config: PipelineConfig = PipelineConfig(), cache_root=None,
                 query_pairs=None, gt_dir=None, until: str = "export-colors") -> PipelineResult:
    """Run the stages up to and including ``until``; write artifacts to ``out_dir``.

    ``query_pairs`` is a list of ``(source id, target id)`` for the
    multi-match, evaluation and color outputs (default: every ordered pair).
    Ground truth is read from ``gt_dir/<source>__<target>.txt`` when present.
    """
    if until not in STAGES:
        raise ConfigError(f"unknown stage {until!r}")
    stop = STAGES.index(until)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = Cache(cache_root or os.environ.get(CACHE_ENV) or out / "cache")
    started = time.time()
    files = list_collection(collection)
    shapes = preprocess_stage(files, cache)
    res = PipelineResult(shapes)
    manifest = {
        "tool": "multimatch", "version": __version__,
        "config": config.to_dict(), "configHash": digest(config.to_dict()),
        "meshes": {s.id: {"key": s.key, "vertices": s.mesh.n_vertices} for s in shapes},
        "stages": cache.stats, "started": started,
    }
    res.manifest = manifest
    ids = [s.id for s in shapes]
    if query_pairs is None:
        query_pairs = list(itertools.permutations(ids, 2))
    for a, b in query_pairs:
        if a not in ids or b not in ids:
            raise ConfigError(f"query pair ({a!r}, {b!r}) names an unknown shape")

    def finish():
        manifest["finished"] = time.time()
        atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return res

    if stop < STAGES.index("spectral"):
        return finish()
    spectral_stage(shapes, config, cache)
    manifest["spectral"] = {s.id: {"k": s.basis.k} for s in shapes}
    if stop < STAGES.index("match"):
        return finish()

    store, keys = match_stage(shapes, config, cache)
    res.store = store
    manifest["pairs"] = {
        "unordered": len(ids) * (len(ids) - 1) // 2,
        "directed": len(keys),
        "keys": {pair_name(a, b): k for (a, b), k in sorted(keys.items())},
    }
    for (a, b), k in sorted(keys.items()):
        dst = out / "matches" / pair_name(a, b)
        shutil.copytree(cache.path("match", k), dst, dirs_exist_ok=True)
    if stop < STAGES.index("graph"):
        return finish()

    graph_key = digest("graph", sorted(keys.values()), config.topology, config.refine_iterations)

    def build_graph_dir(d):
        g, _ = refine(store, ids, config.topology, config.refine_iterations)
        atomic_write_text(d / "graph.json", graph_to_json(g, mds_embedding(g)))

    cached_stage(cache, "graph", graph_key, build_graph_dir, out)
    doc = json.loads((out / "graph.json").read_text())
    graph = graph_from_json((out / "graph.json").read_text())
    coords = np.array(doc["mds"])
    if config.refine_iterations > 1:
        # the refined maps themselves are needed downstream
        _, store = refine(store, ids, config.topology, config.refine_iterations)
    res.graph, res.store, res.coords = graph, store, coords
    manifest["graph"] = {"key": graph_key, "topology": graph.topology, **graph.meta}
    if stop < STAGES.index("multi-match"):
        return finish()

    multi_key = digest("multi-match", graph_key, [list(p) for p in query_pairs])

    def build_multi_dir(d):
        summary = {}
        for a, b in query_pairs:
            try:
                mm = multi_match(graph, store, graph.index(a), graph.index(b))
            except Exception as e:
                raise StageError("multi-match", f"pair {a!r} -> {b!r}", e) from e
            write_correspondence(d / f"{pair_name(a, b)}.txt", mm.pi)
            summary[pair_name(a, b)] = {"path": [graph.nodes[p] for p in mm.path],
                                        "cycleScore": mm.cycle_score}
        atomic_write_text(d / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")

    cached_stage(cache, "multi-match", multi_key, build_multi_dir, out / "multimatch")
    summary = json.loads((out / "multimatch" / "summary.json").read_text())
    n_vertices = {s.id: s.mesh.n_vertices for s in shapes}
    for a, b in query_pairs:
        entry = summary[pair_name(a, b)]
        pi = read_correspondence(out / "multimatch" / f"{pair_name(a, b)}.txt", n_vertices[b])
        res.multi[a, b] = MultiMatch(tuple(graph.index(n) for n in entry["path"]), pi, entry["cycleScore"])
    manifest["multiMatch"] = {"key": multi_key, "pairs": len(query_pairs)}
    if stop < STAGES.index("evaluate"):
        return finish()

    if gt_dir is not None:
        by_id = {s.id: s for s in shapes}
        direct, multi = [], []
        for a, b in query_pairs:
            gt_path = Path(gt_dir) / f"{pair_name(a, b)}.txt"
            if not gt_path.exists():
                continue
            try:
                gt = read_ground_truth(gt_path)
                rm = geodesic_error(res.multi[a, b].pi, gt, by_id[b].mesh)
                rd = geodesic_error(store[a, b].pi, gt, by_id[b].mesh)
            except Exception as e:
                raise StageError("evaluate", f"pair {a!r} -> {b!r}", e) from e
            res.reports[a, b] = {"multi": rm, "direct": rd}
            direct.append(rd)
            multi.append(rm)
            atomic_write_text(out / "eval" / f"{pair_name(a, b)}.csv", curve_csv(rm))
            atomic_write_text(out / "eval" / f"{pair_name(a, b)}.json", summary_json(rm, (a, b)))
            atomic_write_text(out / "eval" / f"{pair_name(a, b)}.direct.json", summary_json(rd, (a, b)))
        if multi:
            agg_m, agg_d = aggregate(multi), aggregate(direct)
            atomic_write_text(out / "eval" / "curve.csv", curve_csv(agg_m))
            doc = {"pairs": len(multi), "meanError": agg_m.mean_error, "meanErrorDirect": agg_d.mean_error,
                   "count": int(len(agg_m.per_vertex_error))}
            atomic_write_text(out / "eval" / "summary.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
            manifest["evaluation"] = doc
    if stop < STAGES.index("mds"):
        return finish()

    atomic_write_text(out / "mds.csv", "id,x,y\n" + "".join(
        f"{n},{float(x)!r},{float(y)!r}\n" for n, (x, y) in zip(graph.nodes, coords)))
    if stop < STAGES.index("export-colors"):
        return finish()

    by_id = {s.id: s for s in shapes}

    def build_colors_dir(d):
        for a, b in query_pairs:
            src, tgt = by_id[a].mesh, by_id[b].mesh
            cs = position_colors(src.vertices)
            ct = transfer_colors(cs, res.multi[a, b].pi, tgt.vertices)
            write_ply(d / f"{pair_name(a, b)}.source.ply", src.vertices, src.triangles, cs)
            write_ply(d / f"{pair_name(a, b)}.target.ply", tgt.vertices, tgt.triangles, ct)

    cached_stage(cache, "export-colors", digest("colors", multi_key), build_colors_dir, out / "colors")
    return finish()


def match_pair_files(source_path, target_path, out_dir, config: PipelineConfig = PipelineConfig(),
                     cache_root=None) -> MatchResult:
    """Match two mesh files directly and write the result to ``out_dir``."""
    out = Path(out_dir)
    cache = Cache(cache_root or os.environ.get(CACHE_ENV) or out / "cache")
    files = [Path(source_path), Path(target_path)]
    if files[0].stem == files[1].stem:
        raise ConfigError("source and target need distinct file stems")
    shapes = preprocess_stage(files, cache)
    spectral_stage(shapes, config, cache)
    a, b = shapes[0].id, shapes[1].id
    store, keys = match_stage(shapes, config, cache, pairs=[(a, b)])
    shutil.copytree(cache.path("match", keys[a, b]), out / pair_name(a, b), dirs_exist_ok=True)
    return store[a, b]
