"""Command-line driver.

Exit status is 0 on success, 2 when an input or option is invalid and 1 on
an internal failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

from . import __version__
from .graph import TOPOLOGIES
from .mesh import mass_matrix, preprocess, stiffness_matrix
from .meshio import load_mesh, save_mesh
from .pipeline import (CACHE_ENV, STAGES, VALIDATION_ERRORS, ConfigError, PipelineConfig, StageError,
                       list_collection, load_config, match_pair_files, read_pairs, run_pipeline,
                       with_overrides)
from .spectral import eigendecomposition, save_basis


def _add_match_flags(p):
    p.add_argument("--config", type=Path, help="JSON configuration file; flags override it")
    p.add_argument("--kmin", type=int, help="coarsest spectral level (default 6)")
    p.add_argument("--kmax", type=int, help="finest spectral level (default 21)")
    p.add_argument("--entropy", type=float, help="Sinkhorn entropy weight")
    p.add_argument("--subsample", type=int, metavar="N",
                   help="match a farthest-point sample of N vertices per shape")
    p.add_argument("--jobs", type=int, help="worker processes for pairwise matching")
    p.add_argument("--cache", type=Path, help=f"cache root (default ${CACHE_ENV} or OUT/cache)")


def _add_collection_flags(p):
    p.add_argument("collection", type=Path, help="directory of .off/.ply meshes")
    p.add_argument("out", type=Path, help="output directory")
    _add_match_flags(p)
    p.add_argument("--topology", choices=TOPOLOGIES, help="shape graph topology (default full)")
    p.add_argument("--pairs", type=Path, help="file of query pairs, one 'source target' per line")
    p.add_argument("--gt-dir", type=Path, help="ground-truth directory with <source>__<target>.txt files")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multimatch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every stage on a collection")
    _add_collection_flags(p)
    for stage, text in [("build-graph", "run up to the shape graph"),
                        ("multi-match", "run up to the multi-matches"),
                        ("evaluate", "run up to the evaluation reports"),
                        ("mds", "run up to the MDS node embedding"),
                        ("export-colors", "run up to the colormapped exports")]:
        _add_collection_flags(sub.add_parser(stage, help=text))

    p = sub.add_parser("preprocess", help="center and rescale one mesh")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path, help=".off or .ply")

    p = sub.add_parser("spectral", help="compute and store the eigenbasis of one mesh")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path, help="binary basis file")
    p.add_argument("--k", type=int, default=31, help="number of eigenpairs (default 31)")

    p = sub.add_parser("match-pair", help="match one mesh onto another")
    p.add_argument("source", type=Path)
    p.add_argument("target", type=Path)
    p.add_argument("out", type=Path)
    _add_match_flags(p)
    return parser


def _config(args) -> PipelineConfig:
    config = load_config(args.config) if args.config else PipelineConfig()
    return with_overrides(config, k_min=args.kmin, k_max=args.kmax, entropy=args.entropy,
                          subsample=args.subsample, jobs=args.jobs,
                          topology=getattr(args, "topology", None))


def _stage_of(command: str) -> str:
    return {"run": STAGES[-1], "build-graph": "graph"}.get(command, command)


def _run(args) -> int:
    if args.command == "preprocess":
        mesh = preprocess(load_mesh(args.input))
        save_mesh(args.output, mesh)
        print(f"wrote {args.output} ({mesh.n_vertices} vertices)")
        return 0
    if args.command == "spectral":
        mesh = preprocess(load_mesh(args.input))
        if not 1 <= args.k <= mesh.n_vertices:
            raise ConfigError(f"--k must lie in [1, {mesh.n_vertices}]")
        basis = eigendecomposition(mass_matrix(mesh), stiffness_matrix(mesh), args.k)
        save_basis(args.output, basis, mesh.content_hash())
        print(f"wrote {args.output}: k={basis.k}, eigenvalues {basis.evals[0]:.4g} .. {basis.evals[-1]:.4g}")
        return 0
    config = _config(args)
    if args.command == "match-pair":
        result = match_pair_files(args.source, args.target, args.out, config, args.cache)
        print(json.dumps({"matchLoss": result.match_loss, "converged": result.converged}))
        return 0
    query = None
    if args.pairs is not None:
        ids = [p.stem for p in list_collection(args.collection)]
        query = read_pairs(args.pairs, set(ids))
    if args.gt_dir is not None and not args.gt_dir.is_dir():
        raise ConfigError(f"ground-truth directory {args.gt_dir} does not exist")
    res = run_pipeline(args.collection, args.out, config, args.cache, query, args.gt_dir,
                       until=_stage_of(args.command))
    for stage, s in res.manifest["stages"].items():
        print(f"{stage:14s} hits={s['hits']} misses={s['misses']}")
    if "evaluation" in res.manifest:
        ev = res.manifest["evaluation"]
        print(f"mean error {ev['meanError']:.4f} (direct {ev['meanErrorDirect']:.4f}) over {ev['pairs']} pairs")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    warnings.simplefilter("default")
    try:
        return _run(args)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2 if isinstance(e.cause, VALIDATION_ERRORS) else 1
    except Exception as e:  # internal failure
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
