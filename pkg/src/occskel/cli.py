"""Command-line entry point: ``python -m occskel <command> ...``.

Exit codes: 0 success, 1 other failure, 2 bad input or precondition,
3 empty level set, 4 solver divergence, 5 surface sampling failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import evalkit, fixtures, occnet, pcio, skeletor, surfacer, trainer
from .config import PipelineConfig
from .errors import (CorruptCheckpoint, DegenerateCloud, EmptyCloud, EmptyLevelSet,
                     InsufficientConvergence, OccSkelError, SolverDiverged)
from .errors import ConfigError, InvalidArchitecture, ParseError

log = logging.getLogger("occskel")

THREADS_ENV = "OCCSKEL_THREADS"
EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_EMPTY, EXIT_DIVERGED, EXIT_SAMPLING = 0, 1, 2, 3, 4, 5

_INPUT_ERRORS = (ParseError, EmptyCloud, DegenerateCloud, ConfigError, CorruptCheckpoint,
                 InvalidArchitecture, ValueError, OSError)


# ---------------------------------------------------------------------------
# side files
# ---------------------------------------------------------------------------

def transform_path(checkpoint):
    return Path(str(checkpoint) + ".transform")


def write_sidecar(checkpoint, tf: pcio.NormalizationTransform, normalized: pcio.PointCloud):
    """Normalization transform plus the normalized bounding box."""
    lo, hi = normalized.points.min(axis=0), normalized.points.max(axis=0)
    text = tf.to_text()
    text += "bbox_lo = " + ", ".join(repr(float(v)) for v in lo) + "\n"
    text += "bbox_hi = " + ", ".join(repr(float(v)) for v in hi) + "\n"
    transform_path(checkpoint).write_text(text)


def read_sidecar(checkpoint):
    """``(transform, (lo, hi))`` or ``(None, None)`` if no side file exists."""
    path = transform_path(checkpoint)
    if not path.exists():
        return None, None
    text = path.read_text()
    tf = pcio.NormalizationTransform.from_text(text)
    values = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
    values = {k.strip(): v for k, v in values.items()}
    if "bbox_lo" not in values:
        return tf, None
    lo = np.array([float(v) for v in values["bbox_lo"].split(",")])
    hi = np.array([float(v) for v in values["bbox_hi"].split(",")])
    return tf, (lo, hi)


def is_checkpoint(path):
    with open(path, "rb") as fh:
        return fh.read(4) == occnet.MAGIC


def _load_config(path):
    return PipelineConfig.load(path) if path else PipelineConfig()


def _inflate(lo, hi, frac):
    pad = (hi - lo) * frac
    return lo - pad, hi + pad


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_fit(args):
    cfg = _load_config(args.config)
    if args.config:
        cfg.warn_missing("training")
    tcfg = cfg.training
    if args.iterations is not None:
        tcfg.iterations = args.iterations
    if args.seed is not None:
        tcfg.seed = args.seed
    tcfg.validate()
    cloud = pcio.load_point_cloud(args.cloud)
    normalized, tf = pcio.normalize(cloud)

    def progress(rec):
        log.info("iter %d  samp %.3e  entr %.3e  total %.3e  (%.1fs)", rec.iteration,
                 rec.sampling_loss, rec.entropy_loss, rec.total_loss, rec.wall_time)

    params, tlog = trainer.fit(normalized, tcfg, progress=progress)
    occnet.save_checkpoint(args.out, params)
    write_sidecar(args.out, tf, normalized)
    log_path = args.log or str(args.out) + ".log.csv"
    Path(log_path).write_text(tlog.to_csv())
    if tlog.records:
        last = tlog.records[-1]
        print(f"final loss_samp {last.sampling_loss:.6g} loss_total {last.total_loss:.6g}")
    print(f"checkpoint {args.out} ({occnet.model_byte_size(params)} bytes)")
    return EXIT_OK


def parse_iso(text):
    """``median``, ``zero``, ``value=<x>`` or a bare number."""
    t = text.strip().lower()
    if t in ("median", "zero"):
        return t
    if t.startswith("value="):
        t = t[len("value="):]
    try:
        return float(t)
    except ValueError:
        raise ValueError(f"--iso must be median, zero or value=<number>, got {text!r}") from None


def reconstruction_grid(params, checkpoint, resolution, inflation):
    _, box = read_sidecar(checkpoint)
    if box is None:
        lo, hi = np.full(3, -1.0), np.full(3, 1.0)
    else:
        lo, hi = _inflate(box[0], box[1], inflation)
    return surfacer.evaluate_grid(params, (lo, hi), resolution)


def cmd_reconstruct(args):
    cfg = _load_config(args.config)
    scfg = cfg.surface
    resolution = args.resolution if args.resolution is not None else scfg.resolution
    if resolution < 2:
        raise ValueError("--resolution must be at least 2")
    iso_mode = parse_iso(args.iso if args.iso is not None else scfg.iso)
    params = occnet.load_checkpoint(args.checkpoint)
    grid = reconstruction_grid(params, args.checkpoint, resolution, scfg.bounds_inflation)
    if iso_mode == "median":
        iso = float(surfacer.median_threshold(grid))
    elif iso_mode == "zero":
        iso = 0.0
    else:
        iso = iso_mode
    mesh = surfacer.marching_cubes(grid, iso, close_boundary=iso_mode == "median")
    if mesh.empty_level_set:
        raise EmptyLevelSet(f"isovalue {iso!r} is outside the grid range "
                            f"[{float(grid.values.min())!r}, {float(grid.values.max())!r}]")
    surfacer.export_mesh(mesh, args.out)
    print(f"isovalue {iso!r}")
    print(f"vertices {len(mesh.vertices)} faces {len(mesh.triangles)}")
    return EXIT_OK


def _energy_csv(result: skeletor.ContractionResult):
    lines = ["iteration,energy,total_area"]
    for it, (e, a) in enumerate(zip(result.energies, result.total_areas[1:]), 1):
        lines.append(f"{it},{float(e)!r},{float(a)!r}")
    return "\n".join(lines) + "\n"


def cmd_skeletonize(args):
    cfg = _load_config(args.config)
    if args.config:
        cfg.warn_missing("contraction")
    ccfg = cfg.contraction
    seed = cfg.seed if args.seed is None else args.seed
    if is_checkpoint(args.source):
        params = occnet.load_checkpoint(args.source)
        count = args.samples if args.samples is not None else cfg.surface.surface_samples
        pts = surfacer.sample_surface_points(params, count, seed=seed,
                                             max_steps=cfg.surface.projection_steps,
                                             damping=cfg.surface.projection_damping)
        tf, _ = read_sidecar(args.source)
        tf = tf or pcio.NormalizationTransform()
        work = pts
    else:
        cloud = pcio.load_point_cloud(args.source)
        if len(cloud) < 10:
            raise ValueError(f"contraction needs at least 10 points, got {len(cloud)}")
        work, tf = pcio.normalize(cloud)
    if len(work) <= ccfg.k:
        raise ValueError(f"need more than k={ccfg.k} points, got {len(work)}")
    result = skeletor.contract(work, ccfg)
    skel = skeletor.extract_skeleton(result.positions, result.graph, ccfg.node_spacing, seed)
    skel.nodes = tf.inverse(skel.nodes) if len(skel.nodes) else skel.nodes
    skeletor.export_skeleton(skel, args.out)
    energy_path = args.energy_csv or str(args.out) + ".energy.csv"
    Path(energy_path).write_text(_energy_csv(result))
    deg = skel.degrees()
    print(f"iterations {len(result.energies)} nodes {len(skel.nodes)} edges {len(skel.edges)} "
          f"max_degree {int(deg.max()) if len(deg) else 0}")
    if result.diverged:
        raise SolverDiverged("contraction solve diverged; wrote the last converged state")
    return EXIT_OK


def cmd_eval(args):
    cfg = _load_config(args.config)
    samples = args.samples if args.samples is not None else cfg.evaluation.eval_samples
    scale = args.scale_factor if args.scale_factor is not None else cfg.evaluation.scale_factor
    seed = cfg.seed if args.seed is None else args.seed
    if samples <= 0:
        raise ValueError("--samples must be positive")
    reference = pcio.load_point_cloud(args.reference)
    if is_checkpoint(args.reconstructed):
        params = occnet.load_checkpoint(args.reconstructed)
        tf, _ = read_sidecar(args.reconstructed)
        if tf is None:
            _, tf = pcio.normalize(reference)
        recon = surfacer.sample_surface_points(params, samples, seed=seed,
                                               max_steps=cfg.surface.projection_steps,
                                               damping=cfg.surface.projection_damping).points
    else:
        _, tf = pcio.normalize(reference)
        recon = tf.forward(pcio.load_point_cloud(args.reconstructed).points)
    ref = tf.forward(reference.points)
    report = evalkit.metrics_report(recon, ref, scale)
    sys.stdout.write(report.to_text())
    if args.csv:
        path = Path(args.csv)
        new = not path.exists() or path.stat().st_size == 0
        with open(path, "a") as fh:
            if new:
                fh.write(report.csv_header() + "\n")
            fh.write(report.csv_row() + "\n")
    return EXIT_OK


def cmd_report(args):
    cloud = pcio.load_point_cloud(args.cloud)
    params = occnet.load_checkpoint(args.checkpoint)
    sys.stdout.write(evalkit.compression_report(cloud, params).to_text())
    return EXIT_OK


def cmd_make_fixture(args):
    if args.n < 1:
        raise ValueError("n must be >= 1")
    cloud = fixtures.make_fixture(args.shape, args.n, args.noise, args.seed)
    pcio.save_point_cloud(args.out, cloud, binary=not args.ascii)
    print(f"wrote {args.n} {args.shape} points to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="occskel", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None,
                   help=f"cap on BLAS worker threads (default: ${THREADS_ENV})")
    p.add_argument("-q", "--quiet", action="store_true", help="only print warnings and errors")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fit", help="fit an occupancy field to a point cloud")
    s.add_argument("cloud")
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", help="CSV log path (default: <out>.log.csv)")
    s.add_argument("--iterations", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("reconstruct", help="extract a mesh from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--out", required=True, help="mesh path (.obj or .ply)")
    s.add_argument("--resolution", type=int)
    s.add_argument("--iso", help="median, zero or value=<x>")
    s.add_argument("--config")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("skeletonize", help="contract a cloud or fitted surface to a skeleton")
    s.add_argument("source", help="checkpoint or point cloud")
    s.add_argument("--out", required=True, help="skeleton OBJ path")
    s.add_argument("--config")
    s.add_argument("--samples", type=int, help="surface samples when the source is a checkpoint")
    s.add_argument("--energy-csv")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_skeletonize)

    s = sub.add_parser("eval", help="Chamfer and Hausdorff metrics against a reference cloud")
    s.add_argument("reconstructed", help="checkpoint or point cloud")
    s.add_argument("reference")
    s.add_argument("--samples", type=int)
    s.add_argument("--scale-factor", type=float)
    s.add_argument("--csv", help="append a CSV row to this file")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="storage of a cloud file versus a checkpoint")
    s.add_argument("cloud")
    s.add_argument("checkpoint")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("make-fixture", help="write a synthetic point cloud")
    s.add_argument("shape", choices=fixtures.SHAPES)
    s.add_argument("--n", type=int, default=4096)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ascii", action="store_true", help="ascii ply instead of binary")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_fixture)
    return p


def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return None


def run(args):
    """Execute parsed arguments; returns an exit status."""
    try:
        threads = _threads(args)
        if threads is not None and threads < 1:
            raise ValueError("--threads must be positive")
        with threadpool_limits(limits=threads):
            return args.func(args)
    except EmptyLevelSet as exc:
        code = EXIT_EMPTY
        msg = exc
    except SolverDiverged as exc:
        code = EXIT_DIVERGED
        msg = exc
    except InsufficientConvergence as exc:
        code = EXIT_SAMPLING
        msg = exc
    except _INPUT_ERRORS as exc:
        code = EXIT_INPUT
        msg = f"{type(exc).__name__}: {exc}"
    except OccSkelError as exc:
        code = EXIT_FAIL
        msg = f"{type(exc).__name__}: {exc}"
    print(f"occskel {args.command}: {msg}", file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
