"""Command-line surface: phantom, project, plan, recon, export, bench.

Every command is deterministic for a fixed seed and exits nonzero with a
message on any error.  ``recon`` writes a manifest sufficient to re-run
the reconstruction bit-identically.
"""

from __future__ import annotations

import argparse
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import comm, dataio, engine, matrixstore, pipeline, solver
from .geometry import (
    PHANTOM_KINDS,
    Volume,
    build_system_matrix,
    generate_phantom,
    make_geometry,
    simulate_measurements,
)

# geometries whose estimated system matrix would not fit a desk build go
# through the analytic what-if path of the planner instead
BUILD_NNZ_LIMIT = 50_000_000


def _geometry_from_args(args):
    try:
        k, m, n = (int(v) for v in args.geometry.split(","))
    except ValueError:
        raise SystemExit(f"error: --geometry expects K,M,N, got {args.geometry!r}")
    a0, a1 = 0.0, math.pi
    if getattr(args, "angles", None):
        try:
            a0, a1 = (float(v) for v in args.angles.split(","))
        except ValueError:
            raise SystemExit(f"error: --angles expects a0,a1, got {args.angles!r}")
    return make_geometry(k, m, n, a0, a1)


def _topology_from_args(args) -> comm.Topology:
    if getattr(args, "topology", None):
        return comm.load_topology(args.topology)
    return comm.default_topology()


def cmd_phantom(args) -> int:
    vol = generate_phantom(args.kind, args.size, args.slices, seed=args.seed)
    dataio.write_volume(args.out, vol)
    print(f"wrote {args.kind} phantom {vol.data.shape} to {args.out}")
    return 0


def cmd_project(args) -> int:
    vol = dataio.read_volume(getattr(args, "in"))
    if vol.role != "tomogram":
        raise SystemExit("error: projection input must be a tomogram dataset")
    geom = _geometry_from_args(args)
    rows, cols = vol.slice_shape
    if (rows, cols) != (geom.grid_n, geom.grid_n):
        raise SystemExit(
            f"error: tomogram slices are {rows}x{cols}, geometry expects "
            f"{geom.grid_n}x{geom.grid_n}")
    if vol.num_slices != geom.num_rows:
        raise SystemExit(
            f"error: tomogram has {vol.num_slices} slices, geometry M={geom.num_rows}")
    matrix = build_system_matrix(geom)
    sino = simulate_measurements(matrix, vol, noise_sigma=args.noise, seed=args.seed)
    dataio.write_volume(args.out, sino)
    print(f"wrote sinogram {sino.data.shape} to {args.out}")
    return 0


def _estimated_nnz(geom) -> int:
    # each ray crosses O(N) voxels; averaged over angles and offsets the
    # crossing count is about N per ray
    return geom.num_angles * geom.num_detector_cols * geom.grid_n


def _footprint_bytes(geom, p_d: int, ffactor: int, precision: str,
                     stage_capacity: int, block_partitions: int,
                     nnz: int | None = None) -> int:
    """Per-process memory model: packed matrix (both directions) plus
    input/output vector slabs for one fused minibatch plus stage buffers."""
    entry_bytes = 2 + matrixstore.element_bytes(precision)
    eb = matrixstore.element_bytes(precision)
    nnz = nnz if nnz is not None else _estimated_nnz(geom)
    matrix_bytes = 2 * nnz * entry_bytes
    vector_elems = geom.num_voxels + geom.num_rays
    vectors = 2 * ffactor * vector_elems * eb
    staging = block_partitions * (stage_capacity or 0)
    return (matrix_bytes + vectors) // p_d + staging


def cmd_plan(args) -> int:
    geom = _geometry_from_args(args)
    topology = _topology_from_args(args)
    nnz_est = _estimated_nnz(geom)
    stage_capacity = args.stage_capacity

    if args.pd == "auto":
        p_d = 1
        while _footprint_bytes(geom, p_d, args.ffactor, args.precision,
                               stage_capacity, args.block_partitions) > args.mem_cap:
            p_d += 1
            if p_d > 10_000_000:
                raise SystemExit("error: no feasible data-process count under the cap")
    else:
        p_d = int(args.pd)
    footprint = _footprint_bytes(geom, p_d, args.ffactor, args.precision,
                                 stage_capacity, args.block_partitions)
    nodes_per_group = -(-p_d // topology.gpus_per_node)
    p_b = args.pb if args.pb else max(1, min(topology.num_nodes // max(1, nodes_per_group),
                                             max(1, geom.num_rows)))
    fits = p_d <= topology.total_gpus and nodes_per_group * p_b <= topology.num_nodes

    print(f"plan: P_d={p_d} P_b={p_b} estimated nnz={nnz_est} "
          f"per-process footprint={footprint} B cap={args.mem_cap} B "
          f"fits-topology={fits}")

    if nnz_est <= BUILD_NNZ_LIMIT and fits:
        _plan_desk_report(args, geom, topology, p_d, p_b)
    else:
        rows = [
            ("p_d", p_d), ("p_b", p_b), ("nnz_estimate", nnz_est),
            ("per_process_footprint_bytes", footprint),
            ("memory_cap_bytes", args.mem_cap),
            ("fits_topology", int(fits)),
        ]
        dataio.write_csv(args.report, ["quantity", "value"], rows)
        print(f"wrote what-if plan summary to {args.report}")
    return 0


def _plan_desk_report(args, geom, topology, p_d: int, p_b: int) -> None:
    cfg = pipeline.SystemConfig(
        precision=args.precision, ffactor=args.ffactor, p_b=p_b, p_d=p_d,
        tile_size=args.tile_size, stage_capacity_bytes=args.stage_capacity,
        block_partitions=args.block_partitions, topology=topology,
        comm_strategy="hierarchical")
    system = pipeline.assemble(geom, cfg)
    report = system.forward.report
    rows = list(report.level_rows())
    header = ["level", "bytes", "est_seconds", "retained_bytes_after"]
    dataio.write_csv(args.report, header, rows)
    print(f"wrote per-level communication report to {args.report}")
    print(f"inter-node bytes: direct={report.direct_inter_node_bytes} "
          f"hierarchical={report.hier_inter_node_bytes} "
          f"({report.inter_node_reduction_pct:.1f}% reduction)")


def _slice_groups(num_slices: int, p_b: int) -> list[tuple[int, int]]:
    base, rem = divmod(num_slices, p_b)
    groups = []
    start = 0
    for i in range(p_b):
        size = base + (1 if i < rem else 0)
        if size == 0:
            continue
        groups.append((start, start + size))
        start += size
    return groups


def cmd_recon(args) -> int:
    manifest = dataio.RunManifest(command="recon", arguments=_echo_args(args),
                                  seeds={"seed": args.seed})
    sino = dataio.read_volume(getattr(args, "in"))
    if sino.role != "sinogram":
        raise SystemExit("error: reconstruction input must be a sinogram dataset")
    geom = _geometry_from_args(args)
    if sino.slice_shape != (geom.num_angles, geom.num_detector_cols):
        raise SystemExit(
            f"error: sinogram slices are {sino.slice_shape}, geometry expects "
            f"{(geom.num_angles, geom.num_detector_cols)}")
    topology = _topology_from_args(args)

    t0 = time.perf_counter()
    cfg = pipeline.SystemConfig(
        precision=args.precision, ffactor=args.ffactor, p_b=args.pb, p_d=args.pd,
        tile_size=args.tile_size, stage_capacity_bytes=args.stage_capacity,
        block_partitions=args.block_partitions, topology=topology,
        comm_strategy=args.comm, workers=args.workers)
    system = pipeline.assemble(geom, cfg)
    manifest.phase_seconds["assemble"] = time.perf_counter() - t0

    y_all = sino.slices_as_columns().astype(np.float64)
    groups = _slice_groups(sino.num_slices, args.pb)
    solve_cfg = solver.SolveConfig(max_iters=args.iters,
                                   early_stop_iters=args.early_stop,
                                   precision=args.precision, seed=args.seed)
    t0 = time.perf_counter()
    results = [solver.cgls_solve(system, y_all[:, lo:hi], solve_cfg)
               for lo, hi in groups]
    manifest.phase_seconds["solve"] = time.perf_counter() - t0

    x = np.concatenate([r.x for r in results], axis=1)
    tomo = Volume(x.T.reshape(sino.num_slices, geom.grid_n, geom.grid_n),
                  role="tomogram")
    dataio.write_volume(args.out, tomo)
    manifest.add_output(args.out)

    merged = _merge_histories(results)
    manifest.counters = {
        "iterations": merged.iterations,
        "projections": results[0].projections,
        "backprojections": results[0].backprojections,
    }
    report = system.forward.report
    manifest.volume_report = {
        "direct_bytes": report.direct_bytes,
        "direct_inter_node_bytes": report.direct_inter_node_bytes,
        "hier_inter_node_bytes": report.hier_inter_node_bytes,
        "level_bytes": report.level_bytes,
        "retained_bytes": report.retained_bytes,
    }
    if args.residuals:
        Path(args.residuals).write_text(
            solver.residual_curve_report({args.precision: merged}), encoding="ascii")
        manifest.residual_csv = str(args.residuals)
        manifest.add_output(args.residuals)
    if args.manifest:
        manifest.save(args.manifest)
    final = merged.residual_history[-1] if merged.residual_history else float("nan")
    print(f"reconstructed {tomo.data.shape} in {merged.iterations} iterations, "
          f"final relative residual {final:.3e}")
    return 0


def _merge_histories(results: list[solver.SolveResult]) -> solver.SolveResult:
    """Joint residual curve over batch groups (rms over group residuals)."""
    if len(results) == 1:
        return results[0]
    depth = min(r.iterations for r in results)
    hist, grad, secs = [], [], []
    for i in range(depth):
        hist.append(math.sqrt(sum(r.residual_history[i] ** 2 for r in results)
                              / len(results)))
        grad.append(math.sqrt(sum(r.gradient_history[i] ** 2 for r in results)
                              / len(results)))
        secs.append(sum(r.iteration_seconds[i] for r in results))
    merged = solver.SolveResult(x=np.zeros(0), residual_history=hist,
                                gradient_history=grad, iteration_seconds=secs,
                                projections=results[0].projections,
                                backprojections=results[0].backprojections,
                                mode=results[0].mode)
    return merged


def cmd_export(args) -> int:
    vol = dataio.read_volume(getattr(args, "in"))
    if not 0 <= args.slice < vol.num_slices:
        raise SystemExit(
            f"error: slice {args.slice} out of range (volume has {vol.num_slices})")
    dataio.write_pgm(args.out, vol.data[args.slice].astype(np.float64))
    print(f"wrote slice {args.slice} to {args.out}")
    return 0


def _parse_sweep(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in text.split(",")]


def cmd_bench(args) -> int:
    geom = _geometry_from_args(args)
    if _estimated_nnz(geom) > BUILD_NNZ_LIMIT:
        raise SystemExit("error: geometry too large for a desk-scale benchmark")
    matrix = build_system_matrix(geom)
    block = matrixstore.block_from_matrix(matrix)
    rows = []
    for ff in _parse_sweep(args.ffactor_sweep):
        staged = matrixstore.build_staged(
            block, args.stage_capacity, args.block_partitions, ff,
            precision=args.precision)
        c = engine.flops_and_bytes(staged)
        rows.append((ff, c.nnz, c.flops, c.total_bytes, c.arithmetic_intensity))
    dataio.write_csv(args.report, ["ffactor", "nnz", "flops", "bytes", "intensity"],
                     rows)
    print(f"wrote fusing-factor sweep ({len(rows)} points) to {args.report}")
    return 0


def _echo_args(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _add_geometry_flags(p, angles: bool = True):
    p.add_argument("--geometry", required=True, metavar="K,M,N",
                   help="angles, slices, detector columns")
    if angles:
        p.add_argument("--angles", default=None, metavar="A0,A1",
                       help="angle range in radians (default 0,pi)")


def _add_parallel_flags(p):
    p.add_argument("--ffactor", type=int, default=16,
                   help="slices fused per SpMM minibatch")
    p.add_argument("--precision", default="double",
                   choices=list(matrixstore.PRECISIONS))
    p.add_argument("--topology", default=None, help="topology description file")
    p.add_argument("--tile-size", type=int, default=8)
    p.add_argument("--stage-capacity", type=int, default=matrixstore.DEFAULT_STAGE_CAPACITY,
                   help="stage buffer capacity in bytes")
    p.add_argument("--block-partitions", type=int, default=4,
                   help="thread-block level partitions per process block")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xct",
        description="Desk-scale iterative parallel-beam CT reconstruction pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic tomogram")
    p.add_argument("--kind", required=True, choices=list(PHANTOM_KINDS))
    p.add_argument("--size", type=int, required=True, help="voxels per slice side")
    p.add_argument("--slices", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("project", help="simulate measurements from a tomogram")
    _add_geometry_flags(p)
    p.add_argument("--in", required=True)
    p.add_argument("--noise", type=float, default=0.0,
                   help="additive Gaussian noise level relative to max signal")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("plan", help="partitioning and communication planning")
    _add_geometry_flags(p)
    p.add_argument("--pb", type=int, default=0,
                   help="batch groups (0 = derive from remaining GPUs)")
    p.add_argument("--pd", default="auto",
                   help="data processes per group, or 'auto' to fit the memory cap")
    _add_parallel_flags(p)
    p.add_argument("--mem-cap", type=int, default=16 * 1024**3,
                   help="per-process memory cap in bytes")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("recon", help="iterative reconstruction from a sinogram")
    p.add_argument("--in", required=True)
    _add_geometry_flags(p)
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--early-stop", type=int, default=None)
    _add_parallel_flags(p)
    p.add_argument("--pb", type=int, default=1)
    p.add_argument("--pd", type=int, default=1)
    p.add_argument("--comm", default="hierarchical",
                   choices=("direct", "hierarchical"))
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--residuals", default=None,
                   help="write the residual curve CSV here")
    p.set_defaults(func=cmd_recon)

    p = sub.add_parser("export", help="export one slice as 16-bit PGM")
    p.add_argument("--in", required=True)
    p.add_argument("--slice", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("bench", help="fusing-factor sweep of kernel counters")
    _add_geometry_flags(p)
    p.add_argument("--ffactor-sweep", default="1..50",
                   help="range lo..hi or comma list")
    p.add_argument("--precision", default="mixed",
                   choices=list(matrixstore.PRECISIONS))
    p.add_argument("--stage-capacity", type=int,
                   default=matrixstore.DEFAULT_STAGE_CAPACITY)
    p.add_argument("--block-partitions", type=int, default=4)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except SystemExit as exc:
        if exc.code and isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
            return 2
        return int(exc.code or 0)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, dataio.DatasetFormatError, solver.SolverDivergence) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
