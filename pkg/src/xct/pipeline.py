"""Assembly of the distributed operator.

Builds, for a geometry and a parallelization config, everything one
reconstruction needs: the memoized system matrix, Hilbert subdomains for
both planes, per-process staged projection/backprojection blocks, the
communication plans, and chunked forward/adjoint application with the
precision policy (normalize, cast, fused kernel, plan execution,
denormalize).  Results are independent of the worker count because every
(process, minibatch) task owns its output and reductions run in a fixed
order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import comm, engine, hilbert, matrixstore
from .geometry import ScanGeometry, SystemMatrix, build_system_matrix

__all__ = ["SystemConfig", "AssembledSystem", "assemble", "assemble_from_matrix"]


@dataclass(frozen=True)
class SystemConfig:
    """Parallelization and precision knobs for one assembled system."""

    precision: str = "double"
    ffactor: int = 16
    p_b: int = 1
    p_d: int = 1
    tile_size: int = 8
    block_partitions: int = 4
    stage_capacity_bytes: int | None = matrixstore.DEFAULT_STAGE_CAPACITY
    comm_strategy: str = "hierarchical"
    topology: comm.Topology = field(default_factory=comm.default_topology)
    workers: int = 1

    def __post_init__(self):
        if self.precision not in matrixstore.PRECISIONS:
            raise ValueError(f"unknown precision {self.precision!r}")
        if self.comm_strategy not in ("direct", "hierarchical"):
            raise ValueError(f"unknown comm strategy {self.comm_strategy!r}")
        if not 1 <= self.ffactor <= engine.MAX_FFACTOR:
            raise ValueError(f"ffactor must be in [1, {engine.MAX_FFACTOR}]")


@dataclass
class _Side:
    """One direction of the operator: staged blocks plus its comm plan."""

    staged: list[matrixstore.PackedStagedMatrix]
    input_elements: list[np.ndarray]
    footprints: dict
    ownership: dict
    plan: object
    report: comm.VolumeReport
    num_inputs: int
    num_outputs: int


class AssembledSystem:
    """Distributed forward/adjoint operator over one batch group's slices."""

    def __init__(self, matrix: SystemMatrix, config: SystemConfig,
                 geometry: ScanGeometry | None = None):
        self.matrix = matrix
        self.config = config
        self.geometry = geometry
        self.placement = comm.map_partitions(config.p_b, config.p_d, config.topology)
        self.value_scale_exp = (
            matrixstore.half_rescale_exponent(matrix.values)
            if config.precision in ("half", "mixed") else 0)
        if config.p_d == 1:
            tomo_subs, sino_subs = self._trivial_subdomains()
        else:
            tomo_subs, sino_subs = self._hilbert_subdomains()
        self.tomogram_subdomains = tomo_subs
        self.sinogram_subdomains = sino_subs
        proj_blocks, back_blocks = matrixstore.partition_matrix(
            matrix, tomo_subs, sino_subs)
        self.forward = self._build_side(
            proj_blocks,
            inputs=[s.elements for s in tomo_subs],
            ownership={s.owner: s.elements for s in sino_subs},
            num_inputs=matrix.num_cols, num_outputs=matrix.num_rows)
        self.adjoint = self._build_side(
            back_blocks,
            inputs=[s.elements for s in sino_subs],
            ownership={s.owner: s.elements for s in tomo_subs},
            num_inputs=matrix.num_rows, num_outputs=matrix.num_cols)

    # -- construction ---------------------------------------------------

    def _trivial_subdomains(self):
        tomo_grid = hilbert.TileGrid("tomogram", 1, self.matrix.num_cols,
                                     tile_size=max(1, self.matrix.num_cols))
        sino_grid = hilbert.TileGrid("sinogram", 1, self.matrix.num_rows,
                                     tile_size=max(1, self.matrix.num_rows))
        return hilbert.decompose(tomo_grid, 1), hilbert.decompose(sino_grid, 1)

    def _hilbert_subdomains(self):
        if self.geometry is None:
            raise ValueError("data parallelism beyond P_d=1 needs a scan geometry")
        g = self.geometry
        tomo_grid = hilbert.TileGrid("tomogram", g.grid_n, g.grid_n,
                                     self.config.tile_size)
        sino_grid = hilbert.TileGrid("sinogram", g.num_angles, g.num_detector_cols,
                                     self.config.tile_size)
        return (hilbert.decompose(tomo_grid, self.config.p_d),
                hilbert.decompose(sino_grid, self.config.p_d))

    def _build_side(self, blocks, inputs, ownership, num_inputs, num_outputs) -> _Side:
        cfg = self.config
        staged = [matrixstore.build_staged(
            blk, cfg.stage_capacity_bytes, cfg.block_partitions, cfg.ffactor,
            precision=cfg.precision, value_scale_exp=self.value_scale_exp)
            for blk in blocks]
        footprints = {blk.owner: blk.row_ids for blk in blocks}
        planner = (comm.plan_hierarchical if cfg.comm_strategy == "hierarchical"
                   else comm.plan_direct)
        plan, report = planner(footprints, ownership, self.placement,
                               ffactor=cfg.ffactor,
                               elem_bytes=matrixstore.element_bytes(cfg.precision))
        return _Side(staged=staged, input_elements=list(inputs),
                     footprints=footprints, ownership=ownership, plan=plan,
                     report=report, num_inputs=num_inputs, num_outputs=num_outputs)

    # -- application ----------------------------------------------------

    @property
    def num_cols(self) -> int:
        return self.matrix.num_cols

    @property
    def num_rows(self) -> int:
        return self.matrix.num_rows

    def apply_forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        """Full projection of (num_cols, slices) data; returns full-scale
        values and the normalization states used per minibatch."""
        return self._apply(self.forward, x)

    def apply_adjoint(self, y: np.ndarray) -> tuple[np.ndarray, list]:
        return self._apply(self.adjoint, y)

    def _apply(self, side: _Side, data: np.ndarray) -> tuple[np.ndarray, list]:
        squeeze = data.ndim == 1
        cols = data.reshape(-1, 1) if squeeze else data
        if cols.shape[0] != side.num_inputs:
            raise ValueError(
                f"operator expects {side.num_inputs} input elements, "
                f"got {cols.shape[0]}")
        cfg = self.config
        out_dtype = np.float64 if cfg.precision == "double" else np.float32
        out = np.zeros((side.num_outputs, cols.shape[1]), dtype=out_dtype)
        states = []
        ff = cfg.ffactor
        chunks = [(i, min(i + ff, cols.shape[1])) for i in range(0, cols.shape[1], ff)]
        for lo, hi in chunks:
            chunk = cols[:, lo:hi]
            if hi - lo < ff:
                pad = np.zeros((cols.shape[0], ff - (hi - lo)), dtype=chunk.dtype)
                chunk = np.concatenate([chunk, pad], axis=1)
            scaled, state = matrixstore.normalize(chunk, cfg.precision)
            states.append(state)
            partials = self._run_partials(side, scaled)
            reduced = comm.execute_plan(side.plan, partials)
            for pid, owned in side.ownership.items():
                vals = matrixstore.denormalize(reduced[pid], state)
                out[np.asarray(owned), lo:hi] = vals[:, :hi - lo].astype(out_dtype)
        return (out[:, 0] if squeeze else out), states

    def _run_partials(self, side: _Side, scaled: np.ndarray) -> list:
        cfg = self.config

        def task(pid: int) -> engine.PartialResult:
            xp = scaled[side.input_elements[pid]]
            mb = engine.Minibatch(np.ascontiguousarray(xp), cfg.precision)
            return engine.project(side.staged[pid], mb)

        pids = range(len(side.staged))
        if cfg.workers <= 1:
            return [task(p) for p in pids]
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(task, pids))

    # -- reporting helpers ------------------------------------------------

    def volume_reports(self) -> dict:
        return {"projection": self.forward.report,
                "backprojection": self.adjoint.report}

    def kernel_counters(self) -> engine.KernelCounters:
        """Aggregate work counters for one full forward application."""
        total = None
        for staged in self.forward.staged:
            c = engine.flops_and_bytes(staged)
            if total is None:
                total = c
            else:
                total = engine.KernelCounters(
                    nnz=total.nnz + c.nnz, ffactor=c.ffactor, precision=c.precision,
                    flops=total.flops + c.flops,
                    entry_bytes=total.entry_bytes + c.entry_bytes,
                    gather_bytes=total.gather_bytes + c.gather_bytes,
                    output_bytes=total.output_bytes + c.output_bytes)
        return total


def assemble(geometry: ScanGeometry, config: SystemConfig) -> AssembledSystem:
    """Build the distributed operator for a scan geometry (matrix memoized)."""
    matrix = build_system_matrix(geometry)
    return AssembledSystem(matrix, config, geometry=geometry)


def assemble_from_matrix(matrix, config: SystemConfig | None = None) -> AssembledSystem:
    """Wrap an arbitrary compressed-row operator (single data process)."""
    config = config or SystemConfig(p_d=1)
    if config.p_d != 1:
        config = replace(config, p_d=1)
    return AssembledSystem(matrix, config, geometry=None)
