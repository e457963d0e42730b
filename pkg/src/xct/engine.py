"""Fused sparse matrix-multivector products over staged blocks.

``project``/``backproject`` emulate the staged kernel: per thread-block
partition, each stage's input elements are gathered into a bounded scratch
buffer at the storage precision, then every packed entry contributes one
fused multiply-add per fused slice into a per-row accumulator kept at the
mode's compute precision (single for mixed, as the kernel does).  The naive
``spmm_reference`` is the double-precision ground truth every variant is
checked against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .matrixstore import (
    WARP_WIDTH,
    MatrixBlock,
    PackedStagedMatrix,
    compute_dtype,
    element_bytes,
    storage_dtype,
)

__all__ = [
    "Minibatch",
    "PartialResult",
    "KernelCounters",
    "spmm_reference",
    "project",
    "backproject",
    "reduce_partials",
    "flops_and_bytes",
]

MAX_FFACTOR = 50


@dataclass
class Minibatch:
    """FFACTOR fused slice vectors, stored column-wise at one precision."""

    data: np.ndarray
    precision: str

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ValueError("minibatch data must be (elements, ffactor)")
        if not 1 <= self.ffactor <= MAX_FFACTOR:
            raise ValueError(f"fusing factor must be in [1, {MAX_FFACTOR}]")

    @property
    def ffactor(self) -> int:
        return self.data.shape[1]

    @staticmethod
    def from_columns(data: np.ndarray, precision: str) -> "Minibatch":
        return Minibatch(np.ascontiguousarray(data, dtype=storage_dtype(precision)),
                         precision)


@dataclass
class PartialResult:
    """One process's partial output over its footprint elements."""

    owner: int
    elements: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    precision: str = "double"

    @property
    def ffactor(self) -> int:
        return self.values.shape[1]


def spmm_reference(block, x: np.ndarray) -> np.ndarray:
    """Naive row-ordered SpMM in double precision (the kernel oracle).

    Accepts anything in compressed-row form (canonical matrix or block);
    ``x`` may be a vector or an (elements, ffactor) matrix.
    """
    squeeze = x.ndim == 1
    cols = x.reshape(-1, 1) if squeeze else x
    num_rows = len(block.indptr) - 1
    if cols.shape[0] != block.num_cols:
        raise ValueError(
            f"input has {cols.shape[0]} elements, block expects {block.num_cols}")
    xd = cols.astype(np.float64)
    out = np.zeros((num_rows, cols.shape[1]))
    for r in range(num_rows):
        s, e = block.indptr[r], block.indptr[r + 1]
        if s == e:
            continue
        vals = block.values[s:e]
        # one contiguous gather and dot per fused column so fusing
        # decomposes into independent SpMVs exactly
        for f in range(cols.shape[1]):
            out[r, f] = np.dot(vals, xd[block.indices[s:e], f])
    return out[:, 0] if squeeze else out


def _check_compatible(staged: PackedStagedMatrix, minibatch: Minibatch) -> None:
    if minibatch.ffactor != staged.ffactor:
        raise ValueError(
            f"minibatch fusing factor {minibatch.ffactor} does not match the "
            f"staged matrix (built for {staged.ffactor})")
    if minibatch.precision != staged.precision:
        raise ValueError(
            f"minibatch precision {minibatch.precision!r} does not match the "
            f"staged matrix ({staged.precision!r})")
    if minibatch.data.shape[0] != staged.num_cols:
        raise ValueError(
            f"minibatch has {minibatch.data.shape[0]} elements, staged block "
            f"expects {staged.num_cols}")


def project(staged: PackedStagedMatrix, minibatch: Minibatch,
            use_sliced_layout: bool = False) -> PartialResult:
    """Partial projection of a minibatch through one staged block.

    The default path streams the row-ordered execution view of the packed
    entries; ``use_sliced_layout`` walks the zero-padded warp groups
    literally instead.  Both accumulate each row's entries in the same
    order, so they agree bit-for-bit at every precision.
    """
    _check_compatible(staged, minibatch)
    cdtype = compute_dtype(staged.precision)
    sdtype = storage_dtype(staged.precision)
    xs = minibatch.data.astype(sdtype, copy=False)
    acc = np.zeros((staged.num_rows, staged.ffactor), dtype=cdtype)
    if use_sliced_layout:
        _apply_sliced(staged, xs, acc)
    else:
        _apply_exec(staged, xs, acc)
    out = acc * cdtype(2.0 ** (-staged.value_scale_exp))
    if staged.precision in ("half", "mixed"):
        out = out.astype(np.float16)
    return PartialResult(owner=staged.owner, elements=staged.row_ids,
                         values=out, precision=staged.precision)


def backproject(staged_transposed: PackedStagedMatrix,
                minibatch: Minibatch) -> PartialResult:
    """Partial backprojection; the same kernel run on the transposed block."""
    return project(staged_transposed, minibatch)


def _apply_exec(staged: PackedStagedMatrix, xs: np.ndarray, acc: np.ndarray) -> None:
    # one vectorized gather-multiply-add per entry rank keeps the per-row
    # accumulation order identical to the literal warp-sliced walk
    cdtype = acc.dtype
    for tb in range(staged.num_partitions):
        r0 = staged.tb_ptr[tb]
        for s in staged.stages_of_partition(tb):
            base = staged.mapdispl[s]
            buffer = xs[staged.buffmap[base:base + staged.mapnz[s]]]
            bufc = buffer.astype(cdtype, copy=False)
            ex = staged.stage_exec[s]
            if len(ex.slots) == 0:
                continue
            lens = ex.lengths.astype(cdtype, copy=False)
            for n in range(len(ex.rank_ptr) - 1):
                a, b = ex.rank_ptr[n], ex.rank_ptr[n + 1]
                acc[r0 + ex.rows[a:b]] += bufc[ex.slots[a:b]] * lens[a:b, None]


def _apply_sliced(staged: PackedStagedMatrix, xs: np.ndarray, acc: np.ndarray) -> None:
    cdtype = acc.dtype
    n_rows = staged.num_rows
    for w in range(len(staged.warp_stage)):
        s = staged.warp_stage[w]
        base = staged.mapdispl[s]
        buffer = xs[staged.buffmap[base:base + staged.mapnz[s]]]
        bufc = buffer.astype(cdtype, copy=False)
        rows = staged.warp_row_base[w] + np.arange(WARP_WIDTH)
        # lanes may run past the owning partition's row range; those lanes
        # hold only padding and must not touch the accumulator
        tb = np.searchsorted(staged.tb_ptr, staged.warp_row_base[w], side="right") - 1
        valid = rows < min(n_rows, staged.tb_ptr[tb + 1])
        target = rows[valid]
        for n in range(staged.displ[w], staged.displ[w + 1]):
            ind = staged.packed_ind[n * WARP_WIDTH:(n + 1) * WARP_WIDTH]
            ln = staged.packed_len[n * WARP_WIDTH:(n + 1) * WARP_WIDTH]
            acc[target] += (bufc[ind] * ln.astype(cdtype, copy=False)[:, None])[valid]


def reduce_partials(partials: list[PartialResult],
                    ownership: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    """Sum partial contributions per element and hand each owner its slice.

    Contributors are visited in process-id order, so the result is
    independent of arrival (and worker) order.
    """
    owned_all = (np.concatenate([np.asarray(v) for v in ownership.values()])
                 if ownership else np.empty(0, dtype=np.int64))
    if len(np.unique(owned_all)) != len(owned_all):
        raise ValueError("ownership map assigns some element to multiple owners")
    if not partials:
        raise ValueError("no partial results to reduce")
    ff = partials[0].ffactor
    prec = partials[0].precision
    if any(p.ffactor != ff or p.precision != prec for p in partials):
        raise ValueError("partials disagree on fusing factor or precision")
    cdtype = compute_dtype(prec)
    ordered = sorted(partials, key=lambda p: p.owner)
    out: dict[int, np.ndarray] = {}
    for pid in sorted(ownership):
        owned = np.asarray(ownership[pid])
        total = np.zeros((len(owned), ff), dtype=cdtype)
        for partial in ordered:
            if len(partial.elements) == 0:
                continue
            pos = np.searchsorted(partial.elements, owned)
            pos_c = np.minimum(pos, len(partial.elements) - 1)
            hit = (pos < len(partial.elements)) & (partial.elements[pos_c] == owned)
            if hit.any():
                total[hit] += partial.values[pos_c[hit]].astype(cdtype, copy=False)
        out[pid] = total
    return out


@dataclass
class KernelCounters:
    """Work and traffic accounting for one staged block application."""

    nnz: int
    ffactor: int
    precision: str
    flops: int
    entry_bytes: int
    gather_bytes: int
    output_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.entry_bytes + self.gather_bytes + self.output_bytes

    @property
    def arithmetic_intensity(self) -> float:
        return self.flops / self.total_bytes if self.total_bytes else 0.0


def flops_and_bytes(staged: PackedStagedMatrix, ffactor: int | None = None,
                    precision: str | None = None) -> KernelCounters:
    """FLOP and byte counters: 2 FMA-flops per entry per fused slice, bytes
    for packed entries, staged input gathers, and outputs."""
    ff = ffactor or staged.ffactor
    prec = precision or staged.precision
    eb = element_bytes(prec)
    len_bytes = np.dtype(storage_dtype(prec)).itemsize
    return KernelCounters(
        nnz=staged.nnz,
        ffactor=ff,
        precision=prec,
        flops=2 * staged.nnz * ff,
        entry_bytes=staged.padded_entries * (2 + len_bytes),
        gather_bytes=int(staged.mapnz.sum()) * eb * ff,
        output_bytes=staged.num_rows * eb * ff,
    )
