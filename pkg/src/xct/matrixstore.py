"""Execution-ready sparse formats.

The canonical system matrix is partitioned into per-process blocks, each
block is packed into 4-byte (index, length) entries and rearranged into a
multi-stage buffered layout: every thread-block partition's input footprint
is split into fixed-capacity stages, entries are grouped per stage, and
within a stage they are laid out in zero-padded groups of W = 32 rows so a
warp-style kernel can stream them.  Half-precision storage is protected by
a power-of-two length rescale chosen at build time and by adaptive max-norm
normalization of the vectors flowing through the operator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PRECISIONS",
    "StageSplitRequired",
    "MatrixBlock",
    "PackReport",
    "PackedEntries",
    "PackedStagedMatrix",
    "NormalizationState",
    "block_from_matrix",
    "partition_matrix",
    "transpose",
    "pack",
    "build_staged",
    "half_rescale_exponent",
    "normalize",
    "denormalize",
    "storage_dtype",
    "compute_dtype",
    "element_bytes",
]

PRECISIONS = ("double", "single", "half", "mixed")

WARP_WIDTH = 32
DEFAULT_STAGE_CAPACITY = 96 * 1024
# headroom below the half-precision maximum (65504) for accumulation
SAFE_MAX = 60000.0

_STORE = {"double": np.float64, "single": np.float32, "half": np.float16,
          "mixed": np.float16}
_COMPUTE = {"double": np.float64, "single": np.float32, "half": np.float16,
            "mixed": np.float32}


class StageSplitRequired(ValueError):
    """A stage-local index exceeds the 16-bit packed range."""


def storage_dtype(precision: str) -> type:
    _check_precision(precision)
    return _STORE[precision]


def compute_dtype(precision: str) -> type:
    _check_precision(precision)
    return _COMPUTE[precision]


def element_bytes(precision: str) -> int:
    return np.dtype(storage_dtype(precision)).itemsize


def _check_precision(precision: str) -> None:
    if precision not in PRECISIONS:
        raise ValueError(f"unknown precision {precision!r}; expected one of {PRECISIONS}")


@dataclass
class MatrixBlock:
    """One process's slice of the operator, in canonical CSR over local ids.

    ``row_ids``/``col_ids`` map local indices back to the global domains.
    For a projection block the columns are the owned tomogram voxels and
    the rows are the rays the block touches (its footprint).
    """

    owner: int
    row_ids: np.ndarray = field(repr=False)
    col_ids: np.ndarray = field(repr=False)
    indptr: np.ndarray = field(repr=False)
    indices: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)

    @property
    def num_rows(self) -> int:
        return len(self.row_ids)

    @property
    def num_cols(self) -> int:
        return len(self.col_ids)

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.num_rows, self.num_cols))
        row_of = np.repeat(np.arange(self.num_rows), np.diff(self.indptr))
        dense[row_of, self.indices] = self.values
        return dense

    def to_dense_global(self, num_rows: int, num_cols: int) -> np.ndarray:
        dense = np.zeros((num_rows, num_cols))
        row_of = np.repeat(self.row_ids, np.diff(self.indptr))
        dense[row_of, self.col_ids[self.indices]] = self.values
        return dense


def block_from_matrix(matrix, owner: int = 0) -> MatrixBlock:
    """Wrap a whole canonical matrix as the single process-0 block."""
    return MatrixBlock(
        owner=owner,
        row_ids=np.arange(matrix.num_rows, dtype=np.int64),
        col_ids=np.arange(matrix.num_cols, dtype=np.int64),
        indptr=matrix.indptr.copy(),
        indices=matrix.indices.astype(np.int64),
        values=matrix.values.astype(np.float64),
    )


def _restrict_columns(matrix, cols: np.ndarray, owner: int) -> MatrixBlock:
    """A[:, cols] dropping empty rows; local column ids follow sorted cols."""
    col_mask = np.zeros(matrix.num_cols, dtype=bool)
    col_mask[cols] = True
    keep = col_mask[matrix.indices]
    row_of = np.repeat(np.arange(matrix.num_rows), np.diff(matrix.indptr))
    rows_kept = row_of[keep]
    cols_kept = matrix.indices[keep]
    vals_kept = matrix.values[keep]
    footprint = np.unique(rows_kept)
    local_row = np.searchsorted(footprint, rows_kept)
    local_col = np.searchsorted(cols, cols_kept)
    counts = np.bincount(local_row, minlength=len(footprint))
    indptr = np.zeros(len(footprint) + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    # entries are already ordered by (row, col) because the source is CSR
    return MatrixBlock(owner=owner, row_ids=footprint, col_ids=np.asarray(cols),
                       indptr=indptr, indices=local_col.astype(np.int64),
                       values=vals_kept.astype(np.float64))


def _restrict_rows(matrix, rows: np.ndarray, owner: int) -> MatrixBlock:
    """A[rows, :] dropping untouched columns."""
    chunks_i = [matrix.indices[matrix.indptr[r]:matrix.indptr[r + 1]] for r in rows]
    chunks_v = [matrix.values[matrix.indptr[r]:matrix.indptr[r + 1]] for r in rows]
    counts = np.array([len(c) for c in chunks_i], dtype=np.int64)
    indices = (np.concatenate(chunks_i) if chunks_i
               else np.empty(0, dtype=np.int64))
    values = np.concatenate(chunks_v) if chunks_v else np.empty(0)
    footprint = np.unique(indices)
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return MatrixBlock(owner=owner, row_ids=np.asarray(rows), col_ids=footprint,
                       indptr=indptr,
                       indices=np.searchsorted(footprint, indices).astype(np.int64),
                       values=values.astype(np.float64))


def partition_matrix(matrix, tomogram_subdomains, sinogram_subdomains
                     ) -> tuple[list[MatrixBlock], list[MatrixBlock]]:
    """Per-process projection blocks A_p (columns owned, footprint rows) and
    backprojection blocks A_p^T (transpose of the owned-ray restriction)."""
    _check_partition([s.elements for s in tomogram_subdomains], matrix.num_cols,
                     "tomogram subdomains")
    _check_partition([s.elements for s in sinogram_subdomains], matrix.num_rows,
                     "sinogram subdomains")
    projection = [_restrict_columns(matrix, sub.elements, owner=sub.owner)
                  for sub in tomogram_subdomains]
    backprojection = [transpose(_restrict_rows(matrix, sub.elements, owner=sub.owner))
                      for sub in sinogram_subdomains]
    return projection, backprojection


def _check_partition(element_sets, domain_size: int, what: str) -> None:
    merged = np.concatenate(element_sets) if element_sets else np.empty(0, dtype=np.int64)
    if len(merged) != domain_size or len(np.unique(merged)) != domain_size:
        raise ValueError(f"{what} do not partition a domain of {domain_size} elements")


def transpose(block: MatrixBlock) -> MatrixBlock:
    """Exact structural transpose; involution up to entry identity."""
    n_rows, n_cols = block.num_rows, block.num_cols
    row_of = np.repeat(np.arange(n_rows), np.diff(block.indptr))
    order = np.argsort(block.indices, kind="stable")
    new_rows = block.indices[order]
    counts = np.bincount(block.indices, minlength=n_cols)
    indptr = np.zeros(n_cols + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return MatrixBlock(owner=block.owner, row_ids=block.col_ids.copy(),
                       col_ids=block.row_ids.copy(), indptr=indptr,
                       indices=row_of[order].astype(np.int64),
                       values=block.values[order].copy())


@dataclass
class PackReport:
    """Quantization outcome of casting lengths to the storage precision."""

    precision: str
    max_rel_error: float
    underflow_count: int

    @property
    def underflow(self) -> bool:
        return self.underflow_count > 0


@dataclass
class PackedEntries:
    """Cache-line friendly entry layout: uint16 local index + stored length."""

    ind: np.ndarray = field(repr=False)
    length: np.ndarray = field(repr=False)
    report: PackReport = None

    def __len__(self) -> int:
        return len(self.ind)

    @property
    def bytes_per_entry(self) -> int:
        return 2 + self.length.dtype.itemsize

    def unpack(self) -> tuple[np.ndarray, np.ndarray]:
        return self.ind.astype(np.int64), self.length.astype(np.float64)


def _quantization_report(values: np.ndarray, stored: np.ndarray,
                         precision: str) -> PackReport:
    back = stored.astype(np.float64)
    nz = values != 0
    underflow = int(np.count_nonzero(nz & (back == 0)))
    if nz.any():
        rel = np.abs(back[nz] - values[nz]) / np.abs(values[nz])
        max_rel = float(rel.max())
    else:
        max_rel = 0.0
    return PackReport(precision=precision, max_rel_error=max_rel,
                      underflow_count=underflow)


def pack(block: MatrixBlock, precision: str = "mixed") -> PackedEntries:
    """Pack a block's entries as (uint16 index, stored-precision length).

    Raises StageSplitRequired when local indices do not fit 16 bits; the
    caller must stage the block's footprint into smaller buffers first.
    """
    _check_precision(precision)
    if block.num_cols > np.iinfo(np.uint16).max + 1:
        raise StageSplitRequired(
            f"{block.num_cols} stage-local indices exceed the 16-bit packed range")
    stored = block.values.astype(storage_dtype(precision))
    return PackedEntries(ind=block.indices.astype(np.uint16), length=stored,
                         report=_quantization_report(block.values, stored, precision))


def half_rescale_exponent(values: np.ndarray) -> int:
    """Power-of-two exponent mapping the median length into [1, 2).

    Scaling lengths by an exact power of two keeps half-precision packing
    away from the subnormal range without introducing rounding of its own;
    it emulates enlarging the voxel size.
    """
    nz = values[values > 0]
    if len(nz) == 0:
        return 0
    return -int(math.floor(math.log2(float(np.median(nz)))))


@dataclass
class NormalizationState:
    """Per-application scaling so reduced-precision storage stays in range."""

    factor: float
    mode: str

    def __post_init__(self):
        if self.factor <= 0:
            raise ValueError("normalization factor must be positive")


def normalize(vector: np.ndarray, mode: str) -> tuple[np.ndarray, NormalizationState]:
    """Scale a vector to unit max-norm and cast to the mode's storage dtype.

    The factor is the vector's max-norm, recomputed at every call; a zero
    vector keeps factor 1 (no-op).  Division (not reciprocal multiply)
    makes the peak element exactly 1.
    """
    _check_precision(mode)
    if not np.all(np.isfinite(vector)):
        raise ValueError("cannot normalize non-finite data")
    peak = float(np.max(np.abs(vector))) if vector.size else 0.0
    factor = peak if peak > 0 else 1.0
    scaled = (vector / factor).astype(storage_dtype(mode))
    if scaled.size and float(np.max(np.abs(scaled.astype(np.float64)))) > SAFE_MAX:
        raise ValueError("normalized data exceeds the safe half-precision range")
    return scaled, NormalizationState(factor=factor, mode=mode)


def denormalize(vector: np.ndarray, state: NormalizationState) -> np.ndarray:
    """Undo ``normalize``.

    Returned in double (double mode) or single precision (all reduced
    modes): the rescaled magnitudes need not fit half range, which is the
    reason the data was normalized in the first place.
    """
    out_dtype = np.float64 if state.mode == "double" else np.float32
    return vector.astype(out_dtype) * out_dtype(state.factor)


@dataclass
class _StageExec:
    """Rank-major execution view of one stage's packed entries.

    Entries are ordered by (rank within row, row); applying one rank at a
    time reproduces the kernel's sequential per-row accumulation order
    exactly, while each rank is a single vectorized gather-multiply-add.
    """

    rank_ptr: np.ndarray = field(repr=False)   # per-rank entry ranges
    rows: np.ndarray = field(repr=False)       # tb-local row of each entry
    slots: np.ndarray = field(repr=False)      # stage-local input positions
    lengths: np.ndarray = field(repr=False)    # stored-precision lengths
    row_ptr: np.ndarray = field(repr=False)    # per-row counts (row-major view)


@dataclass
class PackedStagedMatrix:
    """Packed, multi-stage buffered form of one MatrixBlock.

    Layout mirrors a warp-sliced GPU kernel: ``buffdispl`` gives each
    thread-block partition its stage range, ``buffmap``/``mapdispl``/
    ``mapnz`` map stage buffers back to block-local input elements, and
    ``displ`` gives each (stage, warp) group its packed-entry range in
    groups of WARP_WIDTH slots with zero padding.
    """

    owner: int
    precision: str
    ffactor: int
    stage_capacity_bytes: int | None
    value_scale_exp: int
    row_ids: np.ndarray = field(repr=False)
    col_ids: np.ndarray = field(repr=False)
    tb_ptr: np.ndarray = field(repr=False)
    buffdispl: np.ndarray = field(repr=False)
    mapdispl: np.ndarray = field(repr=False)
    mapnz: np.ndarray = field(repr=False)
    buffmap: np.ndarray = field(repr=False)
    warp_stage: np.ndarray = field(repr=False)
    warp_row_base: np.ndarray = field(repr=False)
    displ: np.ndarray = field(repr=False)
    packed_ind: np.ndarray = field(repr=False)
    packed_len: np.ndarray = field(repr=False)
    stage_exec: list = field(repr=False, default_factory=list)
    nnz: int = 0
    report: PackReport = None

    @property
    def num_rows(self) -> int:
        return len(self.row_ids)

    @property
    def num_cols(self) -> int:
        return len(self.col_ids)

    @property
    def num_stages(self) -> int:
        return len(self.mapnz)

    @property
    def num_partitions(self) -> int:
        return len(self.tb_ptr) - 1

    @property
    def padded_entries(self) -> int:
        return len(self.packed_ind)

    @property
    def value_scale(self) -> float:
        return 2.0 ** self.value_scale_exp

    def stages_of_partition(self, tb: int) -> range:
        return range(self.buffdispl[tb], self.buffdispl[tb + 1])

    def entry_storage_bytes(self) -> int:
        return self.padded_entries * (2 + self.packed_len.dtype.itemsize)

    def gather_bytes(self, ffactor: int | None = None,
                     precision: str | None = None) -> int:
        eb = element_bytes(precision or self.precision)
        return int(self.mapnz.sum()) * eb * (ffactor or self.ffactor)

    def to_dense(self) -> np.ndarray:
        """Replay stage maps and packed entries back to a dense block."""
        dense = np.zeros((self.num_rows, self.num_cols))
        unscale = 2.0 ** (-self.value_scale_exp)
        for tb in range(self.num_partitions):
            r0 = self.tb_ptr[tb]
            for s in self.stages_of_partition(tb):
                ex = self.stage_exec[s]
                base = self.mapdispl[s]
                cols = self.buffmap[base + ex.slots]
                np.add.at(dense, (r0 + ex.rows, cols),
                          ex.lengths.astype(np.float64) * unscale)
        return dense


def build_staged(block: MatrixBlock, stage_capacity_bytes: int | None,
                 block_partitions: int, fusing_factor: int,
                 precision: str = "mixed",
                 value_scale_exp: int | None = None) -> PackedStagedMatrix:
    """Stage a block for execution.

    Each of ``block_partitions`` row chunks loads its input footprint in
    stages of at most ``stage_capacity_bytes`` (covering ``fusing_factor``
    fused slices at the storage precision); ``None`` means unbounded.
    The number of stages per partition is
    ceil(footprint_bytes * fusing_factor / stage_capacity_bytes).
    """
    _check_precision(precision)
    if fusing_factor < 1:
        raise ValueError("fusing_factor must be >= 1")
    if block_partitions < 1:
        raise ValueError("block_partitions must be >= 1")
    eb = element_bytes(precision)
    if stage_capacity_bytes is None:
        capacity_elems = None
    else:
        capacity_elems = stage_capacity_bytes // (eb * fusing_factor)
        if capacity_elems < 1:
            raise ValueError(
                f"stage capacity {stage_capacity_bytes} B cannot hold one element "
                f"at {precision} precision with fusing factor {fusing_factor}")

    if value_scale_exp is None:
        value_scale_exp = (half_rescale_exponent(block.values)
                           if precision in ("half", "mixed") else 0)
    scaled_values = block.values * (2.0 ** value_scale_exp)
    stored_all = scaled_values.astype(storage_dtype(precision))
    report = _quantization_report(scaled_values, stored_all, precision)

    block_partitions = min(block_partitions, max(1, block.num_rows))
    sizes = []
    base, rem = divmod(block.num_rows, block_partitions)
    for i in range(block_partitions):
        sizes.append(base + 1 if i < rem else base)
    tb_ptr = np.zeros(block_partitions + 1, dtype=np.int64)
    np.cumsum(sizes, out=tb_ptr[1:])

    buffdispl = [0]
    mapnz, buffmap_chunks = [], []
    warp_stage, warp_row_base = [], []
    displ = [0]
    ind_chunks, len_chunks = [], []
    stage_exec: list[_StageExec] = []

    for tb in range(block_partitions):
        r0, r1 = int(tb_ptr[tb]), int(tb_ptr[tb + 1])
        lo, hi = block.indptr[r0], block.indptr[r1]
        cols_used = np.unique(block.indices[lo:hi])
        if capacity_elems is None:
            n_stages = 1 if len(cols_used) else 0
            cap = max(1, len(cols_used))
        else:
            n_stages = -(-len(cols_used) // capacity_elems) if len(cols_used) else 0
            cap = capacity_elems
        if cap > np.iinfo(np.uint16).max + 1:
            cap = np.iinfo(np.uint16).max + 1
            n_stages = -(-len(cols_used) // cap) if len(cols_used) else 0
        buffdispl.append(buffdispl[-1] + n_stages)

        # stage of every entry: position of its column in the sorted
        # footprint, divided by the per-stage element capacity
        pos = np.searchsorted(cols_used, block.indices[lo:hi])
        entry_stage = pos // cap
        entry_slot = (pos - entry_stage * cap).astype(np.uint16)
        row_of = np.repeat(np.arange(r0, r1), np.diff(block.indptr[r0:r1 + 1]))

        n_rows_tb = r1 - r0
        n_warps = max(1, -(-n_rows_tb // WARP_WIDTH)) if n_rows_tb else 0
        for s in range(n_stages):
            chunk = cols_used[s * cap:(s + 1) * cap]
            mapnz.append(len(chunk))
            buffmap_chunks.append(chunk)
            in_stage = entry_stage == s
            st_rows = row_of[in_stage] - r0
            st_slots = entry_slot[in_stage]
            st_lens = stored_all[lo:hi][in_stage]
            counts = np.bincount(st_rows, minlength=n_rows_tb)
            row_ptr = np.zeros(n_rows_tb + 1, dtype=np.int64)
            np.cumsum(counts, out=row_ptr[1:])
            # rank of each entry within its row (entries arrive row-major)
            ranks = np.arange(len(st_rows)) - row_ptr[st_rows]
            order = np.lexsort((st_rows, ranks))
            width = int(counts.max()) if n_rows_tb else 0
            rank_counts = np.bincount(ranks, minlength=width)
            rank_ptr = np.zeros(width + 1, dtype=np.int64)
            np.cumsum(rank_counts, out=rank_ptr[1:])
            stage_exec.append(_StageExec(rank_ptr=rank_ptr,
                                         rows=st_rows[order],
                                         slots=st_slots[order].astype(np.int64),
                                         lengths=st_lens[order],
                                         row_ptr=row_ptr))
            # warp-sliced layout with zero padding at group granularity
            for w in range(n_warps):
                lane_rows = np.arange(w * WARP_WIDTH, (w + 1) * WARP_WIDTH)
                valid = lane_rows < n_rows_tb
                lane_counts = np.zeros(WARP_WIDTH, dtype=np.int64)
                lane_counts[valid] = counts[lane_rows[valid]]
                width = int(lane_counts.max())
                g_ind = np.zeros((width, WARP_WIDTH), dtype=np.uint16)
                g_len = np.zeros((width, WARP_WIDTH), dtype=storage_dtype(precision))
                for lane in range(WARP_WIDTH):
                    r = w * WARP_WIDTH + lane
                    if r >= n_rows_tb:
                        continue
                    a, b = row_ptr[r], row_ptr[r + 1]
                    g_ind[:b - a, lane] = st_slots[a:b]
                    g_len[:b - a, lane] = st_lens[a:b]
                warp_stage.append(len(mapnz) - 1)
                warp_row_base.append(r0 + w * WARP_WIDTH)
                displ.append(displ[-1] + width)
                ind_chunks.append(g_ind.reshape(-1))
                len_chunks.append(g_len.reshape(-1))

    mapnz_arr = np.array(mapnz, dtype=np.int64)
    mapdispl = np.zeros(len(mapnz) + 1, dtype=np.int64)
    np.cumsum(mapnz_arr, out=mapdispl[1:])
    return PackedStagedMatrix(
        owner=block.owner,
        precision=precision,
        ffactor=fusing_factor,
        stage_capacity_bytes=stage_capacity_bytes,
        value_scale_exp=value_scale_exp,
        row_ids=block.row_ids.copy(),
        col_ids=block.col_ids.copy(),
        tb_ptr=tb_ptr,
        buffdispl=np.array(buffdispl, dtype=np.int64),
        mapdispl=mapdispl,
        mapnz=mapnz_arr,
        buffmap=(np.concatenate(buffmap_chunks) if buffmap_chunks
                 else np.empty(0, dtype=np.int64)),
        warp_stage=np.array(warp_stage, dtype=np.int64),
        warp_row_base=np.array(warp_row_base, dtype=np.int64),
        displ=np.array(displ, dtype=np.int64),
        packed_ind=(np.concatenate(ind_chunks) if ind_chunks
                    else np.empty(0, dtype=np.uint16)),
        packed_len=(np.concatenate(len_chunks) if len_chunks
                    else np.empty(0, dtype=storage_dtype(precision))),
        stage_exec=stage_exec,
        nnz=block.nnz,
        report=report,
    )
