"""Pseudo-Hilbert tile ordering and multilevel domain decomposition.

Both the tomogram plane (z rows, x columns) and the sinogram plane
(angle rows, detector columns) are tiled into square patches, the patches
are ordered along a Hilbert curve, and contiguous curve segments are
assigned to processes.  Locality along the curve keeps the data-access
footprint of each partition compact, which is what the communication
planner later exploits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TileGrid",
    "Subdomain",
    "Footprint",
    "hilbert_d2xy",
    "hilbert_xy2d",
    "pseudo_hilbert_order",
    "decompose",
    "block_decompose",
    "compute_footprint",
]


def hilbert_d2xy(order: int, d: int) -> tuple[int, int]:
    """Map a curve position ``d`` to (x, z) on the 2^order x 2^order grid.

    Base motif: d = 0,1,2,3 -> (0,0), (0,1), (1,1), (1,0); higher orders
    apply the usual recursive rotation/reflection, so consecutive d values
    are always Manhattan-adjacent.
    """
    if order < 0:
        raise ValueError(f"order must be >= 0, got {order}")
    n = 1 << order
    if not 0 <= d < n * n:
        raise ValueError(f"d={d} out of range for order {order} (max {n * n - 1})")
    x = z = 0
    t = d
    s = 1
    while s < n:
        rx = 1 & (t // 2)
        rz = 1 & (t ^ rx)
        if rz == 0:
            if rx == 1:
                x = s - 1 - x
                z = s - 1 - z
            x, z = z, x
        x += s * rx
        z += s * rz
        t //= 4
        s *= 2
    return x, z


def hilbert_xy2d(order: int, x: int, z: int) -> int:
    """Inverse of :func:`hilbert_d2xy` (same motif and convention)."""
    n = 1 << order
    if not (0 <= x < n and 0 <= z < n):
        raise ValueError(f"({x}, {z}) outside the order-{order} grid")
    d = 0
    s = n // 2
    while s > 0:
        rx = 1 if (x & s) > 0 else 0
        rz = 1 if (z & s) > 0 else 0
        d += s * s * ((3 * rx) ^ rz)
        if rz == 0:
            if rx == 1:
                x = s - 1 - x
                z = s - 1 - z
            x, z = z, x
        s //= 2
    return d


def pseudo_hilbert_order(tiles_x: int, tiles_z: int) -> list[tuple[int, int]]:
    """Hilbert traversal of a tiles_x by tiles_z grid.

    Power-of-two squares are traversed exactly; any other shape is padded
    to the enclosing power-of-two square and out-of-domain cells are
    skipped, preserving the relative order of the remaining cells.  Cells
    are ranked by their curve position on the padded square, so the cost is
    proportional to the domain, not the padding.
    """
    if tiles_x < 1 or tiles_z < 1:
        raise ValueError(f"tile counts must be >= 1, got {tiles_x}x{tiles_z}")
    side = max(tiles_x, tiles_z)
    order = max(1, (side - 1).bit_length()) if side > 1 else 0
    cells = [(x, z) for z in range(tiles_z) for x in range(tiles_x)]
    cells.sort(key=lambda c: hilbert_xy2d(order, c[0], c[1]))
    return cells


@dataclass(frozen=True)
class TileGrid:
    """Square tiling of a 2D domain of shape (n_rows, n_cols).

    ``domain`` tags the plane being tiled: "tomogram" (rows = z, cols = x)
    or "sinogram" (rows = angle, cols = detector).  Edge tiles are ragged
    when the domain size is not a multiple of ``tile_size``.
    """

    domain: str
    n_rows: int
    n_cols: int
    tile_size: int = 8

    def __post_init__(self):
        if self.domain not in ("tomogram", "sinogram"):
            raise ValueError(f"unknown domain tag {self.domain!r}")
        if self.n_rows < 1 or self.n_cols < 1 or self.tile_size < 1:
            raise ValueError("domain and tile dimensions must be >= 1")

    @property
    def tiles_x(self) -> int:
        return -(-self.n_cols // self.tile_size)

    @property
    def tiles_z(self) -> int:
        return -(-self.n_rows // self.tile_size)

    @property
    def num_tiles(self) -> int:
        return self.tiles_x * self.tiles_z

    @property
    def num_elements(self) -> int:
        return self.n_rows * self.n_cols

    def tile_elements(self, tx: int, tz: int) -> np.ndarray:
        """Flat indices covered by tile (tx, tz), ordered by a unit-tile
        Hilbert traversal of the tile's cells (finest-level curve)."""
        c0 = tx * self.tile_size
        r0 = tz * self.tile_size
        w = min(self.tile_size, self.n_cols - c0)
        h = min(self.tile_size, self.n_rows - r0)
        cells = pseudo_hilbert_order(w, h)
        return np.array([(r0 + dz) * self.n_cols + (c0 + dx) for dx, dz in cells],
                        dtype=np.int64)


@dataclass(frozen=True)
class Subdomain:
    """A contiguous segment of the pseudo-Hilbert tile order owned by one
    process."""

    id: int
    owner: int
    grid: TileGrid
    tiles: tuple[tuple[int, int], ...]
    elements: np.ndarray = field(repr=False)

    @property
    def num_elements(self) -> int:
        return len(self.elements)


@dataclass(frozen=True)
class Footprint:
    """Elements of the target domain touched by one subdomain's nonzeros."""

    source_id: int
    target_domain: str
    elements: np.ndarray = field(repr=False)

    @property
    def num_elements(self) -> int:
        return len(self.elements)


def _segment_sizes(count: int, parts: int) -> list[int]:
    # first (count mod parts) segments get the extra tile
    base, rem = divmod(count, parts)
    return [base + 1 if i < rem else base for i in range(parts)]


def decompose(tile_grid: TileGrid, num_processes: int) -> list[Subdomain]:
    """Split the grid's Hilbert-ordered tiles into ``num_processes``
    contiguous segments whose tile counts differ by at most one."""
    if num_processes < 1:
        raise ValueError("num_processes must be >= 1")
    if num_processes > tile_grid.num_tiles:
        raise ValueError(
            f"cannot split {tile_grid.num_tiles} tiles among {num_processes} processes")
    order = pseudo_hilbert_order(tile_grid.tiles_x, tile_grid.tiles_z)
    sizes = _segment_sizes(len(order), num_processes)
    subdomains = []
    start = 0
    for pid, size in enumerate(sizes):
        tiles = tuple(order[start:start + size])
        start += size
        elems = np.concatenate([tile_grid.tile_elements(tx, tz) for tx, tz in tiles])
        elems = np.sort(elems)
        subdomains.append(Subdomain(id=pid, owner=pid, grid=tile_grid,
                                    tiles=tiles, elements=elems))
    return subdomains


def block_decompose(subdomain: Subdomain, block_count: int) -> list[np.ndarray]:
    """Partition a subdomain's elements into ``block_count`` contiguous
    chunks of its within-tile Hilbert order (thread-block granularity)."""
    if block_count < 1:
        raise ValueError("block_count must be >= 1")
    if block_count > subdomain.num_elements:
        raise ValueError(
            f"block_count {block_count} exceeds {subdomain.num_elements} elements")
    ordered = np.concatenate(
        [subdomain.grid.tile_elements(tx, tz) for tx, tz in subdomain.tiles])
    sizes = _segment_sizes(len(ordered), block_count)
    blocks = []
    start = 0
    for size in sizes:
        blocks.append(ordered[start:start + size].copy())
        start += size
    return blocks


def compute_footprint(subdomain: Subdomain, matrix, direction: str) -> Footprint:
    """Data-access footprint of a subdomain through the system matrix.

    direction "project": the subdomain partitions tomogram columns; the
    footprint is every matrix row (ray) with at least one nonzero in those
    columns.  direction "backproject" is symmetric: the subdomain
    partitions sinogram rows and the footprint collects the columns
    (voxels) those rows touch.
    """
    if direction not in ("project", "backproject"):
        raise ValueError(f"unknown direction {direction!r}")
    indptr = matrix.indptr
    indices = matrix.indices
    if direction == "project":
        if subdomain.grid.domain != "tomogram":
            raise ValueError("projection footprint needs a tomogram subdomain")
        if subdomain.grid.num_elements != matrix.num_cols:
            raise ValueError("subdomain domain size does not match matrix columns")
        mask = np.zeros(matrix.num_cols, dtype=bool)
        mask[subdomain.elements] = True
        hit = mask[indices]
        row_of = np.repeat(np.arange(matrix.num_rows), np.diff(indptr))
        rows = np.unique(row_of[hit])
        return Footprint(subdomain.id, "sinogram", rows)
    if subdomain.grid.domain != "sinogram":
        raise ValueError("backprojection footprint needs a sinogram subdomain")
    if subdomain.grid.num_elements != matrix.num_rows:
        raise ValueError("subdomain domain size does not match matrix rows")
    cols = []
    for r in subdomain.elements:
        cols.append(indices[indptr[r]:indptr[r + 1]])
    merged = np.unique(np.concatenate(cols)) if cols else np.array([], dtype=indices.dtype)
    return Footprint(subdomain.id, "tomogram", merged)
