"""Parallel-beam scan geometry, Siddon ray tracing, and measurement
simulation.

Conventions used throughout the package:

* A tomogram slice is a square grid_n x grid_n array in the x-z plane,
  centred on the rotation axis.  Flat voxel index = iz * grid_n + ix, with
  voxel (ix, iz) centred at ((ix - (grid_n-1)/2) * voxel_size,
  (iz - (grid_n-1)/2) * voxel_size).
* Rays of view k travel along d = (cos a_k, sin a_k); detector column c
  offsets the ray by rho_c = (c - (N-1)/2) * detector_pitch along
  n = (-sin a_k, cos a_k).  At angle 0 rays are parallel to the x axis.
* Sinogram row index = angle_index * N + detector_col, matching the
  system-matrix row layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ScanGeometry",
    "RaySegmentList",
    "SystemMatrix",
    "Volume",
    "make_geometry",
    "trace_ray",
    "build_system_matrix",
    "clear_matrix_cache",
    "generate_phantom",
    "simulate_measurements",
]

# zero-length corner crossings below this fraction of a voxel are dropped
_SEGMENT_EPS = 1e-12

PHANTOM_KINDS = ("uniform-disk", "shepp-logan-like", "random-blobs")


@dataclass(frozen=True)
class ScanGeometry:
    """Scan setup defining the operator shape (K angles, M slices, N columns)."""

    num_angles: int
    angles: tuple[float, ...]
    num_rows: int
    num_detector_cols: int
    voxel_size: float = 1.0

    @property
    def grid_n(self) -> int:
        # parallel-beam assumption: detector columns match slice width
        return self.num_detector_cols

    @property
    def detector_pitch(self) -> float:
        return self.voxel_size

    @property
    def num_rays(self) -> int:
        return self.num_angles * self.num_detector_cols

    @property
    def num_voxels(self) -> int:
        return self.grid_n * self.grid_n


def make_geometry(num_angles: int, num_rows: int, num_detector_cols: int,
                  angle_start: float = 0.0, angle_end: float = math.pi,
                  voxel_size: float = 1.0) -> ScanGeometry:
    """Geometry with ``num_angles`` equally spaced views in
    [angle_start, angle_end)."""
    if num_angles < 1 or num_rows < 1 or num_detector_cols < 1:
        raise ValueError("K, M and N must all be >= 1")
    if not angle_start < angle_end:
        raise ValueError(f"inverted angle range [{angle_start}, {angle_end})")
    if angle_end - angle_start > math.pi + 1e-12:
        raise ValueError("angle range wider than pi is redundant for parallel beams")
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    step = (angle_end - angle_start) / num_angles
    angles = tuple(angle_start + i * step for i in range(num_angles))
    return ScanGeometry(num_angles=num_angles, angles=angles, num_rows=num_rows,
                        num_detector_cols=num_detector_cols, voxel_size=voxel_size)


@dataclass(frozen=True)
class RaySegmentList:
    """Ordered (voxel index, intersection length) pairs along one ray."""

    indices: np.ndarray = field(repr=False)
    lengths: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.indices)

    def entries(self) -> list[tuple[int, float]]:
        return list(zip(self.indices.tolist(), self.lengths.tolist()))

    @property
    def total_length(self) -> float:
        return float(self.lengths.sum())


def _ray_origin_direction(geometry: ScanGeometry, angle_index: int,
                          detector_col: int) -> tuple[np.ndarray, np.ndarray]:
    theta = geometry.angles[angle_index]
    rho = (detector_col - (geometry.num_detector_cols - 1) / 2.0) * geometry.detector_pitch
    direction = np.array([math.cos(theta), math.sin(theta)])
    normal = np.array([-math.sin(theta), math.cos(theta)])
    return rho * normal, direction


def trace_ray(geometry: ScanGeometry, angle_index: int, detector_col: int) -> RaySegmentList:
    """Siddon trace of one ray: exact voxel intersection lengths.

    Crossing parameters with the x and z voxel-boundary planes are merged
    and sorted; each interval between consecutive crossings lies in exactly
    one voxel, identified by its midpoint.  Corner-grazing ties produce
    zero-length intervals which are dropped (no voxel is charged).
    """
    if not 0 <= angle_index < geometry.num_angles:
        raise ValueError(f"angle_index {angle_index} out of range")
    if not 0 <= detector_col < geometry.num_detector_cols:
        raise ValueError(f"detector_col {detector_col} out of range")
    origin, direction = _ray_origin_direction(geometry, angle_index, detector_col)
    g = geometry.grid_n
    vox = geometry.voxel_size
    half = g * vox / 2.0

    # entry/exit of the bounding square via the slab method
    t_enter, t_exit = -np.inf, np.inf
    crossings = []
    for axis in range(2):
        o, d = origin[axis], direction[axis]
        if abs(d) < 1e-15:
            if not -half < o < half:
                return RaySegmentList(np.empty(0, dtype=np.int64), np.empty(0))
            continue
        t0 = (-half - o) / d
        t1 = (half - o) / d
        t_enter = max(t_enter, min(t0, t1))
        t_exit = min(t_exit, max(t0, t1))
        planes = -half + vox * np.arange(g + 1)
        crossings.append((planes - o) / d)
    if t_enter >= t_exit - _SEGMENT_EPS * vox:
        return RaySegmentList(np.empty(0, dtype=np.int64), np.empty(0))

    ts = np.concatenate(crossings) if crossings else np.array([t_enter, t_exit])
    ts = ts[(ts > t_enter) & (ts < t_exit)]
    ts = np.concatenate(([t_enter], np.sort(ts), [t_exit]))
    seg = np.diff(ts)
    keep = seg > _SEGMENT_EPS * vox
    if not keep.any():
        return RaySegmentList(np.empty(0, dtype=np.int64), np.empty(0))
    mid = (ts[:-1] + 0.5 * seg)[keep]
    points = origin[None, :] + mid[:, None] * direction[None, :]
    ij = np.floor((points + half) / vox).astype(np.int64)
    np.clip(ij, 0, g - 1, out=ij)
    flat = ij[:, 1] * g + ij[:, 0]
    return RaySegmentList(flat, seg[keep])


@dataclass(frozen=True)
class SystemMatrix:
    """Sparse parallel-beam operator in canonical compressed-row layout.

    Row r = angle_index * N + detector_col holds the Siddon segments of
    that ray; lengths are double precision and in physical units.
    """

    num_rows: int
    num_cols: int
    num_angles: int
    num_detector_cols: int
    indptr: np.ndarray = field(repr=False)
    indices: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def row(self, r: int) -> RaySegmentList:
        s, e = self.indptr[r], self.indptr[r + 1]
        return RaySegmentList(self.indices[s:e], self.values[s:e])

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.num_rows, self.num_cols))
        row_of = np.repeat(np.arange(self.num_rows), np.diff(self.indptr))
        dense[row_of, self.indices] = self.values
        return dense


_matrix_cache: dict[ScanGeometry, SystemMatrix] = {}
_build_counts: dict[ScanGeometry, int] = {}


def build_system_matrix(geometry: ScanGeometry) -> SystemMatrix:
    """Assemble (or fetch the memoized) system matrix for a geometry.

    Rays of every view are traced once; the result is cached per geometry
    and shared by all slices, so repeated calls within a run are free.
    """
    cached = _matrix_cache.get(geometry)
    if cached is not None:
        return cached
    indptr = np.zeros(geometry.num_rays + 1, dtype=np.int64)
    index_chunks = []
    value_chunks = []
    for k in range(geometry.num_angles):
        for c in range(geometry.num_detector_cols):
            segs = trace_ray(geometry, k, c)
            r = k * geometry.num_detector_cols + c
            indptr[r + 1] = indptr[r] + len(segs)
            index_chunks.append(segs.indices)
            value_chunks.append(segs.lengths)
    matrix = SystemMatrix(
        num_rows=geometry.num_rays,
        num_cols=geometry.num_voxels,
        num_angles=geometry.num_angles,
        num_detector_cols=geometry.num_detector_cols,
        indptr=indptr,
        indices=np.concatenate(index_chunks),
        values=np.concatenate(value_chunks),
    )
    _matrix_cache[geometry] = matrix
    _build_counts[geometry] = _build_counts.get(geometry, 0) + 1
    return matrix


def clear_matrix_cache() -> None:
    _matrix_cache.clear()
    _build_counts.clear()


def build_count(geometry: ScanGeometry) -> int:
    """How many times the matrix was actually assembled (should stay 1)."""
    return _build_counts.get(geometry, 0)


@dataclass
class Volume:
    """Dense 3D payload: (slices, rows, cols), tagged tomogram or sinogram."""

    data: np.ndarray
    role: str

    def __post_init__(self):
        if self.role not in ("tomogram", "sinogram"):
            raise ValueError(f"unknown volume role {self.role!r}")
        if self.data.ndim != 3:
            raise ValueError("volume payload must be 3D (slices, rows, cols)")

    @property
    def num_slices(self) -> int:
        return self.data.shape[0]

    @property
    def slice_shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    def slices_as_columns(self) -> np.ndarray:
        """(elements, slices) view used by the fused SpMM path."""
        return self.data.reshape(self.num_slices, -1).T

    @property
    def dtype_tag(self) -> str:
        return {np.float64: "double", np.float32: "single", np.float16: "half"}[
            self.data.dtype.type]


def _circle_mask(grid_n: int) -> np.ndarray:
    c = (grid_n - 1) / 2.0
    iz, ix = np.mgrid[0:grid_n, 0:grid_n]
    return (ix - c) ** 2 + (iz - c) ** 2 <= (grid_n / 2.0) ** 2


# (value, half-axis a, half-axis b, centre x, centre z, rotation degrees),
# the familiar head-phantom ellipse table rescaled into [0, 1]
_ELLIPSES = (
    (1.00, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.80, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.20, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.20, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.10, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.10, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.10, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.10, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.10, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.10, 0.0230, 0.0460, 0.06, -0.605, 0.0),
)


def _shepp_logan_slice(grid_n: int) -> np.ndarray:
    c = (grid_n - 1) / 2.0
    iz, ix = np.mgrid[0:grid_n, 0:grid_n]
    x = (ix - c) / (grid_n / 2.0)
    z = (iz - c) / (grid_n / 2.0)
    img = np.zeros((grid_n, grid_n))
    for val, a, b, x0, z0, deg in _ELLIPSES:
        phi = math.radians(deg)
        xr = (x - x0) * math.cos(phi) + (z - z0) * math.sin(phi)
        zr = (z - z0) * math.cos(phi) - (x - x0) * math.sin(phi)
        img[(xr / a) ** 2 + (zr / b) ** 2 <= 1.0] += val
    return np.clip(img, 0.0, 1.0)


def _random_blobs_slice(grid_n: int, rng: np.random.Generator) -> np.ndarray:
    c = (grid_n - 1) / 2.0
    iz, ix = np.mgrid[0:grid_n, 0:grid_n]
    img = np.zeros((grid_n, grid_n))
    for _ in range(6):
        bx, bz = rng.uniform(-0.6, 0.6, size=2) * (grid_n / 2.0)
        sigma = rng.uniform(0.08, 0.25) * grid_n
        amp = rng.uniform(0.3, 1.0)
        img += amp * np.exp(-(((ix - c - bx) ** 2 + (iz - c - bz) ** 2) / (2 * sigma**2)))
    peak = img.max()
    if peak > 0:
        img /= peak
    return img


def generate_phantom(kind: str, grid_n: int, num_slices: int, seed: int = 0) -> Volume:
    """Synthetic tomogram in [0, 1], zero outside the inscribed circle."""
    if kind not in PHANTOM_KINDS:
        raise ValueError(f"unknown phantom kind {kind!r}; expected one of {PHANTOM_KINDS}")
    if grid_n < 1 or num_slices < 1:
        raise ValueError("grid_n and num_slices must be >= 1")
    mask = _circle_mask(grid_n)
    if kind == "uniform-disk":
        base = np.ones((grid_n, grid_n))
        data = np.repeat((base * mask)[None, :, :], num_slices, axis=0)
    elif kind == "shepp-logan-like":
        base = _shepp_logan_slice(grid_n) * mask
        data = np.repeat(base[None, :, :], num_slices, axis=0)
    else:
        rng = np.random.default_rng(seed)
        data = np.stack([_random_blobs_slice(grid_n, rng) * mask
                         for _ in range(num_slices)])
    return Volume(np.ascontiguousarray(data), role="tomogram")


def simulate_measurements(matrix: SystemMatrix, tomogram: Volume,
                          noise_sigma: float = 0.0, seed: int = 0) -> Volume:
    """Forward-project a tomogram: y = A x per slice, plus optional additive
    Gaussian noise with sigma = noise_sigma * max(Ax)."""
    if tomogram.role != "tomogram":
        raise ValueError("expected a tomogram volume")
    rows, cols = tomogram.slice_shape
    if rows * cols != matrix.num_cols:
        raise ValueError(
            f"slice size {rows * cols} does not match matrix columns {matrix.num_cols}")
    x = tomogram.slices_as_columns().astype(np.float64)
    y = np.empty((matrix.num_rows, tomogram.num_slices))
    for r in range(matrix.num_rows):
        s, e = matrix.indptr[r], matrix.indptr[r + 1]
        y[r] = matrix.values[s:e] @ x[matrix.indices[s:e]]
    if noise_sigma > 0.0:
        rng = np.random.default_rng(seed)
        y = y + rng.normal(0.0, noise_sigma * y.max(), size=y.shape)
    data = y.T.reshape(tomogram.num_slices, matrix.num_angles,
                       matrix.num_detector_cols)
    return Volume(np.ascontiguousarray(data), role="sinogram")
