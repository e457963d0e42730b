"""Binary dataset container, PGM export, CSV reports, and run manifests.

The dataset format is a small header followed by a row-major little-endian
payload; slices are contiguous so the batch pipeline can map any slice
range without touching the rest of the file.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Volume

__all__ = [
    "DatasetFormatError",
    "write_volume",
    "read_volume",
    "write_pgm",
    "write_csv",
    "RunManifest",
    "sha256_of",
]

MAGIC = b"XCT1"

_DTYPE_CODES = {0: "<f8", 1: "<f4", 2: "<f2"}
_CODES_BY_KIND = {np.float64: 0, np.float32: 1, np.float16: 2}
_ROLE_CODES = {0: "tomogram", 1: "sinogram"}


class DatasetFormatError(ValueError):
    """The file is not a well-formed dataset container."""


def write_volume(path, volume: Volume) -> None:
    """Serialize a volume: magic, dtype/role/ndim bytes, u32 dims, payload.

    Tomograms are laid out (slice, z, x) and sinograms (slice, angle,
    detector), row-major little-endian.
    """
    data = volume.data
    code = _CODES_BY_KIND.get(data.dtype.type)
    if code is None:
        raise DatasetFormatError(f"unsupported dtype {data.dtype}")
    role_code = 0 if volume.role == "tomogram" else 1
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BBB", code, role_code, data.ndim))
        fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
        fh.write(np.ascontiguousarray(data, dtype=_DTYPE_CODES[code]).tobytes())


def read_volume(path) -> Volume:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 7 or raw[:4] != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic (expected XCT1)")
    code, role_code, ndim = struct.unpack("<BBB", raw[4:7])
    if code not in _DTYPE_CODES:
        raise DatasetFormatError(f"{path}: unknown dtype code {code}")
    if role_code not in _ROLE_CODES:
        raise DatasetFormatError(f"{path}: unknown role code {role_code}")
    header_end = 7 + 4 * ndim
    if len(raw) < header_end:
        raise DatasetFormatError(f"{path}: truncated header")
    dims = struct.unpack(f"<{ndim}I", raw[7:header_end])
    dtype = np.dtype(_DTYPE_CODES[code])
    expected = int(np.prod(dims)) * dtype.itemsize
    payload = raw[header_end:]
    if len(payload) != expected:
        raise DatasetFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return Volume(data=data.astype(data.dtype.newbyteorder("=")),
                  role=_ROLE_CODES[role_code])


def write_pgm(path, image: np.ndarray) -> None:
    """16-bit binary PGM, min-max windowed; constant images come out black."""
    if image.ndim != 2:
        raise ValueError("PGM export needs a 2D slice")
    img = image.astype(np.float64)
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        scaled = np.round((img - lo) / (hi - lo) * 65535.0)
    else:
        scaled = np.zeros_like(img)
    pixels = scaled.astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n65535\n".encode("ascii"))
        fh.write(pixels.tobytes())


def write_csv(path, header: list[str], rows: list) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_csv_cell(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.9e}"
    return str(value)


def sha256_of(path) -> str:
    digest = hashlib.sha256()
    digest.update(Path(path).read_bytes())
    return digest.hexdigest()


@dataclass
class RunManifest:
    """Everything needed to re-run a command bit-identically."""

    command: str
    arguments: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    phase_seconds: dict = field(default_factory=dict)
    volume_report: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    residual_csv: str | None = None

    def add_output(self, path) -> None:
        self.outputs[str(path)] = sha256_of(path)

    def save(self, path) -> None:
        payload = {
            "command": self.command,
            "arguments": self.arguments,
            "seeds": self.seeds,
            "phase_seconds": self.phase_seconds,
            "volume_report": self.volume_report,
            "counters": self.counters,
            "outputs": self.outputs,
            "residual_csv": self.residual_csv,
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                              encoding="ascii")

    @staticmethod
    def load(path) -> "RunManifest":
        payload = json.loads(Path(path).read_text(encoding="ascii"))
        return RunManifest(
            command=payload["command"],
            arguments=payload.get("arguments", {}),
            seeds=payload.get("seeds", {}),
            phase_seconds=payload.get("phase_seconds", {}),
            volume_report=payload.get("volume_report", {}),
            counters=payload.get("counters", {}),
            outputs=payload.get("outputs", {}),
            residual_csv=payload.get("residual_csv"),
        )
