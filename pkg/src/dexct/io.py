"""Serialization: the flat binary array container, PGM images for visual
inspection, and CSV debug dumps.

Container layout: 16-byte header (magic ``DEXC``, u32 version, u32 rows,
u32 cols, all little-endian) followed by row-major little-endian float64
values.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import SinogramPair

MAGIC = b"DEXC"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


def write_array(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("container stores 2-D arrays")
    if not np.all(np.isfinite(arr)):
        raise ValueError("refusing to serialize non-finite values")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.astype("<f8").tobytes())


def read_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, version, rows, cols = _HEADER.unpack(header)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        data = np.frombuffer(fh.read(rows * cols * 8), dtype="<f8")
        if data.size != rows * cols:
            raise ValueError(f"{path}: truncated payload")
    return data.reshape(rows, cols).copy()


def array_to_csv(arr: np.ndarray) -> str:
    """Debug export: one CSV row per array row, full float repr."""
    arr = np.asarray(arr, dtype=np.float64)
    return "\n".join(",".join(repr(float(v)) for v in row) for row in arr) + "\n"


def write_csv(path, text: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def write_pgm(path, arr: np.ndarray, bits: int = 16) -> None:
    """Lossily scaled PGM (P5) with the linear min/max recorded in a comment."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("PGM export needs a 2-D array")
    lo = float(arr.min())
    hi = float(arr.max())
    maxval = 65535 if bits == 16 else 255
    span = hi - lo
    scaled = np.zeros_like(arr) if span == 0 else (arr - lo) / span * maxval
    pix = np.round(scaled).astype(">u2" if bits == 16 else "u1")
    header = f"P5\n# min={lo!r} max={hi!r}\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(pix.tobytes())


def write_sinogram_pair(directory, stem: str, pair: SinogramPair, metadata: dict) -> None:
    """Two containers plus a JSON provenance record for one measurement."""
    directory = Path(directory)
    write_array(directory / f"{stem}_low.dexc", pair.low)
    write_array(directory / f"{stem}_high.dexc", pair.high)
    record = dict(metadata)
    for label, geo in (("low", pair.geo_low), ("high", pair.geo_high)):
        record[f"geometry_{label}"] = {
            "n_pixels": geo.n_pixels,
            "angles_deg": list(geo.angles_deg),
            "n_detectors": geo.n_detectors,
            "detector_spacing": geo.detector_spacing,
        }
    with open(directory / f"{stem}_meta.json", "w", newline="\n") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
