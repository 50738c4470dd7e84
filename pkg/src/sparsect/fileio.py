"""Binary image/sinogram formats, PGM export, and key=value config files.

Image files:    magic "IMGF", u32 version, u32 h, u32 w, f32 data (row major).
Sinogram files: magic "SINF", u32 version, u32 n_views, u32 n_det, f32 data.
Integers and floats are little-endian.  PGM export is the binary 16-bit
big-endian variant with a linear display window.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

IMAGE_MAGIC = b"IMGF"
SINO_MAGIC = b"SINF"
FORMAT_VERSION = 1

# normalized attenuation v maps to 2000*v - 1000 HU, so a clinical
# soft-tissue window of [-160, 240] HU corresponds to [0.42, 0.62]
DEFAULT_WINDOW = (0.42, 0.62)


def _write_2d(path, magic: bytes, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d array, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<III", FORMAT_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.astype("<f4").tobytes())


def _read_2d(path, magic: bytes) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head != magic:
            raise ValueError(f"{path}: bad magic {head!r}, expected {magic!r}")
        buf = fh.read(12)
        if len(buf) != 12:
            raise ValueError(f"{path}: truncated header")
        version, rows, cols = struct.unpack("<III", buf)
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        data = fh.read(4 * rows * cols)
        if len(data) != 4 * rows * cols:
            raise ValueError(f"{path}: truncated data")
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes")
    return np.frombuffer(data, dtype="<f4").reshape(rows, cols).astype(np.float64)


def write_image(path, img: np.ndarray) -> None:
    _write_2d(path, IMAGE_MAGIC, img)


def read_image(path) -> np.ndarray:
    return _read_2d(path, IMAGE_MAGIC)


def write_sinogram(path, sino: np.ndarray) -> None:
    _write_2d(path, SINO_MAGIC, sino)


def read_sinogram(path) -> np.ndarray:
    return _read_2d(path, SINO_MAGIC)


def write_pgm16(path, img: np.ndarray, window=DEFAULT_WINDOW) -> None:
    """16-bit binary PGM with the value window mapped to [0, 65535]."""
    lo, hi = window
    if hi <= lo:
        raise ValueError(f"empty display window {window}")
    scaled = np.clip((np.asarray(img, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    pixels = np.round(scaled * 65535.0).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode("ascii"))
        fh.write(pixels.tobytes())


# ---------------------------------------------------------------------------
# key=value config files


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse key=value lines; '#' starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def read_kv_file(path) -> dict[str, str]:
    return parse_kv_text(Path(path).read_text(encoding="utf-8"))


def format_kv(kv: dict[str, str]) -> str:
    return "\n".join(f"{k}={kv[k]}" for k in sorted(kv)) + "\n"
