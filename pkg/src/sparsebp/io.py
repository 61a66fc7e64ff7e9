"""Image, sinogram and sensor-model files.

Raw formats are little-endian float64 after a 16-byte header:

* image: ``b"SPRIMG01"`` then ``uint64`` side N, then N*N values;
* sinogram: ``b"SPRSIN01"`` then ``uint32`` n and ``uint32`` m, then the n
  angles, then the n*m projection values row by row.

PGM export writes 16-bit big-endian P5 after a linear min/max rescale; the
min and max are kept in a ``<file>.txt`` sidecar so the export can be
inverted. A constant image maps to mid-scale (32768).

Sinogram CSV files have the angles (radians) as the header row and one row
per detector bin, i.e. an m x n table.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .geometry import Sinogram
from .phantoms import SensorModel

__all__ = [
    "FormatError",
    "save_image",
    "load_image",
    "save_pgm",
    "load_pgm",
    "save_sinogram",
    "load_sinogram",
    "save_sinogram_csv",
    "load_sinogram_csv",
    "save_sensor_model",
    "load_sensor_model",
    "format_float",
]

IMAGE_MAGIC = b"SPRIMG01"
SINO_MAGIC = b"SPRSIN01"
PGM_MAX = 65535
PGM_MID = 32768


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte (or line) where parsing failed."""

    def __init__(self, path, offset: int, message: str, unit: str = "byte"):
        super().__init__(f"{path}: {unit} {offset}: {message}")
        self.path = str(path)
        self.offset = offset


def format_float(x: float) -> str:
    """Shortest round-trip decimal, without a trailing ``.0``."""
    return np.format_float_positional(float(x), unique=True, trim="-")


def _read_header(raw: bytes, path, magic: bytes) -> None:
    if len(raw) < 16:
        raise FormatError(path, len(raw), "file shorter than the 16-byte header")
    if raw[:8] != magic:
        raise FormatError(path, 0, f"bad magic {raw[:8]!r}, expected {magic!r}")


def _read_values(raw: bytes, path, offset: int, count: int) -> np.ndarray:
    end = offset + 8 * count
    if len(raw) < end:
        raise FormatError(path, len(raw), f"truncated data, expected {count} float64 values from byte {offset}")
    if len(raw) > end:
        raise FormatError(path, end, "unexpected trailing bytes")
    return np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64)


def save_image(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError(f"expected a square image, got shape {image.shape}")
    header = IMAGE_MAGIC + struct.pack("<Q", image.shape[0])
    Path(path).write_bytes(header + image.astype("<f8").tobytes())


def load_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    _read_header(raw, path, IMAGE_MAGIC)
    (n,) = struct.unpack_from("<Q", raw, 8)
    if n < 1:
        raise FormatError(path, 8, f"invalid side {n}")
    return _read_values(raw, path, 16, n * n).reshape(n, n)


def save_sinogram(path, sinogram: Sinogram) -> None:
    header = SINO_MAGIC + struct.pack("<II", sinogram.n_angles, sinogram.detectors)
    body = sinogram.angles.astype("<f8").tobytes() + sinogram.data.astype("<f8").tobytes()
    Path(path).write_bytes(header + body)


def load_sinogram(path) -> Sinogram:
    raw = Path(path).read_bytes()
    _read_header(raw, path, SINO_MAGIC)
    n, m = struct.unpack_from("<II", raw, 8)
    if n < 1 or m < 1:
        raise FormatError(path, 8, f"invalid dimensions n={n}, m={m}")
    values = _read_values(raw, path, 16, n + n * m)
    try:
        return Sinogram(values[:n], values[n:].reshape(n, m))
    except ValueError as exc:
        raise FormatError(path, 16, str(exc)) from exc


def _sidecar(path) -> Path:
    return Path(str(path) + ".txt")


def save_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float64)
    lo, hi = float(image.min()), float(image.max())
    if hi > lo:
        levels = np.rint((image - lo) / (hi - lo) * PGM_MAX)
    else:
        levels = np.full(image.shape, PGM_MID)
    h, w = image.shape
    header = f"P5\n{w} {h}\n{PGM_MAX}\n".encode("ascii")
    Path(path).write_bytes(header + levels.astype(">u2").tobytes())
    _sidecar(path).write_text(f"min={format_float(lo)}\nmax={format_float(hi)}\n")


def load_pgm(path) -> np.ndarray:
    """Read a 16-bit PGM and undo the rescale using its sidecar, if present."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(path, pos, "truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(path, 0, f"not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(path, pos, f"bad PGM header field: {exc}") from exc
    if maxval != PGM_MAX:
        raise FormatError(path, pos, f"expected 16-bit PGM, maxval {maxval}")
    pos += 1
    need = 2 * w * h
    if len(raw) - pos != need:
        raise FormatError(path, pos, f"expected {need} bytes of pixel data, found {len(raw) - pos}")
    levels = np.frombuffer(raw, dtype=">u2", offset=pos).astype(np.float64).reshape(h, w)
    side = _sidecar(path)
    if not side.exists():
        return levels / PGM_MAX
    meta = {}
    for lineno, line in enumerate(side.read_text().splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(side, lineno, f"expected key=value, got {line!r}", unit="line")
        meta[key.strip()] = float(value)
    lo, hi = meta["min"], meta["max"]
    if hi > lo:
        return lo + levels / PGM_MAX * (hi - lo)
    return np.full((h, w), lo)


def save_sinogram_csv(path, sinogram: Sinogram) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([format_float(a) for a in sinogram.angles])
        for row in sinogram.data.T:
            writer.writerow([format_float(v) for v in row])


def load_sinogram_csv(path) -> Sinogram:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(path, 1, "empty file", unit="line")
    try:
        angles = [float(a) for a in rows[0]]
    except ValueError as exc:
        raise FormatError(path, 1, f"bad angle header: {exc}", unit="line") from exc
    data = []
    for lineno, row in enumerate(rows[1:], 2):
        if len(row) != len(angles):
            raise FormatError(path, lineno, f"expected {len(angles)} columns, found {len(row)}", unit="line")
        try:
            data.append([float(v) for v in row])
        except ValueError as exc:
            raise FormatError(path, lineno, str(exc), unit="line") from exc
    if not data:
        raise FormatError(path, 2, "no detector rows", unit="line")
    try:
        return Sinogram(np.array(angles), np.array(data).T)
    except ValueError as exc:
        raise FormatError(path, 1, str(exc), unit="line") from exc


def save_sensor_model(path, model: SensorModel, angles) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["angle", "w", "b"])
        for a, w, b in zip(angles, model.w, model.b):
            writer.writerow([format_float(a), format_float(w), format_float(b)])


def load_sensor_model(path) -> tuple[SensorModel, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["angle", "w", "b"]:
        raise FormatError(path, 1, "expected header 'angle,w,b'", unit="line")
    try:
        values = np.array([[float(v) for v in row] for row in rows[1:]], dtype=np.float64).reshape(-1, 3)
    except ValueError as exc:
        raise FormatError(path, 2, str(exc), unit="line") from exc
    return SensorModel(values[:, 1], values[:, 2]), values[:, 0]
