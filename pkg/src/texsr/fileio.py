"""Raster and sparse-operator file I/O plus plain-text config parsing.

PFM carries float rasters losslessly at f32 ("Pf" grayscale, "PF" 3-channel;
2-channel flows are stored as PF with a zero third channel). PNG quantizes
to 8 bits with round-half-even. Sparse maps use the little-endian "TSR1"
layout: magic, u32 rows, u32 cols, u64 nnz, u64 row offsets (rows+1),
u32 column indices, f32 values.
"""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image

from .errors import ParameterError, ParseError, StructuralError
from .operators import SparseLinearMap

__all__ = [
    "read_pfm",
    "write_pfm",
    "read_png",
    "write_png",
    "read_sparse_map",
    "write_sparse_map",
    "read_keyvalue",
    "write_keyvalue",
    "flow_to_raster",
    "raster_to_flow",
]

SPARSE_MAGIC = b"TSR1"
_MAX_DIM = 1 << 20


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------

def _next_token(buf: bytes, pos: int):
    while pos < len(buf) and buf[pos:pos + 1].isspace():
        pos += 1
    start = pos
    while pos < len(buf) and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ParseError("unexpected end of PFM header", offset=start)
    return buf[start:pos], pos


def read_pfm(path) -> np.ndarray:
    """Grayscale PFM -> (h, w); color PFM -> (h, w, 3). Values as float64."""
    with open(path, "rb") as f:
        buf = f.read()
    magic, pos = _next_token(buf, 0)
    if magic not in (b"Pf", b"PF"):
        raise ParseError(f"bad PFM magic {magic!r}", offset=0)
    channels = 1 if magic == b"Pf" else 3
    wtok, pos = _next_token(buf, pos)
    htok, pos = _next_token(buf, pos)
    stok, pos = _next_token(buf, pos)
    try:
        w, h, scale = int(wtok), int(htok), float(stok)
    except ValueError as e:
        raise ParseError(f"malformed PFM header: {e}", offset=pos)
    if w < 1 or h < 1 or w > _MAX_DIM or h > _MAX_DIM:
        raise ParameterError(f"PFM dimensions {w}x{h} out of range")
    pos += 1  # single whitespace byte terminates the header
    count = w * h * channels
    end = pos + count * 4
    if end > len(buf):
        raise ParseError(f"PFM data truncated: need {count * 4} bytes", offset=pos)
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(buf[pos:end], dtype=dtype).astype(np.float64)
    if channels == 1:
        arr = data.reshape(h, w)
    else:
        arr = data.reshape(h, w, 3)
    return arr[::-1].copy()  # PFM scanlines are stored bottom-up


def write_pfm(path, raster: np.ndarray):
    """Write a (h, w) or (h, w, 3) raster as little-endian PFM."""
    arr = np.asarray(raster, dtype=np.float64)
    if arr.ndim == 2:
        magic, h, w = b"Pf", *arr.shape
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic, h, w = b"PF", arr.shape[0], arr.shape[1]
    else:
        raise ParameterError("PFM rasters must be (h, w) or (h, w, 3)")
    if h > _MAX_DIM or w > _MAX_DIM:
        raise ParameterError(f"PFM dimensions {w}x{h} out of range")
    with open(path, "wb") as f:
        f.write(magic + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(arr[::-1], dtype="<f4").tobytes())


def flow_to_raster(flow: np.ndarray) -> np.ndarray:
    """(h, w, 2) flow -> (h, w, 3) PFM payload with a zero third channel."""
    f = np.asarray(flow, dtype=np.float64)
    out = np.zeros(f.shape[:2] + (3,))
    out[..., :2] = f
    return out


def raster_to_flow(raster: np.ndarray) -> np.ndarray:
    if raster.ndim != 3 or raster.shape[2] != 3:
        raise ParameterError("flow rasters are stored as 3-channel PFM")
    return np.asarray(raster, dtype=np.float64)[..., :2].copy()


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------

def write_png(path, raster: np.ndarray):
    """8-bit grayscale PNG; intensities quantized with round-half-even."""
    arr = np.asarray(raster, dtype=np.float64)
    if arr.ndim != 2:
        raise ParameterError("PNG output supports single-channel rasters")
    q = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q, mode="L").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.float64)
    return arr / 255.0


# ---------------------------------------------------------------------------
# Sparse maps (TSR1)
# ---------------------------------------------------------------------------

def write_sparse_map(path, m: SparseLinearMap):
    with open(path, "wb") as f:
        f.write(SPARSE_MAGIC)
        f.write(struct.pack("<IIQ", m.rows, m.cols, m.nnz))
        f.write(np.ascontiguousarray(m.indptr, dtype="<u8").tobytes())
        f.write(np.ascontiguousarray(m.indices, dtype="<u4").tobytes())
        f.write(np.ascontiguousarray(m.data, dtype="<f4").tobytes())


def read_sparse_map(path) -> SparseLinearMap:
    """Read and validate a TSR1 file, naming the violated invariant on error."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != SPARSE_MAGIC:
        raise ParseError(f"bad sparse-map magic {raw[:4]!r}", offset=0)
    try:
        rows, cols, nnz = struct.unpack_from("<IIQ", raw, 4)
    except struct.error as e:
        raise ParseError(f"truncated sparse-map header: {e}", offset=4)
    off = 4 + 16
    need = (rows + 1) * 8 + nnz * 4 + nnz * 4
    if off + need != len(raw):
        raise ParseError(
            f"sparse-map payload is {len(raw) - off} bytes, expected {need} "
            "(nnz mismatch)", offset=off)
    indptr = np.frombuffer(raw, dtype="<u8", count=rows + 1, offset=off).astype(np.int64)
    off += (rows + 1) * 8
    indices = np.frombuffer(raw, dtype="<u4", count=nnz, offset=off).astype(np.int64)
    off += nnz * 4
    data = np.frombuffer(raw, dtype="<f4", count=nnz, offset=off).astype(np.float64)
    if indptr[0] != 0 or indptr[-1] != nnz or np.any(np.diff(indptr) < 0):
        raise ParseError("row offsets are not monotone from 0 to nnz")
    for r in range(rows):
        seg = indices[indptr[r]:indptr[r + 1]]
        if seg.size and np.any(np.diff(seg) <= 0):
            raise ParseError(f"columns not sorted/unique in row {r}")
        if seg.size and (seg.min() < 0 or seg.max() >= cols):
            raise ParseError(f"column index out of range in row {r}")
    try:
        return SparseLinearMap(rows, cols, indptr, indices, data)
    except StructuralError as e:  # e.g. non-finite f32 payload
        raise ParseError(f"invalid sparse map: {e}")


# ---------------------------------------------------------------------------
# Plain-text key=value configs
# ---------------------------------------------------------------------------

def read_keyvalue(path) -> dict:
    """key=value lines; '#' starts a comment; values stay strings."""
    out: dict = {}
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"line {ln}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def write_keyvalue(path, entries: dict):
    with open(path, "w", encoding="utf-8") as f:
        for key, value in entries.items():
            f.write(f"{key} = {value}\n")
