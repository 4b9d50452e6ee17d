"""Binary day records (``MPLB``), model checkpoints (``MPLW``) and text artifacts.

Day record layout, little-endian::

    b"MPLB" | u32 version=1 | u8 grid count
    per grid: u8 kind | u8 element type | u32 H | u32 W | H·W values, row-major

kinds: 0 backscatter, 1 ldr, 2 clean_mask, 3 noisy_mask; element types:
0 float32, 1 u8. Checkpoints use the same conventions::

    b"MPLW" | u32 version=1 | u32 tensor count
    per tensor: u16 name length | name (utf-8) | u8 rank | u32 dims... | float32 payload
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError, TruncationError
from .lidar import DayRecord

RECORD_MAGIC = b"MPLB"
CHECKPOINT_MAGIC = b"MPLW"
VERSION = 1
KINDS = ("backscatter", "ldr", "clean_mask", "noisy_mask")
ELEMENT_TYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
MAX_DIM = 1 << 20


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_record(day: DayRecord) -> bytes:
    grids = [(0, day.backscatter, 0), (1, day.ldr, 0)]
    if day.clean_mask is not None:
        grids.append((2, day.clean_mask, 1))
    if day.noisy_mask is not None:
        grids.append((3, day.noisy_mask, 1))
    parts = [RECORD_MAGIC, struct.pack("<IB", VERSION, len(grids))]
    for kind, grid, etype in grids:
        h, w = grid.shape
        parts.append(struct.pack("<BBII", kind, etype, h, w))
        parts.append(np.ascontiguousarray(grid, dtype=ELEMENT_TYPES[etype]).tobytes())
    return b"".join(parts)


def decode_record(buf: bytes, day_id: str = "") -> DayRecord:
    r = _Reader(buf)
    if r.take(4, "magic") != RECORD_MAGIC:
        raise FormatError("bad magic, expected b'MPLB'", offset=0)
    version = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    count = r.unpack("<B", "grid count")
    grids = {}
    for _ in range(count):
        start = r.pos
        kind, etype, h, w = r.unpack("<BBII", "grid header")
        if kind >= len(KINDS):
            raise FormatError(f"unknown grid kind {kind}", offset=start)
        if etype not in ELEMENT_TYPES:
            raise FormatError(f"unknown element type {etype}", offset=start + 1)
        if h > MAX_DIM or w > MAX_DIM or h == 0 or w == 0:
            raise FormatError(f"grid dimensions {h}×{w} out of range", offset=start + 2)
        if KINDS[kind] in grids:
            raise FormatError(f"duplicate {KINDS[kind]} grid", offset=start)
        dtype = ELEMENT_TYPES[etype]
        data = r.take(h * w * dtype.itemsize, f"{KINDS[kind]} payload")
        grids[KINDS[kind]] = np.frombuffer(data, dtype=dtype).reshape(h, w).copy()
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", offset=r.pos)
    if "backscatter" not in grids or "ldr" not in grids:
        raise FormatError("record lacks a backscatter or ldr grid", offset=r.pos)
    return DayRecord(
        backscatter=grids["backscatter"].astype(np.float32),
        ldr=grids["ldr"].astype(np.float32),
        clean_mask=grids.get("clean_mask"),
        noisy_mask=grids.get("noisy_mask"),
        day_id=day_id,
    )


def write_record(day: DayRecord, path) -> None:
    atomic_write_bytes(path, encode_record(day))


def read_record(path) -> DayRecord:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return DayRecord(*_read_csv_grids(path), day_id=path.stem)
    return decode_record(path.read_bytes(), day_id=path.stem)


def read_csv_grid(path) -> np.ndarray:
    """One grid per CSV file, rows are height bins; empty cells and ``nan`` read as NaN."""
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rows.append([float(v) if v.strip() else np.nan for v in line.split(",")])
    if not rows or len({len(r) for r in rows}) != 1:
        raise FormatError(f"{path}: CSV grid must be non-empty and rectangular")
    return np.array(rows, dtype=np.float64)


def _read_csv_grids(path: Path):
    # a lone CSV is taken as backscatter; a sibling <stem>_ldr.csv supplies LDR
    bs = read_csv_grid(path).astype(np.float32)
    ldr_path = path.with_name(path.stem + "_ldr.csv")
    ldr = read_csv_grid(ldr_path).astype(np.float32) if ldr_path.exists() else np.zeros_like(bs)
    return bs, ldr


def write_mask_record(mask: np.ndarray, path, kind: int = 3) -> None:
    """Store a lone mask in an MPLB container (used by ``predict``)."""
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    h, w = mask.shape
    payload = RECORD_MAGIC + struct.pack("<IB", VERSION, 1) + struct.pack("<BBII", kind, 1, h, w) + mask.tobytes()
    atomic_write_bytes(path, payload)


def read_grids(path) -> dict:
    """All grids of an MPLB file by kind name, without requiring backscatter/ldr."""
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if r.take(4, "magic") != RECORD_MAGIC:
        raise FormatError("bad magic, expected b'MPLB'", offset=0)
    if r.unpack("<I", "version") != VERSION:
        raise FormatError("unsupported version", offset=4)
    out = {}
    for _ in range(r.unpack("<B", "grid count")):
        start = r.pos
        kind, etype, h, w = r.unpack("<BBII", "grid header")
        if kind >= len(KINDS) or etype not in ELEMENT_TYPES:
            raise FormatError("bad grid header", offset=start)
        if h > MAX_DIM or w > MAX_DIM:
            raise FormatError(f"grid dimensions {h}×{w} out of range", offset=start + 2)
        dtype = ELEMENT_TYPES[etype]
        out[KINDS[kind]] = np.frombuffer(r.take(h * w * dtype.itemsize, "payload"), dtype=dtype).reshape(h, w).copy()
    return out


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncationError(
                f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} left", offset=self.pos
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt), what))
        return vals[0] if len(vals) == 1 else vals


def encode_checkpoint(arrays: dict) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict:
    r = _Reader(buf)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad magic, expected b'MPLW'", offset=0)
    if r.unpack("<I", "version") != VERSION:
        raise FormatError("unsupported checkpoint version", offset=4)
    count = r.unpack("<I", "tensor count")
    out = {}
    for _ in range(count):
        start = r.pos
        name = r.take(r.unpack("<H", "name length"), "name").decode("utf-8")
        rank = r.unpack("<B", "rank")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims")) if rank else ()
        if any(d > MAX_DIM for d in dims):
            raise FormatError(f"tensor {name!r} dimensions {dims} out of range", offset=start)
        size = int(np.prod(dims)) if dims else 1
        out[name] = np.frombuffer(r.take(4 * size, f"payload of {name!r}"), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", offset=r.pos)
    return out


def write_checkpoint(arrays: dict, path, sidecar: dict = None) -> None:
    """Write tensors plus a ``<path>.txt`` sidecar of ``key = value`` lines."""
    atomic_write_bytes(path, encode_checkpoint(arrays))
    if sidecar is not None:
        atomic_write_text(sidecar_path(path), format_kv(sidecar))


def read_checkpoint(path) -> dict:
    return decode_checkpoint(Path(path).read_bytes())


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".txt")


def format_kv(d: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in d.items())


def parse_kv(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; later keys override earlier ones."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        out[key] = value
    return out
