"""Bit-exact file formats: tensors, checkpoints, PGM/PPM images, metric CSVs.

Everything is little-endian and 64-bit on the numeric side. Readers validate
eagerly and raise ``FormatError`` with the offending byte offset; they never
let malformed input escape as an unstructured crash.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .tensor import Tensor

TENSOR_MAGIC = b"AVST"
CHECKPOINT_MAGIC = b"AVSC"
_MAX_RANK = 16
_MAX_DIM = 2**31
_MAX_NAME = 4096


class FormatError(ValueError):
    """Malformed on-disk data; the message names the byte offset."""


def _need(buf: bytes, offset: int, count: int, what: str) -> bytes:
    if offset + count > len(buf):
        raise FormatError(f"truncated {what} at byte {offset}: "
                          f"need {count} bytes, have {len(buf) - offset}")
    return buf[offset:offset + count]


# ---------------------------------------------------------------------------
# tensor files
# ---------------------------------------------------------------------------

def tensor_bytes(value) -> bytes:
    """Serialize an array or Tensor: magic, u32 rank, u32 dims, f64 payload."""
    arr = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value,
                               dtype=np.float64)
    head = TENSOR_MAGIC + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def parse_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one embedded tensor, returning (array, next offset)."""
    magic = _need(buf, offset, 4, "tensor magic")
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r} at byte {offset}")
    (rank,) = struct.unpack("<I", _need(buf, offset + 4, 4, "tensor rank"))
    if rank > _MAX_RANK:
        raise FormatError(f"unreasonable rank {rank} at byte {offset + 4}")
    dims_off = offset + 8
    dims = struct.unpack(f"<{rank}I", _need(buf, dims_off, 4 * rank, "tensor dims"))
    count = 1
    for i, d in enumerate(dims):
        if d == 0 or d > _MAX_DIM:
            raise FormatError(f"bad dimension {d} at byte {dims_off + 4 * i}")
        count *= d
        if count > 2**40:
            raise FormatError(f"dimension overflow at byte {dims_off + 4 * i}")
    payload_off = dims_off + 4 * rank
    payload = _need(buf, payload_off, 8 * count, "tensor payload")
    arr = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    return arr, payload_off + 8 * count


def write_tensor(path, value) -> None:
    Path(path).write_bytes(tensor_bytes(value))


def read_tensor(path) -> Tensor:
    buf = Path(path).read_bytes()
    arr, end = parse_tensor(buf)
    if end != len(buf):
        raise FormatError(f"trailing data at byte {end}")
    return Tensor(arr)


# ---------------------------------------------------------------------------
# checkpoints: named-parameter tables
# ---------------------------------------------------------------------------

def write_checkpoint(path, params) -> None:
    """Write a name -> tensor table; iteration order is preserved on disk."""
    items = list(params.items())
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        raise ValueError("checkpoint parameter names must be unique")
    blob = bytearray(CHECKPOINT_MAGIC + struct.pack("<I", len(items)))
    for name, value in items:
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded)) + encoded + tensor_bytes(value)
    Path(path).write_bytes(bytes(blob))


def read_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    buf = Path(path).read_bytes()
    magic = _need(buf, 0, 4, "checkpoint magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r} at byte 0")
    (count,) = struct.unpack("<I", _need(buf, 4, 4, "entry count"))
    off = 8
    table: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _need(buf, off, 4, "name length"))
        if name_len == 0 or name_len > _MAX_NAME:
            raise FormatError(f"bad name length {name_len} at byte {off}")
        raw = _need(buf, off + 4, name_len, "entry name")
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"undecodable name at byte {off + 4}: {exc}") from exc
        if name in table:
            raise FormatError(f"duplicate entry {name!r} at byte {off + 4}")
        arr, off = parse_tensor(buf, off + 4 + name_len)
        table[name] = arr
    if off != len(buf):
        raise FormatError(f"trailing data at byte {off}")
    return table


# ---------------------------------------------------------------------------
# netpbm images
# ---------------------------------------------------------------------------

def _read_pnm_header(buf: bytes, magic: bytes):
    """Parse 'P5'/'P6', dims, and maxval, skipping '#' comments."""
    if buf[:2] != magic:
        raise FormatError(f"bad image magic {buf[:2]!r} at byte 0, expected {magic!r}")
    fields = []
    pos = 2
    while len(fields) < 3:
        if pos >= len(buf):
            raise FormatError(f"truncated image header at byte {pos}")
        ch = buf[pos:pos + 1]
        if ch == b"#":
            nl = buf.find(b"\n", pos)
            if nl < 0:
                raise FormatError(f"unterminated comment at byte {pos}")
            pos = nl + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(buf) and not buf[end:end + 1].isspace():
                end += 1
            token = buf[pos:end]
            if not token.isdigit():
                raise FormatError(f"non-numeric header token {token!r} at byte {pos}")
            fields.append(int(token))
            pos = end
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"missing whitespace before payload at byte {pos}")
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise FormatError(f"bad image dimensions {width}x{height} at byte 2")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} at byte {pos}")
    return width, height, pos + 1


def write_pgm(path, gray: np.ndarray) -> None:
    """Write a uint8 grayscale image as binary P5 with maxval 255."""
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"PGM needs a 2-d array, got shape {gray.shape}")
    h, w = gray.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + gray.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    w, h, start = _read_pnm_header(buf, b"P5")
    payload = _need(buf, start, w * h, "PGM payload")
    if start + w * h != len(buf):
        raise FormatError(f"trailing data at byte {start + w * h}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def write_mask_pgm(path, mask: np.ndarray) -> None:
    """Binary mask carrier: 0 -> 0 and 1 -> 255."""
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask values must be 0 or 1")
    write_pgm(path, mask.astype(np.uint8) * 255)


def read_mask_pgm(path) -> np.ndarray:
    """Read a mask written by write_mask_pgm; bytes above 127 count as 1."""
    return (read_pgm(path) > 127).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an (h, w, 3) image with float values in [0, 1] as binary P6."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM needs an (h, w, 3) array, got shape {rgb.shape}")
    h, w, _ = rgb.shape
    bytes8 = np.rint(np.clip(rgb, 0.0, 1.0) * 255).astype(np.uint8)
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + bytes8.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 image back to float64 values in [0, 1]."""
    buf = Path(path).read_bytes()
    w, h, start = _read_pnm_header(buf, b"P6")
    payload = _need(buf, start, 3 * w * h, "PPM payload")
    if start + 3 * w * h != len(buf):
        raise FormatError(f"trailing data at byte {start + 3 * w * h}")
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return raw.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# metric CSVs
# ---------------------------------------------------------------------------

def write_metrics_csv(path, report) -> None:
    """Per-video rows sorted by id, then an ALL row with the column means."""
    if not report.per_video:
        raise ValueError("refusing to write an empty metric report")
    rows = sorted(report.per_video, key=lambda r: r[0])
    lines = ["video_id,miou,fscore"]
    for video_id, miou, fscore in rows:
        lines.append(f"{video_id},{miou:.6f},{fscore:.6f}")
    mean_miou = sum(r[1] for r in rows) / len(rows)
    mean_f = sum(r[2] for r in rows) / len(rows)
    lines.append(f"ALL,{mean_miou:.6f},{mean_f:.6f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# key = value text files (scene metadata and experiment configs)
# ---------------------------------------------------------------------------

def write_kv(path, pairs) -> None:
    lines = [f"{key} = {value}" for key, value in pairs.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_kv(path) -> "OrderedDict[str, str]":
    pairs: OrderedDict[str, str] = OrderedDict()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise FormatError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        pairs[key.strip()] = value.strip()
    return pairs
