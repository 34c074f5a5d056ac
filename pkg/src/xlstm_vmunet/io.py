"""Binary netpbm images, the checkpoint container, and flat ``key = value`` config files."""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import ConfigurationError, DataError

# --- PGM / PPM -------------------------------------------------------------------

_PNM = {b"P5": 1, b"P6": 3}


def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataError("truncated netpbm header")
        tokens.append(buf[start:pos])
    return tokens, pos


def decode_pnm(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    """H×W (P5) or H×W×3 (P6) uint8 array."""
    tokens, pos = _header_tokens(buf, 4)
    magic = tokens[0]
    if magic not in _PNM:
        raise DataError(f"{source}: not a binary PGM/PPM (magic {magic!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{source}: malformed header") from None
    if maxval != 255:
        raise DataError(f"{source}: maxval {maxval} unsupported, need 255")
    if width < 1 or height < 1:
        raise DataError(f"{source}: empty image {width}×{height}")
    channels = _PNM[magic]
    pos += 1  # exactly one whitespace byte before the raster
    raster = buf[pos:pos + width * height * channels]
    if len(raster) != width * height * channels:
        raise DataError(f"{source}: raster truncated ({len(raster)} of {width * height * channels} bytes)")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return arr[..., 0].copy() if channels == 1 else arr.copy()


def encode_pnm(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise DataError(f"netpbm pixels must be uint8, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise DataError(f"expected H×W or H×W×3 pixels, got {arr.shape}")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes()


def read_pnm(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    return decode_pnm(buf, str(path))


def write_pnm(path, arr) -> None:
    Path(path).write_bytes(encode_pnm(arr))


def to_unit(pixels: np.ndarray) -> np.ndarray:
    """uint8 H×W or H×W×3 -> float C×H×W in [0, 1]."""
    x = pixels.astype(np.float64) / 255.0
    return x[None] if x.ndim == 2 else x.transpose(2, 0, 1)


def from_unit(image: np.ndarray) -> np.ndarray:
    """float C×H×W in [0, 1] -> uint8 H×W (C=1) or H×W×3."""
    px = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    return px[0] if px.shape[0] == 1 else px.transpose(1, 2, 0)


# --- checkpoints -----------------------------------------------------------------

MAGIC = b"XVMU"
VERSION = 1


class CheckpointVersionError(DataError):
    pass


@dataclasses.dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]


def encode_checkpoint(config: Mapping[str, Any], tensors: Mapping[str, Any]) -> bytes:
    """``XVMU``, u16 version, u32-prefixed UTF-8 JSON config, u32 count, then per tensor:
    u32-prefixed UTF-8 name, u32 rank, rank × u32 extents, little-endian f32 data."""
    parts = [MAGIC, struct.pack("<H", VERSION)]
    text = json.dumps(dict(config), sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(text)), text, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(getattr(value, "data", value))
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.astype("<f4").tobytes()]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DataError(f"{self.source}: checkpoint truncated at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(buf, source)
    if r.take(4) != MAGIC:
        raise DataError(f"{source}: not a checkpoint (bad magic)")
    version = struct.unpack("<H", r.take(2))[0]
    if version != VERSION:
        raise CheckpointVersionError(f"{source}: checkpoint version {version}, this build reads {VERSION}")
    try:
        config = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{source}: unreadable config block ({exc})") from None
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float64)
    if r.pos != len(buf):
        raise DataError(f"{source}: {len(buf) - r.pos} trailing bytes after tensor table")
    return Checkpoint(config, tensors)


def save_checkpoint(path, config: Mapping[str, Any], tensors: Mapping[str, Any]) -> None:
    Path(path).write_bytes(encode_checkpoint(config, tensors))


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return decode_checkpoint(buf, str(path))


# --- key = value config files ----------------------------------------------------------

def _parse_value(key: str, raw: str, default: Any) -> Any:
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(" ", "").strip("()[]").split(",") if v)
        return raw
    except ValueError:
        raise ConfigurationError(f"config key {key!r}: cannot parse {raw!r} "
                                 f"as {type(default).__name__}") from None


def parse_config(text: str, defaults: Mapping[str, Any], source: str = "<config>") -> dict[str, Any]:
    """Parse ``key = value`` lines, typed after ``defaults``. Unknown or repeated keys are errors."""
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigurationError(f"{source}:{lineno}: key {key!r} given twice")
        out[key] = _parse_value(key, raw, defaults[key])
    return out


def read_config(path, defaults: Mapping[str, Any]) -> dict[str, Any]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, defaults, str(path))


def format_config(values: Mapping[str, Any]) -> str:
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (tuple, list)):
            return ",".join(str(x) for x in v)
        return str(v)
    return "".join(f"{k} = {fmt(v)}\n" for k, v in values.items())
