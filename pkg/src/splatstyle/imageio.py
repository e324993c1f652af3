"""Image I/O: 8-bit PNG (RGB) and the raw float image format "GSIM".

The PNG codec is self-contained (zlib + stdlib struct): encoder writes
filter-0 scanlines, decoder handles bit depth 8 with color types 0/2/6 and
all five scanline filters. Deterministic output bytes for identical input.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ParseError

GSIM_MAGIC = b"GSIM"
_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def encode_png(image: np.ndarray) -> bytes:
    """Encode an (H, W, 3) float array in [0, 1] (or uint8) as PNG bytes."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[..., None].repeat(3, axis=2)
    if image.shape[2] != 3:
        raise ValueError(f"expected 3 channels, got {image.shape}")
    if image.dtype != np.uint8:
        image = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    h, w, _ = image.shape
    raw = b"".join(b"\x00" + image[r].tobytes() for r in range(h))
    idat = zlib.compress(raw, 6)

    def chunk(tag, payload):
        body = tag + payload
        return struct.pack(">I", len(payload)) + body + struct.pack(">I", zlib.crc32(body))

    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return _PNG_SIG + chunk(b"IHDR", ihdr) + chunk(b"IDAT", idat) + chunk(b"IEND", b"")


def _unfilter(raw: bytes, h: int, w: int, nch: int) -> np.ndarray:
    stride = w * nch
    out = np.zeros((h, stride), dtype=np.uint8)
    pos = 0
    prev = np.zeros(stride, dtype=np.int32)
    for r in range(h):
        ftype = raw[pos]
        pos += 1
        line = np.frombuffer(raw, dtype=np.uint8, count=stride, offset=pos).astype(np.int32)
        pos += stride
        if ftype == 0:
            cur = line
        elif ftype == 1:      # sub
            cur = line.copy()
            for i in range(nch, stride):
                cur[i] = (cur[i] + cur[i - nch]) & 0xFF
        elif ftype == 2:      # up
            cur = (line + prev) & 0xFF
        elif ftype == 3:      # average
            cur = line.copy()
            for i in range(stride):
                left = cur[i - nch] if i >= nch else 0
                cur[i] = (cur[i] + ((left + prev[i]) >> 1)) & 0xFF
        elif ftype == 4:      # paeth
            cur = line.copy()
            for i in range(stride):
                a = cur[i - nch] if i >= nch else 0
                b = prev[i]
                c = prev[i - nch] if i >= nch else 0
                p = a + b - c
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                pred = a if (pa <= pb and pa <= pc) else (b if pb <= pc else c)
                cur[i] = (cur[i] + pred) & 0xFF
        else:
            raise ParseError(f"unknown PNG filter {ftype}", offset=pos - 1 - stride)
        out[r] = cur.astype(np.uint8)
        prev = cur
    return out


def decode_png(data: bytes) -> np.ndarray:
    """Decode PNG bytes to an (H, W, 3) float array in [0, 1]. Alpha is dropped."""
    if data[:8] != _PNG_SIG:
        raise ParseError("not a PNG file", offset=0)
    pos = 8
    width = height = None
    color_type = None
    idat = b""
    while pos + 8 <= len(data):
        length, tag = struct.unpack_from(">I4s", data, pos)
        payload = data[pos + 8: pos + 8 + length]
        if tag == b"IHDR":
            width, height, depth, color_type, comp, filt, interlace = \
                struct.unpack(">IIBBBBB", payload)
            if depth != 8:
                raise ParseError(f"unsupported PNG bit depth {depth}", offset=pos)
            if color_type not in (0, 2, 6):
                raise ParseError(f"unsupported PNG color type {color_type}", offset=pos)
            if interlace != 0:
                raise ParseError("interlaced PNG not supported", offset=pos)
        elif tag == b"IDAT":
            idat += payload
        elif tag == b"IEND":
            break
        pos += 12 + length
    if width is None or not idat:
        raise ParseError("PNG missing IHDR or IDAT", offset=pos)
    nch = {0: 1, 2: 3, 6: 4}[color_type]
    raw = zlib.decompress(idat)
    need = height * (1 + width * nch)
    if len(raw) < need:
        raise ParseError("truncated PNG pixel data", offset=len(data))
    pixels = _unfilter(raw, height, width, nch).reshape(height, width, nch)
    if nch == 1:
        pixels = pixels.repeat(3, axis=2)
    rgb = pixels[..., :3].astype(np.float64) / 255.0
    return rgb


def save_png(image: np.ndarray, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_png(image))
    tmp.replace(path)


def load_png(path) -> np.ndarray:
    return decode_png(Path(path).read_bytes())


def save_gsim(image: np.ndarray, path):
    """Raw float image: magic, H u32, W u32, C u16, f32 row-major."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[..., None]
    h, w, c = image.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = struct.pack("<4sIIH", GSIM_MAGIC, h, w, c) + image.astype("<f4").tobytes()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_gsim(path) -> np.ndarray:
    data = Path(path).read_bytes()
    head = struct.calcsize("<4sIIH")
    if len(data) < head:
        raise ParseError("truncated GSIM header", offset=len(data))
    magic, h, w, c = struct.unpack_from("<4sIIH", data, 0)
    if magic != GSIM_MAGIC:
        raise ParseError(f"bad magic {magic!r}", offset=0)
    if len(data) != head + 4 * h * w * c:
        raise ParseError("GSIM payload size mismatch", offset=len(data))
    return np.frombuffer(data, dtype="<f4", offset=head).reshape(h, w, c).copy()
