"""Frame ingestion and emission: PNG (8/16-bit) and binary PPM (P6), bit-exact.

Codecs are self-contained (zlib from the standard library) so 16-bit samples
survive round trips at full precision.  Supported PNG layouts: bit depth
8/16, color types gray / RGB / gray+alpha / RGBA, no interlacing, no palette.
Alpha channels are dropped on load; grayscale is replicated to three
channels.
"""

from __future__ import annotations

import re
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "IngestionError",
    "VideoClip",
    "load_clip",
    "read_image",
    "write_image",
    "natural_key",
]

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
IMAGE_SUFFIXES = (".png", ".ppm")


class IngestionError(RuntimeError):
    """A frame file could not be read or a clip is inconsistent."""


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------


def _png_chunk(tag: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(tag + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", crc)


def _write_png(path: Path, samples: np.ndarray, bit_depth: int) -> None:
    """``samples``: (H, W, 3) unsigned integers already in range."""
    H, W, _ = samples.shape
    header = struct.pack(">IIBBBBB", W, H, bit_depth, 2, 0, 0, 0)
    dtype = ">u2" if bit_depth == 16 else "u1"
    rows = samples.astype(dtype).tobytes()
    bpr = W * 3 * (bit_depth // 8)
    raw = bytearray()
    for r in range(H):
        raw.append(0)  # filter type none
        raw += rows[r * bpr : (r + 1) * bpr]
    blob = (
        _PNG_SIGNATURE
        + _png_chunk(b"IHDR", header)
        + _png_chunk(b"IDAT", zlib.compress(bytes(raw)))
        + _png_chunk(b"IEND", b"")
    )
    path.write_bytes(blob)


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    if pb <= pc:
        return b
    return c


def _defilter(raw: bytes, H: int, W: int, channels: int, bit_depth: int) -> np.ndarray:
    bpp = channels * (bit_depth // 8)
    bpr = W * bpp
    out = np.zeros((H, bpr), dtype=np.uint8)
    pos = 0
    prev = np.zeros(bpr, dtype=np.int64)
    for r in range(H):
        ftype = raw[pos]
        pos += 1
        row = np.frombuffer(raw, dtype=np.uint8, count=bpr, offset=pos).astype(np.int64)
        pos += bpr
        if ftype == 0:
            recon = row
        elif ftype == 1:  # sub: prefix sums per byte lane, modulo 256
            recon = row.copy()
            for lane in range(bpp):
                recon[lane::bpp] = np.cumsum(row[lane::bpp]) % 256
        elif ftype == 2:  # up
            recon = (row + prev) % 256
        elif ftype == 3:  # average
            recon = np.zeros(bpr, dtype=np.int64)
            for i in range(bpr):
                left = recon[i - bpp] if i >= bpp else 0
                recon[i] = (row[i] + (left + prev[i]) // 2) % 256
        elif ftype == 4:  # paeth
            recon = np.zeros(bpr, dtype=np.int64)
            for i in range(bpr):
                left = recon[i - bpp] if i >= bpp else 0
                ul = prev[i - bpp] if i >= bpp else 0
                recon[i] = (row[i] + _paeth(int(left), int(prev[i]), int(ul))) % 256
        else:
            raise IngestionError(f"unsupported PNG filter type {ftype}")
        out[r] = recon
        prev = recon
    return out


def _read_png(path: Path) -> tuple[np.ndarray, int]:
    blob = path.read_bytes()
    if blob[:8] != _PNG_SIGNATURE:
        raise IngestionError(f"{path}: not a PNG file")
    pos = 8
    ihdr = None
    idat = bytearray()
    while pos + 8 <= len(blob):
        (length,) = struct.unpack_from(">I", blob, pos)
        tag = blob[pos + 4 : pos + 8]
        payload = blob[pos + 8 : pos + 8 + length]
        pos += 12 + length
        if tag == b"IHDR":
            ihdr = struct.unpack(">IIBBBBB", payload)
        elif tag == b"IDAT":
            idat += payload
        elif tag == b"IEND":
            break
    if ihdr is None or not idat:
        raise IngestionError(f"{path}: missing IHDR or IDAT")
    W, H, bit_depth, color_type, _comp, _filt, interlace = ihdr
    if interlace != 0:
        raise IngestionError(f"{path}: interlaced PNG is unsupported")
    if bit_depth not in (8, 16):
        raise IngestionError(f"{path}: unsupported bit depth {bit_depth}")
    channels = {0: 1, 2: 3, 4: 2, 6: 4}.get(color_type)
    if channels is None:
        raise IngestionError(f"{path}: unsupported color type {color_type}")
    raw = zlib.decompress(bytes(idat))
    expected = H * (1 + W * channels * (bit_depth // 8))
    if len(raw) != expected:
        raise IngestionError(f"{path}: IDAT payload has wrong size")
    bytes_grid = _defilter(raw, H, W, channels, bit_depth)
    if bit_depth == 16:
        samples = bytes_grid.reshape(H, W, channels, 2)
        values = (samples[..., 0].astype(np.uint16) << 8) | samples[..., 1]
    else:
        values = bytes_grid.reshape(H, W, channels)
    if channels == 1:
        rgb = np.repeat(values[:, :, None] if values.ndim == 2 else values, 3, axis=2)
    elif channels == 2:
        rgb = np.repeat(values[:, :, :1], 3, axis=2)
    else:
        rgb = values[:, :, :3]
    return np.ascontiguousarray(rgb), bit_depth


# ---------------------------------------------------------------------------
# PPM (P6)
# ---------------------------------------------------------------------------


def _read_ppm_token(blob: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(blob):
        if blob[pos : pos + 1].isspace():
            pos += 1
        elif blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
        else:
            break
    start = pos
    while pos < len(blob) and not blob[pos : pos + 1].isspace():
        pos += 1
    return blob[start:pos], pos


def _read_ppm(path: Path) -> tuple[np.ndarray, int, int]:
    blob = path.read_bytes()
    magic, pos = _read_ppm_token(blob, 0)
    if magic != b"P6":
        raise IngestionError(f"{path}: not a binary PPM (P6) file")
    fields = []
    for _ in range(3):
        token, pos = _read_ppm_token(blob, pos)
        if not token.isdigit():
            raise IngestionError(f"{path}: malformed PPM header")
        fields.append(int(token))
    W, H, maxval = fields
    if maxval <= 0 or maxval >= 65536:
        raise IngestionError(f"{path}: PPM maxval {maxval} out of range")
    pos += 1  # single whitespace after maxval
    dtype = ">u2" if maxval > 255 else "u1"
    count = W * H * 3
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
    if data.size != count:
        raise IngestionError(f"{path}: truncated PPM payload")
    bit_depth = 16 if maxval > 255 else 8
    return data.reshape(H, W, 3).astype(np.uint16), bit_depth, maxval


def _write_ppm(path: Path, samples: np.ndarray, bit_depth: int) -> None:
    H, W, _ = samples.shape
    maxval = (1 << bit_depth) - 1
    header = f"P6\n{W} {H}\n{maxval}\n".encode()
    dtype = ">u2" if bit_depth == 16 else "u1"
    path.write_bytes(header + samples.astype(dtype).tobytes())


# ---------------------------------------------------------------------------
# unified frame interface
# ---------------------------------------------------------------------------


def read_image(path) -> tuple[np.ndarray, int]:
    """Decode a frame to unit-scale float64 (3, H, W); returns (frame, bit_depth)."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".png":
            rgb, bit_depth = _read_png(path)
            scale = float((1 << bit_depth) - 1)
        elif path.suffix.lower() == ".ppm":
            rgb, bit_depth, maxval = _read_ppm(path)
            scale = float(maxval)
        else:
            raise IngestionError(f"{path}: unsupported image format")
    except IngestionError:
        raise
    except Exception as exc:  # corrupt zlib stream, truncated header, ...
        raise IngestionError(f"{path}: unreadable image ({exc})") from exc
    frame = rgb.astype(np.float64).transpose(2, 0, 1) / scale
    return np.ascontiguousarray(frame), bit_depth


def write_image(path, frame: np.ndarray, bit_depth: int = 8) -> None:
    """Quantize a unit-scale (3, H, W) frame and write PNG or PPM by suffix."""
    path = Path(path)
    if bit_depth not in (8, 16):
        raise IngestionError(f"unsupported output bit depth {bit_depth}")
    peak = (1 << bit_depth) - 1
    samples = np.rint(np.clip(frame, 0.0, 1.0) * peak).astype(np.uint32)
    samples = samples.transpose(1, 2, 0)
    if path.suffix.lower() == ".png":
        _write_png(path, samples, bit_depth)
    elif path.suffix.lower() == ".ppm":
        _write_ppm(path, samples, bit_depth)
    else:
        raise IngestionError(f"{path}: unsupported output format")


# ---------------------------------------------------------------------------
# clips
# ---------------------------------------------------------------------------


def natural_key(name: str):
    """Sort key treating digit runs numerically: 2.png before 10.png."""
    parts = re.split(r"(\d+)", name)
    return tuple(int(p) if p.isdigit() else p for p in parts)


@dataclass
class VideoClip:
    """An ordered frame sequence plus enough metadata to write results back."""

    frames: list[np.ndarray]
    paths: list[Path]
    bit_depths: list[int]
    fps: float | None = None

    def __len__(self):
        return len(self.frames)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.frames[0].shape[1], self.frames[0].shape[2]


def load_clip(directory) -> VideoClip:
    """Decode every PNG/PPM in ``directory``, ordered by natural filename sort."""
    directory = Path(directory)
    if not directory.is_dir():
        raise IngestionError(f"{directory} is not a directory")
    files = [
        p for p in directory.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    ]
    if not files:
        raise IngestionError(f"no PNG or PPM frames in {directory}")
    files.sort(key=lambda p: natural_key(p.name))
    frames = []
    depths = []
    for p in files:
        frame, depth = read_image(p)
        if frames and frame.shape != frames[0].shape:
            raise IngestionError(
                f"{p}: resolution {frame.shape[1:]} differs from "
                f"{frames[0].shape[1:]} in the same clip"
            )
        frames.append(frame)
        depths.append(depth)
    return VideoClip(frames=frames, paths=files, bit_depths=depths)
