# utils.py
import hashlib
import io
import json
import logging
import os
import platform
import struct
import uuid
import zlib
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import png
from PIL import Image

from colorpipe import EncodedImage, quantize_codes
from config import VERSION
from errors import FormatError, ImageIOError

logger = logging.getLogger(__name__)

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
# 8-bit files are SDR (gamma/bt709), 16-bit files are HDR (PQ/bt2020)
PNG_TAGS = {8: ("gamma2p2", "bt709"), 16: ("pq", "bt2020")}


# ---------- atomic output ----------

def _temp_path(path: Path) -> Path:
    return path.with_name(f".{path.name}.{uuid.uuid4().hex}.tmp")


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a sibling temp file, then rename over ``path``. Readers never see a partial file."""
    path = Path(path)
    os.makedirs(path.parent or ".", exist_ok=True)
    tmp = _temp_path(path)
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise ImageIOError(f"cannot write: {exc.strerror}", path=path) from exc


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def write_manifest(artifact, command: str, config_digest: str, seed: int, extra: dict | None = None) -> Path:
    """Sidecar ``<artifact>.manifest.json`` recording how an artifact was produced."""
    artifact = Path(artifact)
    manifest = {
        "artifact": artifact.name,
        "command": command,
        "config_digest": config_digest,
        "seed": seed,
        "versions": {
            "hdrtv": VERSION,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    if extra:
        manifest.update(extra)
    out = artifact.with_name(artifact.name + ".manifest.json")
    atomic_write_text(out, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


# ---------- PNG ----------

def _scan_chunks(blob: bytes, path) -> tuple[int, int]:
    """
    Walk the chunk list, checking lengths and CRCs. Returns (bit depth, colour type)
    from IHDR; structural damage raises ImageIOError at the offending offset.
    """
    if blob[:8] != PNG_SIGNATURE:
        raise ImageIOError("not a PNG file (bad signature)", path=path, offset=0)
    pos, header, seen_end = 8, None, False
    while pos < len(blob) and not seen_end:
        if pos + 8 > len(blob):
            raise ImageIOError("truncated chunk header", path=path, offset=pos)
        length, kind = struct.unpack_from(">I4s", blob, pos)
        end = pos + 12 + length
        if end > len(blob):
            raise ImageIOError(f"truncated {kind.decode('latin-1')} chunk", path=path, offset=pos)
        body = blob[pos + 4:pos + 8 + length]
        (crc,) = struct.unpack_from(">I", blob, pos + 8 + length)
        if zlib.crc32(body) != crc:
            raise ImageIOError(f"CRC mismatch in {kind.decode('latin-1')} chunk", path=path, offset=pos)
        if kind == b"IHDR":
            header = struct.unpack_from(">IIBB", blob, pos + 8)
        seen_end = kind == b"IEND"
        pos = end
    if header is None:
        raise ImageIOError("missing IHDR chunk", path=path, offset=8)
    if not seen_end:
        raise ImageIOError("missing IEND chunk", path=path, offset=len(blob))
    return header[2], header[3]


def read_png(path) -> EncodedImage:
    """8-bit or 16-bit PNG to codes k/(2^n - 1). Grey is replicated to RGB; alpha is dropped."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ImageIOError(f"cannot read: {exc.strerror}", path=path) from exc
    bit_depth, colour_type = _scan_chunks(blob, path)
    if bit_depth not in PNG_TAGS:
        raise FormatError(f"unsupported bit depth {bit_depth}", path=path, offset=24)
    if colour_type == 3:
        raise FormatError("palette images are not supported", path=path, offset=25)
    try:
        width, height, rows, info = png.Reader(bytes=blob).asDirect()
        planes = info["planes"]
        arr = np.vstack([np.asarray(row, dtype=np.uint16) for row in rows]).reshape(height, width, planes)
    except png.Error as exc:
        raise ImageIOError(f"malformed PNG: {exc}", path=path) from exc
    colour = arr[..., :1].repeat(3, axis=2) if info["greyscale"] else arr[..., :3]
    transfer, gamut = PNG_TAGS[bit_depth]
    codes = colour.astype(np.float64) / float(2 ** bit_depth - 1)
    return EncodedImage(codes, transfer, gamut, bit_depth, quantized=True)


def to_integer_codes(img: EncodedImage, bit_depth: int) -> np.ndarray:
    levels = 2 ** bit_depth - 1
    return np.rint(quantize_codes(np.clip(img.codes, 0.0, 1.0), bit_depth) * levels).astype(np.uint16)


def encode_png(img: EncodedImage, bit_depth: int | None = None) -> bytes:
    """8-bit images go through Pillow, everything deeper is stored as 16-bit RGB via pypng."""
    bit_depth = bit_depth or (8 if img.bit_depth == 8 else 16)
    if bit_depth not in PNG_TAGS:
        raise FormatError(f"PNG output is 8 or 16 bits, got {bit_depth}")
    ints = to_integer_codes(img, bit_depth)
    buf = io.BytesIO()
    if bit_depth == 8:
        Image.fromarray(ints.astype(np.uint8), "RGB").save(buf, format="PNG")
    else:
        height, width = ints.shape[:2]
        writer = png.Writer(width, height, bitdepth=16, greyscale=False)
        writer.write(buf, ints.reshape(height, width * 3).tolist())
    return buf.getvalue()


def write_png(img: EncodedImage, path, bit_depth: int | None = None) -> None:
    atomic_write_bytes(path, encode_png(img, bit_depth))
    logger.debug("wrote %s", path)


def list_pngs(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ImageIOError("not a directory", path=directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")
