# datagen.py
# Paired SDR/HDR training data: synthetic pseudo-raw scenes run through both
# formation pipelines, or aligned PNG frame pairs ingested from disk. Also the
# HTVD dataset file and the area downsample used for condition inputs.
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from colorpipe import (
    GAMUT,
    DEFAULT_TONES,
    EncodedImage,
    LinearImage,
    ToneCurveParams,
    form_content,
    quantize_codes,
    tone_params_from_statistics,
)
from config import Config, resolve_threads
from errors import FormatError, ImageIOError, IngestionError, ParameterError
from utils import atomic_write_bytes, list_pngs, read_png, to_integer_codes

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"HTVD"
DATASET_VERSION = 2
THUMB_LEVELS = 65535

# pseudo-raw luminance layout, in log10 of the 10000-nit scale
LOG_FLOOR = -5.0
LOG_SPAN = 2.7
NOISE_DECADES = 0.25
HIGHLIGHT_PEAK = (0.05, 0.1)


@dataclass(frozen=True)
class SynthConfig:
    count: int = 8
    size: int = 64
    seed: int = 0
    # per-image tone jitter: theta is scaled by 2**(u * stops), u uniform in [-1, 1]
    jitter_stops: float = 1.0
    hdr_jitter_stops: float = 0.0
    gradient_weight: float = 1.0
    texture_weight: float = 1.0
    max_highlights: int = 3
    tone_source: str = "fixed"
    patch_size: int = 0
    stride: int = 0
    hdr_bit_depth: int = 10

    def validate(self) -> None:
        if self.count < 1 or self.size < 8:
            raise ParameterError(f"need count >= 1 and size >= 8, got {self.count}, {self.size}")
        if self.tone_source not in ("fixed", "statistics"):
            raise ParameterError(f"tone_source must be fixed or statistics, got {self.tone_source!r}")
        if self.jitter_stops < 0 or self.hdr_jitter_stops < 0:
            raise ParameterError("jitter ranges must be non-negative")
        if self.max_highlights < 1:
            raise ParameterError("max_highlights must be at least 1")
        if self.hdr_bit_depth not in (10, 12, 16):
            raise ParameterError(f"hdr_bit_depth must be 10, 12 or 16, got {self.hdr_bit_depth}")
        if self.patch > self.size:
            raise ParameterError(f"patch size {self.patch} exceeds image size {self.size}")

    @property
    def patch(self) -> int:
        return self.patch_size or self.size

    @property
    def step(self) -> int:
        return self.stride or self.patch


@dataclass
class Patch:
    sdr: np.ndarray            # P x P x 3 uint8
    hdr: np.ndarray            # P x P x 3 uint16
    source_id: int
    y: int = 0
    x: int = 0


@dataclass
class PairedDataset:
    patches: list[Patch]
    patch_size: int
    metadata: dict = field(default_factory=dict)
    # source_id -> T x T x 3 uint16 thumbnail of the whole SDR frame
    frames: dict[int, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.patches)

    @property
    def hdr_bit_depth(self) -> int:
        return int(self.metadata.get("hdr_bit_depth", 16))

    def sdr_codes(self, indices=None) -> np.ndarray:
        """(N, P, P, 3) float codes k/255."""
        chosen = self._select(indices)
        return np.stack([p.sdr for p in chosen]).astype(np.float64) / 255.0

    def hdr_codes(self, indices=None) -> np.ndarray:
        """(N, P, P, 3) float codes, re-quantized to the formation bit depth."""
        chosen = self._select(indices)
        raw = np.stack([p.hdr for p in chosen]).astype(np.float64) / 65535.0
        return quantize_codes(raw, self.hdr_bit_depth)

    def frame_conditions(self, indices=None) -> np.ndarray | None:
        """(N, T, T, 3) float thumbnails of each patch's source frame, or None without frame records."""
        if not self.frames:
            return None
        chosen = self._select(indices)
        missing = sorted({p.source_id for p in chosen} - self.frames.keys())
        if missing:
            raise ParameterError(f"no frame thumbnail for sources {missing}")
        return np.stack([self.frames[p.source_id] for p in chosen]).astype(np.float64) / THUMB_LEVELS

    def _select(self, indices) -> list[Patch]:
        if indices is None:
            return self.patches
        return [self.patches[i] for i in indices]

    def subset(self, indices) -> "PairedDataset":
        chosen = self._select(indices)
        frames = {p.source_id: self.frames[p.source_id] for p in chosen if p.source_id in self.frames}
        return PairedDataset(chosen, self.patch_size, dict(self.metadata), frames)

    def tone_for(self, source_id: int, standard: str) -> ToneCurveParams:
        tones = self.metadata.get("tones")
        if not tones:
            raise ParameterError("dataset carries no tone records (ingested data)")
        return ToneCurveParams(**tones[source_id][standard])

    # ---------- HTVD file ----------

    def encode(self) -> bytes:
        p = self.patch_size
        buf = bytearray(DATASET_MAGIC)
        buf += struct.pack("<HHI", DATASET_VERSION, p, len(self.patches))
        for patch in self.patches:
            if patch.sdr.shape != (p, p, 3) or patch.hdr.shape != (p, p, 3):
                raise ParameterError(f"patch from source {patch.source_id} is not {p}x{p}x3")
            buf += np.ascontiguousarray(patch.sdr, dtype=np.uint8).tobytes()
            buf += np.ascontiguousarray(patch.hdr, dtype="<u2").tobytes()
        for patch in self.patches:
            buf += struct.pack("<IHH", patch.source_id, patch.y, patch.x)
        meta = json.dumps(self.metadata, sort_keys=True).encode("utf-8")
        buf += struct.pack("<I", len(meta)) + meta
        sides = {thumb.shape for thumb in self.frames.values()}
        if len(sides) > 1:
            raise ParameterError(f"frame thumbnails differ in shape: {sorted(sides)}")
        side = next(iter(sides))[0] if sides else 0
        buf += struct.pack("<IH", len(self.frames), side)
        for source_id in sorted(self.frames):
            thumb = self.frames[source_id]
            if thumb.shape != (side, side, 3):
                raise ParameterError(f"frame thumbnail of source {source_id} is not square")
            buf += struct.pack("<I", source_id) + np.ascontiguousarray(thumb, dtype="<u2").tobytes()
        return bytes(buf)

    @classmethod
    def decode(cls, blob: bytes, path=None) -> "PairedDataset":
        if blob[:4] != DATASET_MAGIC:
            raise FormatError("not a dataset file (bad magic)", path=path, offset=0)
        try:
            version, p, count = struct.unpack_from("<HHI", blob, 4)
            if version not in (1, DATASET_VERSION):
                raise FormatError(f"unsupported dataset version {version}", path=path, offset=4)
            pos, n = 12, p * p * 3
            pixels = []
            for _ in range(count):
                if pos + 3 * n > len(blob):
                    raise ImageIOError("truncated patch record", path=path, offset=pos)
                sdr = np.frombuffer(blob, dtype=np.uint8, count=n, offset=pos).reshape(p, p, 3).copy()
                hdr = np.frombuffer(blob, dtype="<u2", count=n, offset=pos + n).reshape(p, p, 3).astype(np.uint16)
                pixels.append((sdr, hdr))
                pos += 3 * n
            patches = []
            for sdr, hdr in pixels:
                source_id, y, x = struct.unpack_from("<IHH", blob, pos)
                patches.append(Patch(sdr, hdr, source_id, y, x))
                pos += 8
            (meta_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            if pos + meta_len > len(blob):
                raise ImageIOError("truncated metadata", path=path, offset=pos)
            metadata = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
            pos += meta_len
            frames = {}
            if version >= 2:
                n_frames, side = struct.unpack_from("<IH", blob, pos)
                pos += 6
                n = side * side * 3
                for _ in range(n_frames):
                    (source_id,) = struct.unpack_from("<I", blob, pos)
                    if pos + 4 + 2 * n > len(blob):
                        raise ImageIOError("truncated frame record", path=path, offset=pos)
                    thumb = np.frombuffer(blob, dtype="<u2", count=n, offset=pos + 4)
                    frames[source_id] = thumb.reshape(side, side, 3).astype(np.uint16)
                    pos += 4 + 2 * n
        except struct.error as exc:
            raise ImageIOError(f"truncated dataset: {exc}", path=path, offset=len(blob))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"bad metadata block: {exc}", path=path, offset=pos)
        return cls(patches, p, metadata, frames)

    def save(self, path) -> None:
        atomic_write_bytes(path, self.encode())
        logger.info("wrote dataset %s (%d patches of %dpx)", path, len(self.patches), self.patch_size)

    @classmethod
    def load(cls, path) -> "PairedDataset":
        try:
            blob = Path(path).read_bytes()
        except OSError as exc:
            raise ImageIOError(f"cannot read dataset: {exc.strerror}", path=path) from exc
        return cls.decode(blob, path=path)


# ---------- synthesis ----------

def _smooth_field(rng: np.random.Generator, size: int, grid: int) -> np.ndarray:
    """Band-limited noise in [-1, 1]: a coarse random grid upsampled bicubically."""
    coarse = rng.uniform(-1.0, 1.0, size=(grid, grid)).astype(np.float32)
    fine = Image.fromarray(coarse, "F").resize((size, size), Image.Resampling.BICUBIC)
    return np.clip(np.asarray(fine, dtype=np.float64), -1.0, 1.0)


def synth_raw(config: SynthConfig, index: int) -> LinearImage:
    """Deterministic pseudo-raw XYZ scene for (seed, index)."""
    if not 0 <= index < config.count:
        raise ParameterError(f"index {index} outside [0, {config.count})")
    rng = np.random.default_rng([config.seed, index])
    size = config.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)

    angle = rng.uniform(0.0, 2.0 * np.pi)
    proj = np.cos(angle) * xx + np.sin(angle) * yy
    ramp = (proj - proj.min()) / np.ptp(proj)
    grid = max(2, size // 8)
    log_y = LOG_FLOOR + LOG_SPAN * config.gradient_weight * ramp
    log_y = log_y + NOISE_DECADES * config.texture_weight * _smooth_field(rng, size, grid)
    lum = np.power(10.0, log_y)

    # bt709-positive colour field with unit luminance
    rgb = 0.35 + 0.65 * (0.5 + 0.5 * np.stack([_smooth_field(rng, size, grid) for _ in range(3)], axis=-1))
    xyz = rgb @ GAMUT.M_S_inv.T
    xyz /= xyz[..., 1:2]
    pixels = xyz * lum[..., None]

    d65 = GAMUT.M_S_inv.sum(axis=1)  # XYZ of RGB white, Y = 1
    for _ in range(int(rng.integers(1, config.max_highlights + 1))):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        # blobs sit in the bright half of the ramp and end at 3 sigma, leaving the dark end untouched
        if np.cos(angle) * cx + np.sin(angle) * cy < (proj.min() + proj.max()) / 2.0:
            cy, cx = 1.0 - cy, 1.0 - cx
        cy, cx = cy * (size - 1), cx * (size - 1)
        sigma = rng.uniform(0.04, 0.12) * size
        peak = rng.uniform(*HIGHLIGHT_PEAK)
        r2 = (yy * (size - 1) - cy) ** 2 + (xx * (size - 1) - cx) ** 2
        blob = np.where(r2 < 9.0 * sigma * sigma, peak * np.exp(-r2 / (2.0 * sigma * sigma)), 0.0)
        pixels = pixels + d65 * blob[..., None]
    return LinearImage(pixels, "xyz")


def tones_for(config: SynthConfig, raw: LinearImage, index: int) -> tuple[ToneCurveParams, ToneCurveParams]:
    if config.tone_source == "statistics":
        sdr, hdr = tone_params_from_statistics(raw, "sdr"), tone_params_from_statistics(raw, "hdr")
    else:
        sdr, hdr = DEFAULT_TONES["sdr"], DEFAULT_TONES["hdr"]
    u_sdr, u_hdr = np.random.default_rng([config.seed, index, 1]).uniform(-1.0, 1.0, size=2)
    sdr = replace(sdr, theta=sdr.theta * 2.0 ** (u_sdr * config.jitter_stops))
    hdr = replace(hdr, theta=hdr.theta * 2.0 ** (u_hdr * config.hdr_jitter_stops))
    return sdr, hdr


def tile_offsets(height: int, width: int, patch: int, stride: int) -> list[tuple[int, int]]:
    if patch < 1 or stride < 1:
        raise ParameterError(f"patch and stride must be positive, got {patch}, {stride}")
    if patch > min(height, width):
        raise ParameterError(f"patch {patch} larger than {height}x{width} source")
    return [(y, x) for y in range(0, height - patch + 1, stride) for x in range(0, width - patch + 1, stride)]


def _cut(sdr_ints: np.ndarray, hdr_ints: np.ndarray, source_id: int, patch: int, stride: int) -> list[Patch]:
    h, w = sdr_ints.shape[:2]
    return [
        Patch(sdr_ints[y:y + patch, x:x + patch].copy(), hdr_ints[y:y + patch, x:x + patch].copy(), source_id, y, x)
        for y, x in tile_offsets(h, w, patch, stride)
    ]


def frame_thumbnail(sdr_ints: np.ndarray, side: int) -> np.ndarray:
    """Whole 8-bit SDR frame area-downsampled to side x side, kept as 16-bit codes."""
    small = box_downsample(sdr_ints.astype(np.float64) / 255.0, side)
    return np.rint(np.clip(small, 0.0, 1.0) * THUMB_LEVELS).astype(np.uint16)


def _form_pair(config: SynthConfig, index: int):
    raw = synth_raw(config, index)
    sdr_tone, hdr_tone = tones_for(config, raw, index)
    sdr = form_content(raw, "sdr", sdr_tone)
    hdr = form_content(raw, "hdr", hdr_tone, bit_depth=config.hdr_bit_depth)
    sdr_ints = to_integer_codes(sdr, 8).astype(np.uint8)
    patches = _cut(sdr_ints, to_integer_codes(hdr, 16), index, config.patch, config.step)
    thumb = frame_thumbnail(sdr_ints, min(Config.COND_SIZE, config.size))
    return patches, {"sdr": asdict(sdr_tone), "hdr": asdict(hdr_tone)}, thumb


def build_pairs(config: SynthConfig, threads: int | None = None) -> PairedDataset:
    """Form SDR and HDR content from every pseudo-raw scene. Output order is by source, then tile."""
    config.validate()
    workers = resolve_threads(threads)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(lambda i: _form_pair(config, i), range(config.count)))
    patches = [p for chunk, _, _ in results for p in chunk]
    metadata = {
        "kind": "synth",
        "config": asdict(config),
        "seed": config.seed,
        "hdr_bit_depth": config.hdr_bit_depth,
        "tones": [tone for _, tone, _ in results],
    }
    frames = {i: thumb for i, (_, _, thumb) in enumerate(results)}
    logger.info("synthesized %d images into %d patches", config.count, len(patches))
    return PairedDataset(patches, config.patch, metadata, frames)


# ---------- ingestion ----------

def _read_pair(name: str, sdr_dir: Path, hdr_dir: Path):
    sdr, hdr = read_png(sdr_dir / name), read_png(hdr_dir / name)
    if sdr.bit_depth != 8:
        raise IngestionError(f"SDR frame must be 8-bit, got {sdr.bit_depth}-bit", name)
    if hdr.bit_depth != 16:
        raise IngestionError(f"HDR frame must be 16-bit, got {hdr.bit_depth}-bit", name)
    if sdr.shape != hdr.shape:
        raise IngestionError(f"dimension mismatch: SDR {sdr.shape} vs HDR {hdr.shape}", name)
    return sdr, hdr


def ingest_pairs(sdr_dir, hdr_dir, patch_size: int, stride: int, seed: int,
                 threads: int | None = None) -> PairedDataset:
    """
    Cut co-located patches from equally named aligned frame pairs, then shuffle
    by seed. Every pair is validated before any patch is built.
    """
    sdr_dir, hdr_dir = Path(sdr_dir), Path(hdr_dir)
    sdr_names = {p.name for p in list_pngs(sdr_dir)}
    hdr_names = {p.name for p in list_pngs(hdr_dir)}
    for name in sorted(sdr_names ^ hdr_names):
        side = "HDR" if name in sdr_names else "SDR"
        raise IngestionError(f"no matching {side} frame", name)
    names = sorted(sdr_names)
    if not names:
        raise IngestionError(f"no PNG frames in {sdr_dir}")

    with ThreadPoolExecutor(max_workers=resolve_threads(threads)) as pool:
        pairs = list(pool.map(lambda n: _read_pair(n, sdr_dir, hdr_dir), names))
    for name, (sdr, _) in zip(names, pairs):
        if patch_size > min(sdr.shape):
            raise IngestionError(f"frame {sdr.shape} smaller than patch {patch_size}", name)

    patches, frames = [], {}
    side = min(Config.COND_SIZE, *(min(sdr.shape) for sdr, _ in pairs))
    for source_id, (sdr, hdr) in enumerate(pairs):
        sdr_ints = to_integer_codes(sdr, 8).astype(np.uint8)
        patches += _cut(sdr_ints, to_integer_codes(hdr, 16), source_id, patch_size, stride)
        frames[source_id] = frame_thumbnail(sdr_ints, side)
    order = np.random.default_rng(seed).permutation(len(patches))
    metadata = {
        "kind": "ingest",
        "sources": names,
        "seed": seed,
        "patch_size": patch_size,
        "stride": stride,
        "hdr_bit_depth": 16,
    }
    logger.info("ingested %d frame pairs into %d patches", len(names), len(patches))
    return PairedDataset([patches[i] for i in order], patch_size, metadata, frames)


# ---------- condition input ----------

def box_downsample(arr: np.ndarray, target: int) -> np.ndarray:
    """Area-average an H x W x C raster to target x target."""
    h, w = arr.shape[:2]
    if target < 1 or target > min(h, w):
        raise ParameterError(f"downsample target {target} outside [1, {min(h, w)}]")
    if (h, w) == (target, target):
        return np.array(arr, dtype=np.float64)
    channels = [
        np.asarray(Image.fromarray(np.ascontiguousarray(arr[..., c], dtype=np.float32), "F")
                   .resize((target, target), Image.Resampling.BOX), dtype=np.float64)
        for c in range(arr.shape[2])
    ]
    return np.stack(channels, axis=-1)


def downsample_for_condition(img: EncodedImage, target: int = Config.COND_SIZE) -> EncodedImage:
    return img.with_codes(box_downsample(img.codes, target))
