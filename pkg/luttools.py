# luttools.py
# 3-D LUT export from a trained color-mapping model, trilinear application,
# cube and PLY files, and the color-transition test card.
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from agcm_model import AgcmParams, ConditionVector, apply_condition, condition_forward, condition_input
from colorpipe import EncodedImage, quantize_codes
from config import Config, resolve_threads
from errors import FormatError, ImageIOError, ParameterError
from utils import atomic_write_text

logger = logging.getLogger(__name__)

LUT_MIN_SIZE = 2
LUT_MAX_SIZE = 65
# lattice positions closer than this to a grid point are read from it directly
SNAP = 1e-9

CARD_HUES = (
    (1, 0, 0), (0, 1, 0), (0, 0, 1),
    (0, 1, 1), (1, 0, 1), (1, 1, 0),
    (1, 1, 1),
)
CARD_MIN_SIZE = 64


@dataclass
class Lut3D:
    table: np.ndarray          # N x N x N x 3, indexed [r, g, b]
    title: str = "hdrtv"
    condition: ConditionVector | None = None

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.float64)
        n = table.shape[0]
        if table.shape != (n, n, n, 3) or not LUT_MIN_SIZE <= n <= LUT_MAX_SIZE:
            raise ParameterError(f"LUT table must be N x N x N x 3 with N in [2, 65], got {table.shape}")
        if not np.all(np.isfinite(table)):
            raise ParameterError("LUT contains non-finite entries")
        self.table = table

    @property
    def size(self) -> int:
        return self.table.shape[0]

    @classmethod
    def identity(cls, size: int) -> "Lut3D":
        return cls(lattice_grid(size), "identity")


def lattice_grid(size: int) -> np.ndarray:
    axis = np.linspace(0.0, 1.0, size)
    return np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)


def _condition_from(model: AgcmParams, source, cond_size: int) -> ConditionVector | None:
    if not model.conditioned:
        return None
    if isinstance(source, ConditionVector):
        return source
    if isinstance(source, EncodedImage):
        return condition_forward(condition_input(source, cond_size, model.n_ccb), model)
    if source is None:
        raise ParameterError("a conditioned model needs a condition image or vector")
    return ConditionVector(np.asarray(source, dtype=np.float64))


def export_lut(model: AgcmParams, condition_source=None, size: int = 33, threads: int | None = None,
               cond_size: int = Config.COND_SIZE, title: str = "hdrtv") -> Lut3D:
    """Compute V once, then push every lattice color through the per-pixel map."""
    if not LUT_MIN_SIZE <= size <= LUT_MAX_SIZE:
        raise ParameterError(f"LUT size must be in [{LUT_MIN_SIZE}, {LUT_MAX_SIZE}], got {size}")
    condition = _condition_from(model, condition_source, cond_size)
    grid = lattice_grid(size)

    def red_slice(r: int) -> np.ndarray:
        plane = EncodedImage(grid[r], "gamma2p2", "bt709", 16, False)
        return apply_condition(plane, model, condition).codes

    with ThreadPoolExecutor(max_workers=resolve_threads(threads)) as pool:
        table = np.stack(list(pool.map(red_slice, range(size))))
    logger.info("exported %d^3 LUT", size)
    return Lut3D(table, title, condition)


def apply_lut(lut: Lut3D, img: EncodedImage) -> EncodedImage:
    """Trilinear interpolation over the lattice."""
    n = lut.size
    pos = np.clip(img.codes, 0.0, 1.0) * (n - 1)
    nearest = np.rint(pos)
    pos = np.where(np.abs(pos - nearest) < SNAP, nearest, pos)
    lo = np.clip(np.floor(pos), 0, n - 2).astype(np.intp)
    frac = pos - lo
    r0, g0, b0 = lo[..., 0], lo[..., 1], lo[..., 2]
    fr, fg, fb = (frac[..., i:i + 1] for i in range(3))
    t = lut.table
    out = np.zeros(img.codes.shape)
    for dr, wr in ((0, 1 - fr), (1, fr)):
        for dg, wg in ((0, 1 - fg), (1, fg)):
            for db, wb in ((0, 1 - fb), (1, fb)):
                out += wr * wg * wb * t[r0 + dr, g0 + dg, b0 + db]
    return EncodedImage(out, "pq", "bt2020", 16, False)


def lattice_jumps(lut: Lut3D, region: str = "highlight") -> float:
    """
    Largest output step between neighbouring lattice points, measured inside
    the highlight octant (all inputs >= 0.5) or across the whole cube.
    A proxy for posterization: a smooth mapping has small steps everywhere.
    """
    t = lut.table
    if region == "highlight":
        t = t[lut.size // 2:, lut.size // 2:, lut.size // 2:]
    elif region != "all":
        raise ParameterError(f"region must be highlight or all, got {region!r}")
    jumps = [np.max(np.abs(np.diff(t, axis=axis)), initial=0.0) for axis in range(3)]
    return float(max(jumps))


# ---------- files ----------

def _lattice_rows(table: np.ndarray) -> np.ndarray:
    """Entries in file order: red fastest, then green, then blue."""
    return table.transpose(2, 1, 0, 3).reshape(-1, 3)


def cube_text(lut: Lut3D) -> str:
    lines = [
        f'TITLE "{lut.title}"',
        f"LUT_3D_SIZE {lut.size}",
        "DOMAIN_MIN 0.0 0.0 0.0",
        "DOMAIN_MAX 1.0 1.0 1.0",
    ]
    lines += [f"{r:.10f} {g:.10f} {b:.10f}" for r, g, b in _lattice_rows(lut.table)]
    return "\n".join(lines) + "\n"


def write_cube(lut: Lut3D, path) -> None:
    atomic_write_text(path, cube_text(lut))
    logger.info("wrote %s", path)


def read_cube(path) -> Lut3D:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ImageIOError(f"cannot read LUT: {exc.strerror}", path=path) from exc
    title, size, rows = "", None, []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key = line.split()[0]
        if key == "TITLE":
            title = line[len("TITLE"):].strip().strip('"')
        elif key == "LUT_3D_SIZE":
            size = int(line.split()[1])
        elif key in ("DOMAIN_MIN", "DOMAIN_MAX"):
            expected = "0" if key == "DOMAIN_MIN" else "1"
            if any(float(v) != float(expected) for v in line.split()[1:]):
                raise FormatError(f"line {lineno}: only the unit domain is supported", path=path)
        elif key in ("LUT_1D_SIZE", "LUT_3D_INPUT_RANGE"):
            raise FormatError(f"line {lineno}: unsupported keyword {key}", path=path)
        else:
            try:
                rows.append([float(v) for v in line.split()])
            except ValueError:
                raise FormatError(f"line {lineno}: expected three numbers", path=path)
            if len(rows[-1]) != 3:
                raise FormatError(f"line {lineno}: expected three numbers", path=path)
    if size is None:
        raise FormatError("missing LUT_3D_SIZE", path=path)
    if len(rows) != size ** 3:
        raise FormatError(f"expected {size ** 3} entries, found {len(rows)}", path=path)
    table = np.asarray(rows).reshape(size, size, size, 3).transpose(2, 1, 0, 3)
    return Lut3D(table, title)


def ply_text(lut: Lut3D) -> str:
    """Vertex position = mapped HDR triple, vertex color = source SDR triple."""
    positions = _lattice_rows(lut.table)
    colors = np.rint(_lattice_rows(lattice_grid(lut.size)) * 255).astype(int)
    header = [
        "ply",
        "format ascii 1.0",
        f"comment {lut.title} LUT point cloud",
        f"element vertex {len(positions)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    body = [f"{x:.7f} {y:.7f} {z:.7f} {r} {g} {b}" for (x, y, z), (r, g, b) in zip(positions, colors)]
    return "\n".join(header + body) + "\n"


def write_ply(lut: Lut3D, path) -> None:
    atomic_write_text(path, ply_text(lut))
    logger.info("wrote %s", path)


def lut_point_cloud(model: AgcmParams, condition_source, size: int, path, threads: int | None = None,
                    cond_size: int = Config.COND_SIZE) -> Lut3D:
    lut = export_lut(model, condition_source, size, threads, cond_size)
    write_ply(lut, path)
    return lut


# ---------- test card ----------

def make_testcard(width: int = 448, height: int = 256) -> EncodedImage:
    """
    Seven vertical bands (R, G, B, C, M, Y, neutral). Down each band the level
    ramps from the clip region at the top (code 1.0) to mid-tone 0.5; across
    each band saturation ramps from white to the pure hue.
    """
    if width < CARD_MIN_SIZE or height < CARD_MIN_SIZE:
        raise ParameterError(f"test card needs at least {CARD_MIN_SIZE}x{CARD_MIN_SIZE}, got {width}x{height}")
    x = np.arange(width)
    band = x * len(CARD_HUES) // width
    first = np.array([x[band == b].min() for b in range(len(CARD_HUES))])
    last = np.array([x[band == b].max() for b in range(len(CARD_HUES))])
    sat = (x - first[band]) / np.maximum(last[band] - first[band], 1)
    hue = np.asarray(CARD_HUES, dtype=np.float64)[band]
    colour = sat[:, None] * hue + (1.0 - sat[:, None])
    level = np.minimum(0.5 + 0.75 * (1.0 - np.arange(height) / (height - 1)), 1.0)
    codes = level[:, None, None] * colour[None, :, :]
    return EncodedImage(quantize_codes(codes, 8), "gamma2p2", "bt709", 8, True)
