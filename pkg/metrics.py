# metrics.py
import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from colorpipe import EncodedImage, convert_encoded, pq_eotf, pq_oetf
from config import resolve_threads
from errors import ParameterError
from utils import atomic_write_text

logger = logging.getLogger(__name__)

# Reported when two images are identical
PSNR_CAP = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

LUMA = {
    "bt709": np.array([0.2126, 0.7152, 0.0722]),
    "bt2020": np.array([0.2627, 0.6780, 0.0593]),
}

# ICtCp (BT.2100) rationals: bt2020 RGB -> LMS, then PQ-coded L'M'S' -> ICtCp
LMS_MATRIX = np.array([
    [1688, 2146, 262],
    [683, 2951, 462],
    [99, 309, 3688],
]) / 4096
ICTCP_MATRIX = np.array([
    [2048, 2048, 0],
    [6610, -13613, 7003],
    [17933, -17390, -543],
]) / 4096
DE_ITP_SCALE = 720.0

METRICS = ("psnr", "ssim", "de_itp")


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch {a.shape} vs {b.shape}")


def psnr_codes(a, b, cap: float = PSNR_CAP) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def psnr(a: EncodedImage, b: EncodedImage) -> float:
    return psnr_codes(a.codes, b.codes)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(plane: np.ndarray, g: np.ndarray) -> np.ndarray:
    rows = sliding_window_view(plane, g.size, axis=0) @ g
    return sliding_window_view(rows, g.size, axis=1) @ g


def ssim_planes(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM of two 2-D planes with unit dynamic range."""
    _check_pair(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise ParameterError(f"image {a.shape} smaller than the {SSIM_WINDOW}px SSIM window")
    g = gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def luma(img: EncodedImage) -> np.ndarray:
    return img.codes @ LUMA[img.gamut]


def ssim(a: EncodedImage, b: EncodedImage) -> float:
    """SSIM on luma of the coded signals, as they would be compared on screen."""
    return ssim_planes(luma(a), luma(b))


def _as_pq(img: EncodedImage) -> EncodedImage:
    try:
        return convert_encoded(img, "pq", "bt2020")
    except ParameterError as exc:
        raise ParameterError(f"cannot convert {img.transfer}/{img.gamut} for colour difference: {exc}")


def ictcp(img: EncodedImage) -> np.ndarray:
    pq = _as_pq(img)
    lms = pq_eotf(pq.codes) @ LMS_MATRIX.T
    return pq_oetf(lms) @ ICTCP_MATRIX.T


def delta_e_itp_map(a: EncodedImage, b: EncodedImage) -> np.ndarray:
    _check_pair(a.codes, b.codes)
    d = ictcp(a) - ictcp(b)
    return DE_ITP_SCALE * np.sqrt(d[..., 0] ** 2 + (0.5 * d[..., 1]) ** 2 + d[..., 2] ** 2)


def delta_e_itp(a: EncodedImage, b: EncodedImage) -> float:
    return float(np.mean(delta_e_itp_map(a, b)))


_FUNCS = {"psnr": psnr, "ssim": ssim, "de_itp": delta_e_itp}


def evaluate_pair(pred: EncodedImage, ref: EncodedImage, metrics=METRICS) -> dict[str, float]:
    unknown = [name for name in metrics if name not in _FUNCS]
    if unknown:
        raise ParameterError(f"unknown metrics {unknown}")
    pred = pred.clipped()
    return {name: _FUNCS[name](pred, ref) for name in metrics}


def _fmt(value) -> str:
    return "" if value is None else f"{value:.6f}"


@dataclass
class MetricReport:
    image_ids: list[str]
    columns: dict[str, list] = field(default_factory=dict)

    def mean(self, column: str) -> float:
        values = [v for v in self.columns[column] if v is not None]
        if not values:
            return float("nan")
        return float(sum(values) / len(values))

    def means(self) -> dict[str, float]:
        return {name: self.mean(name) for name in self.columns}

    def merge_external(self, column: str, values) -> None:
        """Attach values computed elsewhere (SR-SIM, HDR-VDP3); a dict is keyed by image id."""
        if isinstance(values, dict):
            unknown = set(values) - set(self.image_ids)
            if unknown:
                raise ParameterError(f"{column}: unknown image ids {sorted(unknown)}")
            self.columns[column] = [values.get(i) for i in self.image_ids]
        else:
            values = list(values)
            if len(values) != len(self.image_ids):
                raise ParameterError(f"{column}: {len(values)} values for {len(self.image_ids)} images")
            self.columns[column] = values

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["image_id", *self.columns])
        for i, image_id in enumerate(self.image_ids):
            writer.writerow([image_id, *(_fmt(col[i]) for col in self.columns.values())])
        writer.writerow(["mean", *(_fmt(self.mean(name)) for name in self.columns)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        atomic_write_text(path, self.to_csv())
        logger.info("wrote metric report %s (%d images)", path, len(self.image_ids))


def evaluate_pairs(pairs, metrics=METRICS, threads: int | None = None) -> MetricReport:
    """pairs: iterable of (image_id, prediction, reference). Rows keep input order."""
    pairs = list(pairs)
    with ThreadPoolExecutor(max_workers=resolve_threads(threads)) as pool:
        rows = list(pool.map(lambda p: evaluate_pair(p[1], p[2], metrics), pairs))
    report = MetricReport([p[0] for p in pairs], {name: [r[name] for r in rows] for name in metrics})
    logger.info("evaluated %d images: %s", len(pairs),
                ", ".join(f"{k}={v:.4f}" for k, v in report.means().items()))
    return report
