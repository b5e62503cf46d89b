# colorpipe.py
# SDRTV/HDRTV content formation: global tone curve, 3x3 gamut matrix,
# transfer function and quantization, plus the inverse chain.
#
# Linear signals are normalized so 1.0 is 10000 cd/m^2.
import logging
from dataclasses import dataclass, replace

import numpy as np

from errors import ParameterError

logger = logging.getLogger(__name__)

GAMUTS = ("bt709", "bt2020", "xyz")
ENCODED_GAMUTS = ("bt709", "bt2020")
TRANSFERS = ("gamma2p2", "pq")
BIT_DEPTHS = (8, 10, 12, 16)

GAMMA = 2.2
# 100 cd/m^2 SDR reference white and 1000 cd/m^2 HDR grading peak on the 10000-nit scale
SDR_WHITE = 0.01
HDR_PEAK = 0.1
STAT_OFFSET = 1e-6


# ---------- image types ----------

@dataclass(frozen=True, eq=False)
class LinearImage:
    pixels: np.ndarray
    gamut: str = "xyz"

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ParameterError(f"LinearImage needs an HxWx3 raster, got {px.shape}")
        if self.gamut not in GAMUTS:
            raise ParameterError(f"unknown gamut {self.gamut!r}")
        if not np.all(np.isfinite(px)):
            raise ParameterError("LinearImage contains non-finite values")
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> tuple:
        return self.pixels.shape[:2]


@dataclass(frozen=True, eq=False)
class EncodedImage:
    codes: np.ndarray
    transfer: str = "pq"
    gamut: str = "bt2020"
    bit_depth: int = 16
    quantized: bool = False

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.float64)
        if codes.ndim != 3 or codes.shape[2] != 3:
            raise ParameterError(f"EncodedImage needs an HxWx3 raster, got {codes.shape}")
        if self.transfer not in TRANSFERS:
            raise ParameterError(f"unknown transfer {self.transfer!r}")
        if self.gamut not in ENCODED_GAMUTS:
            raise ParameterError(f"encoded images are bt709 or bt2020, got {self.gamut!r}")
        if self.bit_depth not in BIT_DEPTHS:
            raise ParameterError(f"unsupported bit depth {self.bit_depth}")
        if not np.all(np.isfinite(codes)):
            raise ParameterError("EncodedImage contains non-finite codes")
        object.__setattr__(self, "codes", codes)

    @property
    def shape(self) -> tuple:
        return self.codes.shape[:2]

    def with_codes(self, codes, quantized: bool = False) -> "EncodedImage":
        return replace(self, codes=codes, quantized=quantized)

    def clipped(self) -> "EncodedImage":
        return replace(self, codes=np.clip(self.codes, 0.0, 1.0))


@dataclass(frozen=True)
class StandardProfile:
    name: str
    transfer: str
    gamut: str
    bit_depth: int


SDR_PROFILE = StandardProfile("sdr", "gamma2p2", "bt709", 8)
HDR_PROFILE = StandardProfile("hdr", "pq", "bt2020", 10)
PROFILES = {"sdr": SDR_PROFILE, "hdr": HDR_PROFILE}


# ---------- PQ ----------

@dataclass(frozen=True)
class PqConstants:
    a1: float = 3424 / 4096
    a2: float = 2413 / 4096 * 32
    a3: float = 2392 / 4096 * 32
    b1: float = 2610 / 16384
    b2: float = 2523 / 4096 * 128


PQ = PqConstants()


def pq_oetf(x) -> np.ndarray:
    """Linear [0, 1] (1.0 = 10000 cd/m^2) to PQ code. Input 0 maps to code 0 exactly."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    xp = np.power(x, PQ.b1)
    code = np.power((PQ.a1 + PQ.a2 * xp) / (1.0 + PQ.a3 * xp), PQ.b2)
    return np.where(x > 0, code, 0.0)


def pq_eotf(e) -> np.ndarray:
    e = np.clip(np.asarray(e, dtype=np.float64), 0.0, 1.0)
    p = np.power(e, 1.0 / PQ.b2)
    num = np.maximum(p - PQ.a1, 0.0)
    return np.power(num / (PQ.a2 - PQ.a3 * p), 1.0 / PQ.b1)


# ---------- gamut ----------

PRIMARIES = {
    "bt709": ((0.640, 0.330), (0.300, 0.600), (0.150, 0.060)),
    "bt2020": ((0.708, 0.292), (0.170, 0.797), (0.131, 0.046)),
}
D65 = (0.3127, 0.3290)


def _xy_to_xyz(x: float, y: float) -> np.ndarray:
    return np.array([x / y, 1.0, (1.0 - x - y) / y])


def rgb_to_xyz_matrix(primaries, white=D65) -> np.ndarray:
    """Normalized primary matrix: columns are the primaries scaled so RGB (1,1,1) lands on white (Y=1)."""
    cols = np.column_stack([_xy_to_xyz(*p) for p in primaries])
    return cols * np.linalg.solve(cols, _xy_to_xyz(*white))


@dataclass(frozen=True, eq=False)
class GamutMatrices:
    M_S: np.ndarray        # XYZ -> bt709
    M_H: np.ndarray        # XYZ -> bt2020
    M_S_inv: np.ndarray    # bt709 -> XYZ
    M_H_inv: np.ndarray    # bt2020 -> XYZ
    bt709_to_bt2020: np.ndarray
    bt2020_to_bt709: np.ndarray

    @classmethod
    def build(cls) -> "GamutMatrices":
        s_inv = rgb_to_xyz_matrix(PRIMARIES["bt709"])
        h_inv = rgb_to_xyz_matrix(PRIMARIES["bt2020"])
        m_s, m_h = np.linalg.inv(s_inv), np.linalg.inv(h_inv)
        return cls(m_s, m_h, s_inv, h_inv, m_h @ s_inv, m_s @ h_inv)

    def to_xyz(self, gamut: str) -> np.ndarray:
        return {"xyz": np.eye(3), "bt709": self.M_S_inv, "bt2020": self.M_H_inv}[gamut]

    def from_xyz(self, gamut: str) -> np.ndarray:
        return {"xyz": np.eye(3), "bt709": self.M_S, "bt2020": self.M_H}[gamut]


GAMUT = GamutMatrices.build()


def gamut_matrix(src: str, dst: str) -> np.ndarray:
    for g in (src, dst):
        if g not in GAMUTS:
            raise ParameterError(f"unknown gamut {g!r}")
    if src == dst:
        return np.eye(3)
    if (src, dst) == ("bt709", "bt2020"):
        return GAMUT.bt709_to_bt2020
    if (src, dst) == ("bt2020", "bt709"):
        return GAMUT.bt2020_to_bt709
    return GAMUT.from_xyz(dst) @ GAMUT.to_xyz(src)


def apply_matrix(pixels: np.ndarray, m: np.ndarray) -> np.ndarray:
    return pixels @ m.T


def gamut_convert(img, src_gamut: str, dst_gamut: str):
    """Per-pixel 3x3 conversion. Negative (out-of-gamut) values are kept."""
    m = gamut_matrix(src_gamut, dst_gamut)
    if isinstance(img, LinearImage):
        if img.gamut != src_gamut:
            raise ParameterError(f"image is tagged {img.gamut}, not {src_gamut}")
        return LinearImage(apply_matrix(img.pixels, m), dst_gamut)
    return apply_matrix(np.asarray(img, dtype=np.float64), m)


def luminance(img: LinearImage) -> np.ndarray:
    return img.pixels @ GAMUT.to_xyz(img.gamut)[1]


# ---------- tone curves ----------

CURVES = ("identity", "linear", "reinhard_extended", "mu_law")


@dataclass(frozen=True)
class ToneCurveParams:
    """
    Global curve T applied to luminance. With x = theta * Y:
      identity           T = Y
      linear             T = x
      reinhard_extended  T = x (1 + x / w^2) / (1 + x), w = white_point
      mu_law             T = log(1 + mu x) / log(1 + mu)
    Chromaticity is kept by scaling each pixel by T / Y.
    """
    curve_kind: str = "identity"
    theta: float = 1.0
    white_point: float = float("inf")
    clip: bool = False
    peak: float = 1.0
    mu: float = 5000.0

    def validate(self) -> None:
        if self.curve_kind not in CURVES:
            raise ParameterError(f"unknown tone curve {self.curve_kind!r}")
        for name in ("theta", "peak", "mu"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ParameterError(f"non-monotone tone curve: {name} must be positive and finite, got {value}")
        if np.isnan(self.white_point) or self.white_point <= 0:
            raise ParameterError(f"non-monotone tone curve: white_point must be positive, got {self.white_point}")

    def curve(self, y: np.ndarray) -> np.ndarray:
        y = np.maximum(y, 0.0)
        if self.curve_kind == "identity":
            return y
        x = self.theta * y
        if self.curve_kind == "linear":
            return x
        if self.curve_kind == "reinhard_extended":
            return x * (1.0 + x / self.white_point ** 2) / (1.0 + x)
        return np.log1p(self.mu * x) / np.log1p(self.mu)

    def inverse(self, t: np.ndarray) -> np.ndarray:
        t = np.maximum(t, 0.0)
        if self.curve_kind == "identity":
            return t
        if self.curve_kind == "linear":
            x = t
        elif self.curve_kind == "reinhard_extended":
            a, b = 1.0 / self.white_point ** 2, 1.0 - t
            x = 2.0 * t / (b + np.sqrt(b * b + 4.0 * a * t))
        else:
            x = np.expm1(t * np.log1p(self.mu)) / self.mu
        return x / self.theta


SDR_TONE = ToneCurveParams("reinhard_extended", theta=1.0 / SDR_WHITE, white_point=4.0, clip=True, peak=1.0)
HDR_TONE = ToneCurveParams("linear", theta=1.0, clip=True, peak=HDR_PEAK)
DEFAULT_TONES = {"sdr": SDR_TONE, "hdr": HDR_TONE}


def geometric_mean_luminance(img: LinearImage, offset: float = STAT_OFFSET) -> float:
    y = np.maximum(luminance(img), 0.0)
    return float(np.exp(np.mean(np.log(y + offset))))


def tone_params_from_statistics(img: LinearImage, standard: str, key: float = 0.18) -> ToneCurveParams:
    """Image-adaptive curve: exposure from the log-average, SDR white at the 99th percentile."""
    if standard == "hdr":
        return HDR_TONE
    if standard != "sdr":
        raise ParameterError(f"unknown standard {standard!r}")
    theta = key / geometric_mean_luminance(img)
    white = max(theta * float(np.percentile(np.maximum(luminance(img), 0.0), 99)), 1e-6)
    return ToneCurveParams("reinhard_extended", theta=theta, white_point=white, clip=True, peak=1.0)


def _luminance_ratio(y: np.ndarray, mapped: np.ndarray) -> np.ndarray:
    ratio = np.zeros_like(y)
    np.divide(mapped, y, out=ratio, where=y > 0)
    return ratio


def tone_map_global(img: LinearImage, params: ToneCurveParams) -> LinearImage:
    params.validate()
    if params.curve_kind == "identity":
        out = img.pixels.copy()
    else:
        y = luminance(img)
        out = img.pixels * _luminance_ratio(y, params.curve(y))[..., None]
    if params.clip:
        out = np.clip(out, 0.0, params.peak)
    return LinearImage(out, img.gamut)


def inverse_tone_map(img: LinearImage, params: ToneCurveParams) -> LinearImage:
    params.validate()
    if params.curve_kind == "identity":
        return LinearImage(img.pixels.copy(), img.gamut)
    t = luminance(img)
    return LinearImage(img.pixels * _luminance_ratio(t, params.inverse(t))[..., None], img.gamut)


# ---------- transfer functions ----------

def oetf(img: LinearImage, transfer: str) -> EncodedImage:
    if img.gamut not in ENCODED_GAMUTS:
        raise ParameterError(f"convert {img.gamut} to an RGB gamut before encoding")
    x = np.clip(img.pixels, 0.0, 1.0)
    if transfer == "gamma2p2":
        codes = np.power(x, 1.0 / GAMMA)
    elif transfer == "pq":
        codes = pq_oetf(x)
    else:
        raise ParameterError(f"unknown transfer {transfer!r}")
    return EncodedImage(codes, transfer, img.gamut, 16, False)


def eotf(img: EncodedImage, transfer: str | None = None) -> LinearImage:
    if transfer is not None and transfer != img.transfer:
        raise ParameterError(f"image is {img.transfer}-encoded, not {transfer}")
    codes = np.clip(img.codes, 0.0, 1.0)
    if img.transfer == "gamma2p2":
        return LinearImage(np.power(codes, GAMMA), img.gamut)
    return LinearImage(pq_eotf(codes), img.gamut)


def quantize_codes(codes, n: int) -> np.ndarray:
    if n not in BIT_DEPTHS:
        raise ParameterError(f"unsupported bit depth {n}")
    levels = float(2 ** n - 1)
    return np.floor(levels * np.asarray(codes, dtype=np.float64) + 0.5) / levels


def quantize(img: EncodedImage, n: int) -> EncodedImage:
    return replace(img, codes=quantize_codes(np.clip(img.codes, 0.0, 1.0), n), bit_depth=n, quantized=True)


# ---------- compositions ----------

def form_content(raw: LinearImage, standard: str, tone: ToneCurveParams | None = None,
                 bit_depth: int | None = None) -> EncodedImage:
    """Tone map, gamut map, OETF, quantize."""
    if standard not in PROFILES:
        raise ParameterError(f"unknown standard {standard!r}")
    profile = PROFILES[standard]
    tone = tone or DEFAULT_TONES[standard]
    mapped = tone_map_global(raw, tone)
    converted = gamut_convert(mapped, mapped.gamut, profile.gamut)
    encoded = oetf(converted, profile.transfer)
    return quantize(encoded, bit_depth or profile.bit_depth)


def invert_content(img: EncodedImage, tone: ToneCurveParams, gamut: str = "xyz") -> LinearImage:
    """EOTF, gamut back to ``gamut``, inverse tone curve. Clipped highlights stay clipped."""
    linear = eotf(img)
    back = gamut_convert(linear, linear.gamut, gamut)
    return inverse_tone_map(back, tone)


def convert_encoded(img: EncodedImage, transfer: str, gamut: str, sdr_white: float = SDR_WHITE) -> EncodedImage:
    """
    Re-encode between standards. Gamma-coded signals are display-relative,
    so their 1.0 is placed at ``sdr_white`` on the absolute scale.
    """
    if img.transfer == transfer and img.gamut == gamut:
        return img
    linear = eotf(img).pixels
    if img.transfer == "gamma2p2":
        linear = linear * sdr_white
    linear = apply_matrix(linear, gamut_matrix(img.gamut, gamut))
    if transfer == "gamma2p2":
        linear = linear / sdr_white
    return oetf(LinearImage(linear, gamut), transfer)


def stage_codes(codes) -> np.ndarray:
    """Hand-off between cascade stages: clamp to [0, 1] and quantize to 16 bits."""
    return quantize_codes(np.clip(codes, 0.0, 1.0), 16)
