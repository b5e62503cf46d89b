# highlight.py
import logging
import re
from dataclasses import dataclass

import numpy as np

from agcm_model import AgcmParams, TrainLog, fit_adam, split_indices
from colorpipe import EncodedImage, stage_codes
from config import Config
from datagen import PairedDataset
from errors import ParameterError
from le_model import LeParams, agcm_stage, predict_le
from metrics import psnr_codes
from tensor_core import (
    ParamSet,
    Tensor,
    add,
    conv2d,
    from_batch,
    kaiming_uniform,
    l1_loss,
    load_checkpoint,
    mul,
    pixel_shuffle,
    relu,
    to_batch,
)

logger = logging.getLogger(__name__)

# full scale: 5 stages, widths 64 -> 1024
DESK_DEPTH = 2
DESK_WIDTH = 16
EVAL_CHUNK = 8


def highlight_mask(codes, gamma_mask: float = Config.GAMMA_MASK) -> np.ndarray:
    """Per-channel over-exposure weight max(I - gamma, 0) / (1 - gamma)."""
    if not 0 < gamma_mask < 1:
        raise ParameterError(f"gamma_mask must be in (0, 1), got {gamma_mask}")
    if isinstance(codes, EncodedImage):
        codes = codes.codes
    return np.maximum(np.asarray(codes, dtype=np.float64) - gamma_mask, 0.0) / (1.0 - gamma_mask)


def hg_compose(base: EncodedImage, gen_out: EncodedImage, mask) -> EncodedImage:
    """mask * G(I) + I, elementwise."""
    mask = np.asarray(mask, dtype=np.float64)
    if not (base.codes.shape == gen_out.codes.shape == mask.shape):
        raise ParameterError(f"shape mismatch: base {base.codes.shape}, generator {gen_out.codes.shape}, "
                             f"mask {mask.shape}")
    return base.with_codes(mask * gen_out.codes + base.codes)


class HgParams(ParamSet):
    """Encoder-decoder generator: stride-2 conv stages down, pixel-shuffle stages up, additive skips."""

    def __init__(self, depth: int, width: int):
        super().__init__()
        if depth < 1 or width < 1:
            raise ParameterError(f"generator needs depth and width >= 1, got {depth}, {width}")
        self.depth = depth
        self.width = width

    def stage_width(self, i: int) -> int:
        return self.width * 2 ** i

    def _layers(self):
        for i in range(self.depth):
            yield f"enc.{i}", self.stage_width(i), 3 if i == 0 else self.stage_width(i - 1)
        for i in reversed(range(self.depth)):
            source = self.stage_width(i)
            target = self.stage_width(i - 1) if i else self.width
            yield f"dec.{i}", 4 * target, source
        yield "out", 3, self.width

    @classmethod
    def create(cls, depth: int = DESK_DEPTH, width: int = DESK_WIDTH, seed: int = 0) -> "HgParams":
        params = cls(depth, width)
        rng = np.random.default_rng(seed)
        for name, out_ch, in_ch in params._layers():
            weight = kaiming_uniform((out_ch, in_ch, 3, 3), rng)
            if name == "out":
                weight = np.zeros_like(weight)
            params.add(f"{name}.weight", weight)
            params.add(f"{name}.bias", np.zeros(out_ch))
        return params

    @classmethod
    def from_arrays(cls, arrays: dict) -> "HgParams":
        stages = {int(m.group(1)) for k in arrays if (m := re.fullmatch(r"enc\.(\d+)\.weight", k))}
        if not stages or "out.weight" not in arrays:
            raise ParameterError("checkpoint is not a highlight generator")
        params = cls(len(stages), arrays["enc.0.weight"].shape[0])
        for name, out_ch, in_ch in params._layers():
            params.add(f"{name}.weight", np.zeros((out_ch, in_ch, 3, 3)))
            params.add(f"{name}.bias", np.zeros(out_ch))
        params.load_state_dict(arrays)
        return params

    @classmethod
    def load(cls, path) -> "HgParams":
        return cls.from_arrays(load_checkpoint(path))


def _conv(params: HgParams, name: str, x: Tensor, stride: int = 1) -> Tensor:
    return conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=stride, padding=1)


def generator_tensor(params: HgParams, x: Tensor) -> Tensor:
    h, w = x.shape[2:]
    unit = 2 ** params.depth
    if h % unit or w % unit:
        raise ParameterError(f"generator input {h}x{w} must be a multiple of {unit}")
    skips = []
    for i in range(params.depth):
        x = relu(_conv(params, f"enc.{i}", x, stride=2))
        skips.append(x)
    for i in reversed(range(params.depth)):
        x = relu(pixel_shuffle(_conv(params, f"dec.{i}", x), 2))
        if i:
            x = add(x, skips[i - 1])
    return _conv(params, "out", x)


def highlight_tensor(params: HgParams, x: Tensor, mask: np.ndarray) -> Tensor:
    return add(mul(Tensor(mask, dtype=x.data.dtype), generator_tensor(params, x)), x)


def _pad_to(codes: np.ndarray, unit: int) -> np.ndarray:
    h, w = codes.shape[:2]
    ph, pw = -h % unit, -w % unit
    if ph or pw:
        codes = np.pad(codes, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    return codes


def generate(img: EncodedImage, params: HgParams) -> EncodedImage:
    """Raw generator output G(I); sides are reflect-padded to a multiple of 2**depth and cropped back."""
    h, w = img.shape
    batch = to_batch(_pad_to(img.codes, 2 ** params.depth), params.dtype)
    out = from_batch(generator_tensor(params, batch))[0, :h, :w]
    return EncodedImage(out, "pq", "bt2020", 16, False)


def hg_forward(img: EncodedImage, params: HgParams, gamma_mask: float = Config.GAMMA_MASK) -> EncodedImage:
    return hg_compose(img, generate(img, params), highlight_mask(img, gamma_mask))


def masked_l1(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """Mean absolute error over entries where the mask is active."""
    active = mask > 0
    if not np.any(active):
        return 0.0
    return float(np.mean(np.abs(pred - target)[active]))


def predict_hg(params: HgParams, x: np.ndarray, gamma_mask: float) -> np.ndarray:
    outs = []
    for i in range(0, len(x), EVAL_CHUNK):
        chunk = x[i:i + EVAL_CHUNK]
        mask = to_batch(highlight_mask(chunk, gamma_mask), params.dtype).data
        outs.append(from_batch(highlight_tensor(params, to_batch(chunk, params.dtype), mask)))
    return np.concatenate(outs)


@dataclass
class HgTrainConfig:
    alpha: float = 1.0
    gamma_mask: float = Config.GAMMA_MASK
    steps: int = 300
    batch_size: int = 4
    lr: float = 1e-4
    seed: int = 0
    val_fraction: float = 0.1
    val_every: int = 100
    log_every: int = 10
    cond_size: int = Config.COND_SIZE
    depth: int = DESK_DEPTH
    width: int = DESK_WIDTH

    def validate(self) -> None:
        if self.alpha <= 0:
            raise ParameterError(f"alpha must be positive, got {self.alpha}")
        if not 0 < self.gamma_mask < 1:
            raise ParameterError(f"gamma_mask must be in (0, 1), got {self.gamma_mask}")
        if self.steps < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ParameterError("steps, batch_size and lr must be positive")


def fit_highlight(inputs: np.ndarray, targets: np.ndarray, config: HgTrainConfig | None = None,
                  init: HgParams | None = None) -> tuple[HgParams, TrainLog]:
    """
    alpha * L1 between the composed output and the target, on N x H x W x 3
    stage inputs. Sides must be multiples of 2**depth.
    """
    config = config or HgTrainConfig()
    config.validate()
    if len(inputs) == 0:
        raise ParameterError("cannot train on an empty dataset")
    if inputs.shape != targets.shape:
        raise ParameterError(f"inputs {inputs.shape} and targets {targets.shape} differ")
    params = init or HgParams.create(config.depth, config.width, config.seed)
    train_idx, val_idx = split_indices(len(inputs), config.val_fraction, config.seed)
    x_all, y_all = to_batch(inputs).data, to_batch(targets).data
    masks = to_batch(highlight_mask(inputs, config.gamma_mask)).data
    x_train, y_train, m_train = x_all[train_idx], y_all[train_idx], masks[train_idx]

    def step_fn(chosen, step):
        pred = highlight_tensor(params, Tensor(x_train[chosen]), m_train[chosen])
        return l1_loss(pred, Tensor(y_train[chosen]), config.alpha)

    def validate_fn():
        pred = np.clip(predict_hg(params, inputs[val_idx], config.gamma_mask), 0.0, 1.0)
        return float(np.mean([psnr_codes(p, t) for p, t in zip(pred, targets[val_idx])]))

    logger.info("training highlight generator on %d patches, %d parameters", len(train_idx), params.count())
    log = fit_adam(params, len(train_idx), config, step_fn, validate_fn, "hg")
    return params, log


def upstream_stage(dataset: PairedDataset, agcm: AgcmParams, le: LeParams | None,
                   cond_size: int = Config.COND_SIZE) -> np.ndarray:
    x = agcm_stage(agcm, dataset.sdr_codes(), cond_size, dataset.frame_conditions())
    if le is not None:
        x = stage_codes(predict_le(le, x))
    return x


def train_hg(dataset: PairedDataset, agcm: AgcmParams, le: LeParams | None = None,
             config: HgTrainConfig | None = None) -> tuple[HgParams, TrainLog]:
    """Train on frozen AGCM (and LE, when given) outputs."""
    config = config or HgTrainConfig()
    if len(dataset) == 0:
        raise ParameterError("cannot train on an empty dataset")
    return fit_highlight(upstream_stage(dataset, agcm, le, config.cond_size), dataset.hdr_codes(), config)
