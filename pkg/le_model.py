# le_model.py
import logging
import re
from dataclasses import dataclass

import numpy as np

from agcm_model import AgcmParams, TrainLog, condition_batch, fit_adam, predict_batch, split_indices
from colorpipe import EncodedImage, stage_codes
from config import Config
from datagen import PairedDataset
from errors import ParameterError
from metrics import psnr_codes
from tensor_core import (
    ParamSet,
    Tensor,
    add,
    conv2d,
    from_batch,
    kaiming_uniform,
    load_checkpoint,
    mse_loss,
    pixel_shuffle,
    relu,
    to_batch,
)

logger = logging.getLogger(__name__)

# full scale is 64 channels, 16 residual blocks
DESK_CHANNELS = 32
DESK_BLOCKS = 4
SHUFFLE = 2
EVAL_CHUNK = 8


class LeParams(ParamSet):
    """
    head.*            3x3 stride-2 conv, 3 -> C
    block.{k}.conv1/2 residual block k: conv-relu-conv plus identity skip
    up.*              3x3 conv C -> 4C ahead of the pixel shuffle
    tail.0/1.*        3x3 convs C -> C -> 3
    """

    def __init__(self, channels: int, n_blocks: int):
        super().__init__()
        if n_blocks < 1:
            raise ParameterError(f"need at least one residual block, got {n_blocks}")
        self.channels = channels
        self.n_blocks = n_blocks

    def _layers(self):
        c, up = self.channels, self.channels * SHUFFLE * SHUFFLE
        yield "head", c, 3
        for k in range(self.n_blocks):
            yield f"block.{k}.conv1", c, c
            yield f"block.{k}.conv2", c, c
        yield "up", up, c
        yield "tail.0", c, c
        yield "tail.1", 3, c

    @classmethod
    def create(cls, channels: int = DESK_CHANNELS, n_blocks: int = DESK_BLOCKS, seed: int = 0,
               init: str = "kaiming") -> "LeParams":
        params = cls(channels, n_blocks)
        rng = np.random.default_rng(seed)
        for name, out_ch, in_ch in params._layers():
            params.add(f"{name}.weight", kaiming_uniform((out_ch, in_ch, 3, 3), rng))
            params.add(f"{name}.bias", np.zeros(out_ch))
        if init == "identity":
            params._make_identity()
        elif init != "kaiming":
            raise ParameterError(f"unknown LE init {init!r}")
        return params

    def _make_identity(self) -> None:
        """
        Exact identity for non-negative input: the head packs each 2x2 block into
        channels 4c + 2di + dj, residual branches end in zero convs, the shuffle
        unpacks, and the tail passes the first three channels through.
        """
        c = self.channels
        if c < 3 * SHUFFLE * SHUFFLE:
            raise ParameterError(f"identity init needs at least 12 channels, got {c}")
        for name, _, _ in self._layers():
            if name != "head" and not name.endswith("conv1"):
                self[f"{name}.weight"].data[...] = 0
            self[f"{name}.bias"].data[...] = 0
        head, up = self["head.weight"].data, self["up.weight"].data
        head[...] = 0
        for ch in range(3):
            for di in range(SHUFFLE):
                for dj in range(SHUFFLE):
                    packed = ch * 4 + di * 2 + dj
                    head[packed, ch, 1 + di, 1 + dj] = 1
                    up[packed, packed, 1, 1] = 1
        for ch in range(c):
            self["tail.0.weight"].data[ch, ch, 1, 1] = 1
        for ch in range(3):
            self["tail.1.weight"].data[ch, ch, 1, 1] = 1

    @classmethod
    def from_arrays(cls, arrays: dict) -> "LeParams":
        blocks = {int(m.group(1)) for k in arrays if (m := re.fullmatch(r"block\.(\d+)\.conv1\.weight", k))}
        if "head.weight" not in arrays or not blocks:
            raise ParameterError("checkpoint is not a local enhancement model")
        params = cls(arrays["head.weight"].shape[0], len(blocks))
        for name, out_ch, in_ch in params._layers():
            params.add(f"{name}.weight", np.zeros((out_ch, in_ch, 3, 3)))
            params.add(f"{name}.bias", np.zeros(out_ch))
        params.load_state_dict(arrays)
        return params

    @classmethod
    def load(cls, path) -> "LeParams":
        return cls.from_arrays(load_checkpoint(path))


def count_params(params: LeParams) -> int:
    return params.count()


def _conv(params: LeParams, name: str, x: Tensor, stride: int = 1) -> Tensor:
    return conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=stride, padding=1)


def le_tensor(params: LeParams, x: Tensor) -> Tensor:
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ParameterError(f"local enhancement needs even dimensions, got {h}x{w}")
    x = relu(_conv(params, "head", x, stride=2))
    for k in range(params.n_blocks):
        branch = _conv(params, f"block.{k}.conv2", relu(_conv(params, f"block.{k}.conv1", x)))
        x = add(x, branch)
    x = relu(pixel_shuffle(_conv(params, "up", x), SHUFFLE))
    x = relu(_conv(params, "tail.0", x))
    return _conv(params, "tail.1", x)


def le_forward(img: EncodedImage, params: LeParams) -> EncodedImage:
    """Odd sides are reflect-padded by one pixel and cropped back after the network."""
    h, w = img.shape
    codes = img.codes
    if h % 2 or w % 2:
        codes = np.pad(codes, ((0, h % 2), (0, w % 2), (0, 0)), mode="reflect")
    out = from_batch(le_tensor(params, to_batch(codes, params.dtype)))[0, :h, :w]
    return EncodedImage(out, "pq", "bt2020", 16, False)


def predict_le(params: LeParams, x: np.ndarray) -> np.ndarray:
    outs = [
        from_batch(le_tensor(params, to_batch(x[i:i + EVAL_CHUNK], params.dtype)))
        for i in range(0, len(x), EVAL_CHUNK)
    ]
    return np.concatenate(outs)


def agcm_stage(agcm: AgcmParams, sdr: np.ndarray, cond_size: int = Config.COND_SIZE,
               frames: np.ndarray | None = None) -> np.ndarray:
    """Frozen AGCM outputs as the next stage sees them."""
    cond = condition_batch(sdr, cond_size, agcm.n_ccb, frames=frames) if agcm.conditioned else None
    return stage_codes(predict_batch(agcm, sdr, cond))


@dataclass
class LeTrainConfig:
    steps: int = 300
    batch_size: int = 4
    lr: float = 1e-4
    seed: int = 0
    val_fraction: float = 0.1
    val_every: int = 100
    log_every: int = 10
    cond_size: int = Config.COND_SIZE
    channels: int = DESK_CHANNELS
    n_blocks: int = DESK_BLOCKS
    init: str = "identity"

    def validate(self) -> None:
        if self.steps < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ParameterError("steps, batch_size and lr must be positive")


def train_le(dataset: PairedDataset, agcm: AgcmParams, config: LeTrainConfig | None = None,
             init: LeParams | None = None) -> tuple[LeParams, TrainLog]:
    """Adam on mse(le(agcm(sdr)), hdr). The AGCM parameters are only read."""
    config = config or LeTrainConfig()
    config.validate()
    if len(dataset) == 0:
        raise ParameterError("cannot train on an empty dataset")
    params = init or LeParams.create(config.channels, config.n_blocks, config.seed, config.init)
    train_idx, val_idx = split_indices(len(dataset), config.val_fraction, config.seed)
    x_all = to_batch(agcm_stage(agcm, dataset.sdr_codes(), config.cond_size, dataset.frame_conditions())).data
    y_all = to_batch(dataset.hdr_codes()).data
    x_train, y_train = x_all[train_idx], y_all[train_idx]

    def step_fn(chosen, step):
        return mse_loss(le_tensor(params, Tensor(x_train[chosen])), Tensor(y_train[chosen]))

    def validate_fn():
        pred = np.clip(predict_le(params, from_batch(x_all[val_idx])), 0.0, 1.0)
        return float(np.mean([psnr_codes(p, t) for p, t in zip(pred, from_batch(y_all[val_idx]))]))

    logger.info("training local enhancement on %d patches, %d parameters", len(train_idx), params.count())
    log = fit_adam(params, len(train_idx), config, step_fn, validate_fn, "le")
    return params, log
