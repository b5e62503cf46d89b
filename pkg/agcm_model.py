# agcm_model.py
# Adaptive global color mapping.
#
# The base network is a stack of 1x1 convolutions, so it maps every pixel
# independently. A condition network (CCB stack, dropout, 1x1 conv, global
# average pool) turns a downsampled copy of the input into a vector V, and one
# pair of fully-connected projections per base layer turns V into a
# channel-wise scale and shift (GFM) applied after that layer's convolution.
import csv
import io
import logging
import re
from dataclasses import dataclass, field

import numpy as np

from colorpipe import EncodedImage
from config import Config
from datagen import PairedDataset, box_downsample
from errors import ComputationError, ParameterError, TrainingError
from metrics import psnr_codes
from tensor_core import (
    DROPOUT_P,
    Adam,
    Graph,
    ParamSet,
    Tensor,
    affine_modulate,
    avg_pool,
    backward,
    conv2d,
    feature_dropout,
    from_batch,
    fully_connected,
    global_avg_pool,
    instance_norm,
    kaiming_uniform,
    leaky_relu,
    load_checkpoint,
    mse_loss,
    relu,
    reshape,
    to_batch,
)
from utils import atomic_write_text

logger = logging.getLogger(__name__)

BASE_WIDTH = 64
BASE_LAYERS = 3
N_CCB = 4
COND_CHANNELS = 64
COND_DIM = 32
EVAL_CHUNK = 16


@dataclass(frozen=True)
class ConditionVector:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ParameterError("condition vector must be a finite 1-D array")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.size


class AgcmParams(ParamSet):
    """
    Parameter names:
      base.{i}.weight / bias             1x1 conv of base layer i
      cond.ccb.{j}.weight / bias         1x1 conv of CCB j
      cond.out.weight / bias             final 1x1 conv (-> C_v)
      gfm.{i}.scale|shift.weight / bias  V -> per-channel scale / shift of base layer i
    """

    def __init__(self, widths: list[int], n_ccb: int = 0, cond_channels: int = COND_CHANNELS,
                 cond_dim: int = COND_DIM):
        super().__init__()
        if len(widths) < 3:
            raise ParameterError(f"base network needs at least 2 layers, got widths {widths}")
        if widths[0] != 3 or widths[-1] != 3:
            raise ParameterError(f"base network maps RGB to RGB, got widths {widths}")
        self.widths = list(widths)
        self.n_ccb = n_ccb
        self.cond_channels = cond_channels
        self.cond_dim = cond_dim

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def conditioned(self) -> bool:
        return self.n_ccb > 0

    @classmethod
    def create(cls, width: int = BASE_WIDTH, n_layers: int = BASE_LAYERS, n_ccb: int = N_CCB,
               cond_channels: int = COND_CHANNELS, cond_dim: int = COND_DIM, seed: int = 0) -> "AgcmParams":
        rng = np.random.default_rng(seed)
        widths = [3] + [width] * (n_layers - 1) + [3]
        params = cls(widths, n_ccb, cond_channels, cond_dim)
        for i in range(params.n_layers):
            params.add(f"base.{i}.weight", kaiming_uniform((widths[i + 1], widths[i], 1, 1), rng))
            params.add(f"base.{i}.bias", np.zeros(widths[i + 1]))
        params._add_condition(rng)
        return params

    @classmethod
    def identity(cls, width: int = BASE_WIDTH, n_layers: int = BASE_LAYERS, n_ccb: int = N_CCB,
                 seed: int = 0) -> "AgcmParams":
        """Base layers embed RGB into the first three channels, pass them through, and project back."""
        params = cls.create(width, n_layers, n_ccb, seed=seed)
        for i in range(params.n_layers):
            out_ch, in_ch = params.widths[i + 1], params.widths[i]
            params[f"base.{i}.weight"].data[...] = np.eye(out_ch, in_ch)[:, :, None, None]
            params[f"base.{i}.bias"].data[...] = 0
        return params

    def _add_condition(self, rng: np.random.Generator) -> None:
        if not self.conditioned:
            return
        c = self.cond_channels
        for j in range(self.n_ccb):
            in_ch = 3 if j == 0 else c
            self.add(f"cond.ccb.{j}.weight", kaiming_uniform((c, in_ch, 1, 1), rng))
            self.add(f"cond.ccb.{j}.bias", np.zeros(c))
        self.add("cond.out.weight", kaiming_uniform((self.cond_dim, c, 1, 1), rng))
        self.add("cond.out.bias", np.zeros(self.cond_dim))
        # modulation starts as scale 1, shift 0
        for i in range(self.n_layers):
            out_ch = self.widths[i + 1]
            self.add(f"gfm.{i}.scale.weight", np.zeros((out_ch, self.cond_dim)))
            self.add(f"gfm.{i}.scale.bias", np.ones(out_ch))
            self.add(f"gfm.{i}.shift.weight", np.zeros((out_ch, self.cond_dim)))
            self.add(f"gfm.{i}.shift.bias", np.zeros(out_ch))

    @classmethod
    def from_arrays(cls, arrays: dict) -> "AgcmParams":
        """Rebuild the architecture from checkpoint array names and shapes."""
        layers = sorted(int(m.group(1)) for k in arrays if (m := re.fullmatch(r"base\.(\d+)\.weight", k)))
        if not layers or layers != list(range(len(layers))):
            raise ParameterError("checkpoint holds no contiguous base layers")
        widths = [arrays["base.0.weight"].shape[1]] + [arrays[f"base.{i}.weight"].shape[0] for i in layers]
        n_ccb = sum(1 for k in arrays if re.fullmatch(r"cond\.ccb\.\d+\.weight", k))
        cond_channels, cond_dim = COND_CHANNELS, COND_DIM
        if n_ccb:
            cond_channels = arrays["cond.ccb.0.weight"].shape[0]
            cond_dim = arrays["cond.out.weight"].shape[0]
        params = cls(widths, n_ccb, cond_channels, cond_dim)
        for i in range(params.n_layers):
            params.add(f"base.{i}.weight", np.zeros((widths[i + 1], widths[i], 1, 1)))
            params.add(f"base.{i}.bias", np.zeros(widths[i + 1]))
        params._add_condition(np.random.default_rng(0))
        params.load_state_dict(arrays)
        return params

    @classmethod
    def load(cls, path) -> "AgcmParams":
        return cls.from_arrays(load_checkpoint(path))


def count_params(params: ParamSet) -> int:
    return params.count()


def condition_size(side: int, cond_size: int, n_ccb: int) -> int:
    """Largest usable condition side: at most cond_size and side, a multiple of 2**n_ccb."""
    unit = 2 ** n_ccb
    size = min(cond_size, side) // unit * unit
    if n_ccb and size < 2 * unit:
        raise ParameterError(f"image side {side} too small for {n_ccb} pooling stages (need {2 * unit})")
    return size


# ---------- tensor-level network ----------

def condition_tensor(params: AgcmParams, x: Tensor, training: bool = False, seed=None) -> Tensor:
    b, _, h, w = x.shape
    unit = 2 ** params.n_ccb
    if h % unit or w % unit or min(h, w) < 2 * unit:
        raise ParameterError(f"condition input {h}x{w} must be a multiple of {unit} and at least {2 * unit}")
    for j in range(params.n_ccb):
        x = conv2d(x, params[f"cond.ccb.{j}.weight"], params[f"cond.ccb.{j}.bias"])
        x = avg_pool(x, 2, 2)
        x = leaky_relu(x)
        # a normalized last block has zero spatial mean, which would pin V to cond.out.bias
        if j < params.n_ccb - 1:
            x = instance_norm(x)
    x = feature_dropout(x, DROPOUT_P, training, seed)
    x = conv2d(x, params["cond.out.weight"], params["cond.out.bias"])
    return reshape(global_avg_pool(x), (b, params.cond_dim))


def modulation(params: AgcmParams, v: Tensor) -> list[tuple[Tensor, Tensor]]:
    return [
        (fully_connected(v, params[f"gfm.{i}.scale.weight"], params[f"gfm.{i}.scale.bias"]),
         fully_connected(v, params[f"gfm.{i}.shift.weight"], params[f"gfm.{i}.shift.bias"]))
        for i in range(params.n_layers)
    ]


def base_tensor(params: AgcmParams, x: Tensor, mods=None) -> Tensor:
    last = params.n_layers - 1
    for i in range(params.n_layers):
        x = conv2d(x, params[f"base.{i}.weight"], params[f"base.{i}.bias"])
        if mods is not None:
            x = affine_modulate(x, *mods[i])
        if i < last:
            x = relu(x)
    return x


def agcm_tensor(params: AgcmParams, x: Tensor, cond: Tensor | None = None, training: bool = False,
                seed=None, v: Tensor | None = None) -> Tensor:
    if not params.conditioned:
        return base_tensor(params, x)
    if v is None:
        v = condition_tensor(params, cond, training, seed)
    return base_tensor(params, x, modulation(params, v))


# ---------- image-level API ----------

def _hdr_image(out: Tensor) -> EncodedImage:
    return EncodedImage(from_batch(out)[0], "pq", "bt2020", 16, False)


def condition_input(img: EncodedImage, cond_size: int = Config.COND_SIZE, n_ccb: int = N_CCB) -> EncodedImage:
    side = condition_size(min(img.shape), cond_size, n_ccb)
    return img.with_codes(box_downsample(img.codes, side))


def base_forward(img: EncodedImage, params: AgcmParams) -> EncodedImage:
    return _hdr_image(base_tensor(params, to_batch(img.codes, params.dtype)))


def condition_forward(img_ds: EncodedImage, params: AgcmParams, training: bool = False, seed=None) -> ConditionVector:
    if not params.conditioned:
        raise ParameterError("model has no condition network")
    v = condition_tensor(params, to_batch(img_ds.codes, params.dtype), training, seed)
    return ConditionVector(v.data[0].astype(np.float64))


def apply_condition(img: EncodedImage, params: AgcmParams, condition: ConditionVector | None) -> EncodedImage:
    """The per-pixel map for a fixed condition vector."""
    x = to_batch(img.codes, params.dtype)
    if not params.conditioned:
        return _hdr_image(base_tensor(params, x))
    if len(condition) != params.cond_dim:
        raise ParameterError(f"condition vector has {len(condition)} values, model expects {params.cond_dim}")
    v = Tensor(condition.values[None], dtype=x.data.dtype)
    return _hdr_image(base_tensor(params, x, modulation(params, v)))


def agcm_forward(img: EncodedImage, params: AgcmParams, training: bool = False, seed=None,
                 cond_size: int = Config.COND_SIZE, cond_source: EncodedImage | None = None) -> EncodedImage:
    """cond_source, when given, replaces img as the condition input (a patch's whole frame)."""
    if not params.conditioned:
        return base_forward(img, params)
    source = img if cond_source is None else cond_source
    v = condition_forward(condition_input(source, cond_size, params.n_ccb), params, training, seed)
    return apply_condition(img, params, v)


# ---------- training ----------

@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 4
    lr: float = 5e-4
    seed: int = 0
    val_fraction: float = 0.1
    val_every: int = 100
    log_every: int = 10
    cond_size: int = Config.COND_SIZE
    base_only: bool = False
    shuffle_condition: bool = False
    width: int = BASE_WIDTH
    n_layers: int = BASE_LAYERS
    n_ccb: int = N_CCB
    identity_init: bool = False

    def validate(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise ParameterError("steps and batch_size must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ParameterError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.lr <= 0:
            raise ParameterError(f"learning rate must be positive, got {self.lr}")


@dataclass
class TrainLog:
    rows: list[tuple] = field(default_factory=list)

    def add(self, step: int, loss: float, val_psnr: float | None = None) -> None:
        self.rows.append((step, loss, val_psnr))

    @property
    def final_val_psnr(self) -> float | None:
        scored = [r[2] for r in self.rows if r[2] is not None]
        return scored[-1] if scored else None

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "loss", "val_psnr"])
        for step, loss, val in self.rows:
            writer.writerow([step, f"{loss:.8g}", "" if val is None else f"{val:.4f}"])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        atomic_write_text(path, self.to_csv())


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded train/validation split. A single patch serves as both."""
    if n == 0:
        raise ParameterError("empty dataset")
    order = np.random.default_rng([seed, 7]).permutation(n)
    n_val = int(round(n * val_fraction))
    if n == 1 or n_val == 0:
        return order, order[:1]
    n_val = min(n_val, n - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def condition_batch(sdr: np.ndarray, cond_size: int, n_ccb: int, shuffle_seed=None,
                    frames: np.ndarray | None = None) -> np.ndarray:
    """
    Downsampled condition inputs, one per patch. Each patch is conditioned on its
    source frame thumbnail when frames are given, else on the patch itself.
    Optionally the downsampled pixels are randomly permuted.
    """
    source = sdr if frames is None else frames
    if len(source) != len(sdr):
        raise ParameterError(f"{len(frames)} frame thumbnails for {len(sdr)} patches")
    side = condition_size(min(source.shape[1:3]), cond_size, n_ccb)
    out = np.stack([box_downsample(img, side) for img in source])
    if shuffle_seed is not None:
        rng = np.random.default_rng(shuffle_seed)
        flat = out.reshape(out.shape[0], -1, 3)
        out = np.stack([f[rng.permutation(f.shape[0])] for f in flat]).reshape(out.shape)
    return out


def predict_batch(params: AgcmParams, sdr: np.ndarray, cond: np.ndarray | None) -> np.ndarray:
    """Inference over N x H x W x 3 patches, chunked."""
    outs = []
    for start in range(0, len(sdr), EVAL_CHUNK):
        x = to_batch(sdr[start:start + EVAL_CHUNK], params.dtype)
        c = to_batch(cond[start:start + EVAL_CHUNK], params.dtype) if params.conditioned else None
        outs.append(from_batch(agcm_tensor(params, x, c)))
    return np.concatenate(outs)


def evaluate(params: AgcmParams, dataset: PairedDataset, indices=None, cond_size: int = Config.COND_SIZE) -> float:
    """Mean PSNR of clamped predictions against HDR targets."""
    sdr, hdr = dataset.sdr_codes(indices), dataset.hdr_codes(indices)
    cond = None
    if params.conditioned:
        cond = condition_batch(sdr, cond_size, params.n_ccb, frames=dataset.frame_conditions(indices))
    pred = np.clip(predict_batch(params, sdr, cond), 0.0, 1.0)
    return float(np.mean([psnr_codes(p, t) for p, t in zip(pred, hdr)]))


def fit_adam(params: ParamSet, n_train: int, config, step_fn, validate_fn, label: str) -> TrainLog:
    """
    Shared Adam loop. step_fn(batch_indices, step) returns the scalar loss tensor
    inside the active graph; validate_fn() returns a PSNR.
    """
    opt = Adam(params.parameters(), lr=config.lr)
    rng = np.random.default_rng([config.seed, 2])
    log = TrainLog()
    batch = min(config.batch_size, n_train)
    for step in range(1, config.steps + 1):
        chosen = np.sort(rng.choice(n_train, size=batch, replace=False))
        opt.zero_grad()
        try:
            with Graph() as graph:
                loss = step_fn(chosen, step)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"{label} loss is {value}", step)
            backward(graph, loss)
            opt.step()
        except ComputationError as exc:
            raise TrainingError(f"{label} diverged: {exc}", step) from exc
        if any(not np.all(np.isfinite(p.data)) for p in params.parameters()):
            raise TrainingError(f"{label} parameters became non-finite", step)
        val = validate_fn() if step % config.val_every == 0 or step == config.steps else None
        if val is not None or step % config.log_every == 0:
            log.add(step, value, val)
        if step % config.log_every == 0 or val is not None:
            logger.info("%s step %d loss %.6g%s", label, step, value, "" if val is None else f" val_psnr {val:.3f}")
    return log


def train_agcm(dataset: PairedDataset, config: TrainConfig | None = None,
               init: AgcmParams | None = None) -> tuple[AgcmParams, TrainLog]:
    """Adam on mse(agcm(sdr), hdr). Deterministic for a given seed."""
    config = config or TrainConfig()
    config.validate()
    if len(dataset) == 0:
        raise ParameterError("cannot train on an empty dataset")
    n_ccb = 0 if config.base_only else config.n_ccb
    if init is not None:
        params = init
    elif config.identity_init:
        params = AgcmParams.identity(config.width, config.n_layers, n_ccb, seed=config.seed)
    else:
        params = AgcmParams.create(config.width, config.n_layers, n_ccb, seed=config.seed)
    train_idx, val_idx = split_indices(len(dataset), config.val_fraction, config.seed)
    sdr, hdr = dataset.sdr_codes(train_idx), dataset.hdr_codes(train_idx)
    cond = None
    if params.conditioned:
        shuffle = [config.seed, 3] if config.shuffle_condition else None
        cond = condition_batch(sdr, config.cond_size, params.n_ccb, shuffle, dataset.frame_conditions(train_idx))
    x_all, y_all = to_batch(sdr).data, to_batch(hdr).data
    c_all = to_batch(cond).data if cond is not None else None

    def step_fn(chosen, step):
        c = Tensor(c_all[chosen]) if c_all is not None else None
        pred = agcm_tensor(params, Tensor(x_all[chosen]), c, training=True, seed=[config.seed, step])
        return mse_loss(pred, Tensor(y_all[chosen]))

    logger.info("training %s on %d patches (%d held out), %d parameters",
                "AGCM" if params.conditioned else "base network", len(train_idx), len(val_idx), params.count())
    log = fit_adam(params, len(train_idx), config, step_fn,
               lambda: evaluate(params, dataset, val_idx, config.cond_size), "agcm")
    return params, log
