# config.py
import configparser
import contextlib
import hashlib
import json
import logging
import os

from dotenv import load_dotenv
from threadpoolctl import threadpool_limits

from errors import ConfigError

load_dotenv()

VERSION = "0.1.0"

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _env_bool(name: str, default: bool) -> bool:
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return default
    return raw.strip().lower() in _TRUE


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    try:
        return int(raw) if raw and raw.strip() else default
    except ValueError:
        return default


class Config:
    # Worker cap for per-image parallel work (synthesis, metrics, lattice slices)
    THREADS = max(1, _env_int("HDRTV_THREADS", os.cpu_count() or 1))
    SEED = _env_int("HDRTV_SEED", 0)
    LOG_LEVEL = os.getenv("HDRTV_LOG_LEVEL", "INFO").upper()
    DETERMINISTIC = _env_bool("HDRTV_DETERMINISTIC", True)

    # Square side of the down-sampled image fed to the condition network
    COND_SIZE = _env_int("HDRTV_COND_SIZE", 128)

    # Over-exposure threshold of the highlight mask
    GAMMA_MASK = float(os.getenv("HDRTV_GAMMA_MASK", "0.95"))


def blas_thread_limit(deterministic: bool):
    """
    Context that caps every loaded BLAS pool at one thread, so matmul reduction
    order is fixed. Applies at runtime, whether or not numpy is already imported.
    """
    if not deterministic:
        return contextlib.nullcontext()
    return threadpool_limits(limits=1, user_api="blas")


def resolve_threads(flag: int | None = None) -> int:
    """
    Worker count precedence: explicit flag > HDRTV_THREADS > cpu count.
    Zero or None means "not set".
    """
    if flag:
        return max(1, int(flag))
    env = os.getenv("HDRTV_THREADS")
    if env and env.strip():
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"HDRTV_THREADS must be an integer, got {env!r}")
    return max(1, os.cpu_count() or 1)


def configure_logging(level: str | None = None) -> None:
    level = (level or Config.LOG_LEVEL).upper()
    numeric = logging.getLevelName(level)
    if not isinstance(numeric, int):
        raise ConfigError(f"unknown log level {level!r}")
    root = logging.getLogger()
    root.setLevel(numeric)
    # handlers installed by an embedding application are left alone
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)


def read_ini(path) -> dict[str, dict[str, str]]:
    """Parse a flat INI file into {section: {key: raw string}}."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}".replace("\n", " "))
    return {name: dict(parser.items(name)) for name in parser.sections()}


def coerce(raw, default, key: str):
    """Convert a raw config string to the type of its default value."""
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}")
    return text


# ---------- run configuration ----------

# Mirrors the trainer/generator dataclass defaults; the global seed feeds every section.
RUN_DEFAULTS: dict[str, dict] = {
    "global": {"seed": Config.SEED, "threads": 0, "deterministic": Config.DETERMINISTIC,
               "log_level": Config.LOG_LEVEL},
    "datagen": {"count": 8, "size": 64, "jitter_stops": 1.0, "hdr_jitter_stops": 0.0,
                "gradient_weight": 1.0, "texture_weight": 1.0, "max_highlights": 3,
                "tone_source": "fixed", "patch_size": 0, "stride": 0, "hdr_bit_depth": 10},
    "train_agcm": {"steps": 500, "batch_size": 4, "lr": 5e-4, "val_fraction": 0.1, "val_every": 100,
                   "log_every": 10, "cond_size": Config.COND_SIZE, "base_only": False,
                   "shuffle_condition": False, "width": 64, "n_layers": 3, "n_ccb": 4,
                   "identity_init": False},
    "train_le": {"steps": 300, "batch_size": 4, "lr": 1e-4, "val_fraction": 0.1, "val_every": 100,
                 "log_every": 10, "cond_size": Config.COND_SIZE, "channels": 32, "n_blocks": 4,
                 "init": "identity"},
    "train_hg": {"alpha": 1.0, "gamma_mask": Config.GAMMA_MASK, "steps": 300, "batch_size": 4, "lr": 1e-4,
                 "val_fraction": 0.1, "val_every": 100, "log_every": 10, "cond_size": Config.COND_SIZE,
                 "depth": 2, "width": 16},
    "infer": {"chain": "agcm", "cond_size": Config.COND_SIZE, "gamma_mask": Config.GAMMA_MASK},
    "eval": {"metrics": "psnr,ssim,de_itp", "chain": "agcm", "cond_size": Config.COND_SIZE,
             "gamma_mask": Config.GAMMA_MASK},
    "export": {"size": 33, "title": "hdrtv", "cond_size": Config.COND_SIZE},
}

STAGES = ("agcm", "le", "hg")


def parse_chain(text: str, allow_continuation: bool = True) -> tuple[str, ...]:
    """
    '+'-joined stage names in pipeline order. AGCM, when present, comes first;
    a chain starting at le or hg continues from an earlier run's HDR output.
    """
    stages = tuple(s.strip() for s in text.split("+") if s.strip())
    if not stages:
        raise ConfigError("empty chain")
    for stage in stages:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r} in chain {text!r}")
    if len(set(stages)) != len(stages):
        raise ConfigError(f"repeated stage in chain {text!r}")
    order = [STAGES.index(s) for s in stages]
    if order != sorted(order):
        raise ConfigError(f"chain {text!r} is out of order: stages run agcm, le, hg")
    if stages[0] != "agcm" and not allow_continuation:
        raise ConfigError(f"chain {text!r} must start with agcm")
    return stages


class RunConfig:
    """Typed view over an INI file; CLI flags override file values."""

    def __init__(self, values: dict | None = None):
        self.values = {name: dict(section) for name, section in RUN_DEFAULTS.items()}
        for name, section in (values or {}).items():
            self.override(name, **section)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls(read_ini(path))

    def _check(self, section: str, key: str | None = None) -> None:
        if section not in self.values:
            raise ConfigError(f"unknown config section [{section}]")
        if key is not None and key not in self.values[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")

    def override(self, section: str, **flags) -> "RunConfig":
        self._check(section)
        for key, value in flags.items():
            if value is None:
                continue
            self._check(section, key)
            self.values[section][key] = coerce(value, RUN_DEFAULTS[section][key], f"{section}.{key}")
        if section in ("infer", "eval") and "chain" in flags and flags["chain"] is not None:
            parse_chain(self.values[section]["chain"])
        return self

    def get(self, section: str, key: str):
        self._check(section, key)
        return self.values[section][key]

    def section(self, name: str) -> dict:
        self._check(name)
        return dict(self.values[name])

    @property
    def seed(self) -> int:
        return self.values["global"]["seed"]

    def threads(self, flag: int | None = None) -> int:
        return resolve_threads(flag or self.values["global"]["threads"])

    def digest(self) -> str:
        canonical = json.dumps(self.values, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
