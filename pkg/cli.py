# cli.py
import csv
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import click

from agcm_model import AgcmParams, TrainConfig, agcm_forward, train_agcm
from colorpipe import EncodedImage, stage_codes
from config import VERSION, RunConfig, blas_thread_limit, configure_logging, parse_chain
from datagen import PairedDataset, SynthConfig, build_pairs, ingest_pairs
from errors import ConfigError, ImageIOError, ParameterError, TrainingError
from highlight import HgParams, HgTrainConfig, hg_forward, train_hg
from le_model import LeParams, LeTrainConfig, le_forward, train_le
from luttools import apply_lut, export_lut, lut_point_cloud, make_testcard, read_cube, write_cube
from metrics import METRICS, evaluate_pairs
from utils import list_pngs, read_png, write_manifest, write_png

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_TRAINING = 4

PathArg = click.Path(path_type=Path)
ExistingFile = click.Path(exists=True, dir_okay=False, path_type=Path)


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, TrainingError):
        return EXIT_TRAINING
    if isinstance(exc, (ConfigError, ParameterError, click.UsageError)):
        return EXIT_CONFIG
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_FAILURE


def error_line(exc: BaseException, code: int) -> str:
    return f"error code={code} kind={type(exc).__name__} message={json.dumps(str(exc))}"


@dataclass
class Session:
    config: RunConfig
    threads: int

    @property
    def seed(self) -> int:
        return self.config.seed

    def manifest(self, artifact, command: str, extra: dict | None = None) -> None:
        write_manifest(artifact, command, self.config.digest(), self.seed, extra)


pass_session = click.make_pass_decorator(Session)


def _build(cls, section: dict, **extra):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in {**section, **extra}.items() if k in names})


# ---------- cascade wiring ----------

def load_models(stages, agcm_path=None, le_path=None, hg_path=None) -> dict:
    paths = {"agcm": agcm_path, "le": le_path, "hg": hg_path}
    loaders = {"agcm": AgcmParams.load, "le": LeParams.load, "hg": HgParams.load}
    models = {}
    for stage in stages:
        if paths[stage] is None:
            raise ConfigError(f"chain stage {stage} needs a checkpoint (--{stage})")
        models[stage] = loaders[stage](paths[stage])
    return models


def run_chain(img: EncodedImage, stages, models: dict, cond_size: int, gamma_mask: float,
              cond_source: EncodedImage | None = None) -> EncodedImage:
    """
    Apply the cascade. Every stage hands over 16-bit quantized codes, so a chain
    split across runs through 16-bit PNGs gives the same result as one run.
    """
    if stages[0] == "agcm" and img.transfer != "gamma2p2":
        raise ParameterError("a chain starting at agcm needs an SDR (8-bit) input")
    if stages[0] != "agcm" and (img.transfer != "pq" or img.bit_depth != 16):
        raise ParameterError(f"a chain starting at {stages[0]} continues from a 16-bit HDR output, "
                             f"got a {img.bit_depth}-bit {img.transfer} input")
    current = img
    for stage in stages:
        if stage == "agcm":
            out = agcm_forward(current, models["agcm"], cond_size=cond_size, cond_source=cond_source)
        elif stage == "le":
            out = le_forward(current, models["le"])
        else:
            out = hg_forward(current, models["hg"], gamma_mask)
        current = EncodedImage(stage_codes(out.codes), "pq", "bt2020", 16, True)
    return current


def _read_external(path: Path) -> dict[str, float]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return {row[0]: float(row[1]) for row in csv.reader(fh) if row and row[0] not in ("image_id", "mean")}
    except OSError as exc:
        raise ImageIOError(f"cannot read external metric file: {exc.strerror}", path=path) from exc
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"{path}: expected rows of image_id,value ({exc})")


# ---------- commands ----------

@click.group()
@click.option("--config", "config_path", type=ExistingFile, default=None, help="INI run configuration.")
@click.option("--seed", type=int, default=None, help="Global seed for data, init and batching.")
@click.option("--threads", type=int, default=None, help="Worker cap; falls back to HDRTV_THREADS.")
@click.option("--deterministic/--no-deterministic", default=None, help="Fixed reduction orders.")
@click.option("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR.")
@click.version_option(VERSION, prog_name="hdrtv")
@click.pass_context
def cli(ctx, config_path, seed, threads, deterministic, log_level):
    """SDRTV to HDRTV conversion: data, training, inference, evaluation and LUT export."""
    run_config = RunConfig.from_file(config_path) if config_path else RunConfig()
    run_config.override("global", seed=seed, threads=threads, deterministic=deterministic, log_level=log_level)
    configure_logging(run_config.get("global", "log_level"))
    deterministic = run_config.get("global", "deterministic")
    ctx.with_resource(blas_thread_limit(deterministic))
    if not deterministic:
        logger.info("non-deterministic mode: BLAS thread count left to the environment")
    ctx.obj = Session(run_config, run_config.threads())


@cli.command()
@click.option("--out", required=True, type=PathArg, help="Dataset file (.htvd).")
@click.option("--count", type=int)
@click.option("--size", type=int)
@click.option("--jitter-stops", type=float)
@click.option("--hdr-jitter-stops", type=float)
@click.option("--tone-source", type=click.Choice(["fixed", "statistics"]))
@click.option("--patch-size", type=int)
@click.option("--stride", type=int)
@click.option("--hdr-bit-depth", type=int)
@click.option("--png-dir", type=PathArg, default=None, help="Also write every patch as sdr/ and hdr/ PNGs.")
@pass_session
def synth(session: Session, out: Path, png_dir: Path | None, **flags):
    """Synthesize a paired dataset through both formation pipelines."""
    section = session.config.override("datagen", **flags).section("datagen")
    dataset = build_pairs(_build(SynthConfig, section, seed=session.seed), session.threads)
    dataset.save(out)
    if png_dir is not None:
        for i, patch in enumerate(dataset.patches):
            name = f"{i:04d}.png"
            write_png(EncodedImage(patch.sdr / 255.0, "gamma2p2", "bt709", 8, True), png_dir / "sdr" / name)
            write_png(EncodedImage(patch.hdr / 65535.0, "pq", "bt2020", 16, True), png_dir / "hdr" / name)
    session.manifest(out, "synth", {"patches": len(dataset)})


@cli.command()
@click.option("--sdr-dir", required=True, type=PathArg)
@click.option("--hdr-dir", required=True, type=PathArg)
@click.option("--out", required=True, type=PathArg)
@click.option("--patch-size", type=int, default=64, show_default=True)
@click.option("--stride", type=int, default=None, help="Defaults to the patch size.")
@pass_session
def ingest(session: Session, sdr_dir, hdr_dir, out, patch_size, stride):
    """Cut aligned SDR/HDR PNG frame pairs into a dataset."""
    dataset = ingest_pairs(sdr_dir, hdr_dir, patch_size, stride or patch_size, session.seed, session.threads)
    dataset.save(out)
    session.manifest(out, "ingest", {"patches": len(dataset)})


def _train_outputs(session: Session, command: str, params, log, out: Path, log_path: Path | None) -> None:
    params.save(out)
    log.write_csv(log_path or out.with_name(out.name + ".log.csv"))
    session.manifest(out, command, {"parameters": params.count(), "final_val_psnr": log.final_val_psnr})


@cli.command("train-agcm")
@click.option("--data", required=True, type=ExistingFile)
@click.option("--out", required=True, type=PathArg, help="Checkpoint (.htvw).")
@click.option("--log", "log_path", type=PathArg, default=None, help="CSV training log.")
@click.option("--init", "init_path", type=ExistingFile, default=None, help="Start from this checkpoint.")
@click.option("--steps", type=int)
@click.option("--batch-size", type=int)
@click.option("--lr", type=float)
@click.option("--cond-size", type=int)
@click.option("--base-only/--with-condition", default=None)
@click.option("--shuffle-condition/--no-shuffle-condition", default=None)
@click.option("--identity-init/--random-init", default=None)
@pass_session
def train_agcm_cmd(session: Session, data, out, log_path, init_path, **flags):
    """Train the adaptive global color mapping network."""
    section = session.config.override("train_agcm", **flags).section("train_agcm")
    init = AgcmParams.load(init_path) if init_path else None
    params, log = train_agcm(PairedDataset.load(data), _build(TrainConfig, section, seed=session.seed), init)
    _train_outputs(session, "train-agcm", params, log, out, log_path)


@cli.command("train-le")
@click.option("--data", required=True, type=ExistingFile)
@click.option("--agcm", "agcm_path", required=True, type=ExistingFile)
@click.option("--out", required=True, type=PathArg)
@click.option("--log", "log_path", type=PathArg, default=None)
@click.option("--steps", type=int)
@click.option("--batch-size", type=int)
@click.option("--lr", type=float)
@click.option("--channels", type=int)
@click.option("--n-blocks", type=int)
@click.option("--init", type=click.Choice(["identity", "kaiming"]))
@pass_session
def train_le_cmd(session: Session, data, agcm_path, out, log_path, **flags):
    """Train local enhancement on frozen AGCM outputs."""
    section = session.config.override("train_le", **flags).section("train_le")
    params, log = train_le(PairedDataset.load(data), AgcmParams.load(agcm_path),
                           _build(LeTrainConfig, section, seed=session.seed))
    _train_outputs(session, "train-le", params, log, out, log_path)


@cli.command("train-hg")
@click.option("--data", required=True, type=ExistingFile)
@click.option("--agcm", "agcm_path", required=True, type=ExistingFile)
@click.option("--le", "le_path", type=ExistingFile, default=None)
@click.option("--out", required=True, type=PathArg)
@click.option("--log", "log_path", type=PathArg, default=None)
@click.option("--alpha", type=float)
@click.option("--gamma-mask", type=float)
@click.option("--steps", type=int)
@click.option("--batch-size", type=int)
@click.option("--lr", type=float)
@click.option("--depth", type=int)
@click.option("--width", type=int)
@pass_session
def train_hg_cmd(session: Session, data, agcm_path, le_path, out, log_path, **flags):
    """Train the highlight generator (L1 only) on frozen upstream outputs."""
    section = session.config.override("train_hg", **flags).section("train_hg")
    le = LeParams.load(le_path) if le_path else None
    params, log = train_hg(PairedDataset.load(data), AgcmParams.load(agcm_path), le,
                           _build(HgTrainConfig, section, seed=session.seed))
    _train_outputs(session, "train-hg", params, log, out, log_path)


@cli.command()
@click.option("--chain", default=None, help="agcm, agcm+le, agcm+le+hg, agcm+hg, or a continuation le, le+hg, hg.")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", required=True, type=PathArg)
@click.option("--agcm", "--ckpt", "agcm_path", type=ExistingFile, default=None)
@click.option("--le", "le_path", type=ExistingFile, default=None)
@click.option("--hg", "hg_path", type=ExistingFile, default=None)
@click.option("--cond-size", type=int)
@click.option("--gamma-mask", type=float)
@pass_session
def infer(session: Session, in_path: Path, out: Path, agcm_path, le_path, hg_path, **flags):
    """Convert SDR PNGs (a file or a directory) to 16-bit PQ/BT.2020 PNGs."""
    section = session.config.override("infer", **flags).section("infer")
    stages = parse_chain(section["chain"])
    models = load_models(stages, agcm_path, le_path, hg_path)
    if in_path.is_dir():
        jobs = [(src, out / src.name) for src in list_pngs(in_path)]
    else:
        jobs = [(in_path, out)]
    for src, dst in jobs:
        result = run_chain(read_png(src), stages, models, section["cond_size"], section["gamma_mask"])
        write_png(result, dst, bit_depth=16)
    session.manifest(out, "infer", {"chain": "+".join(stages), "images": len(jobs)})


@cli.command("eval")
@click.option("--out", required=True, type=PathArg, help="CSV report.")
@click.option("--pred", "pred_dir", type=PathArg, default=None)
@click.option("--ref", "ref_dir", type=PathArg, default=None)
@click.option("--data", type=ExistingFile, default=None)
@click.option("--agcm", "--ckpt", "agcm_path", type=ExistingFile, default=None)
@click.option("--le", "le_path", type=ExistingFile, default=None)
@click.option("--hg", "hg_path", type=ExistingFile, default=None)
@click.option("--chain", default=None)
@click.option("--metrics", default=None, help="Comma-separated subset of psnr,ssim,de_itp.")
@click.option("--cond-size", type=int)
@click.option("--gamma-mask", type=float)
@click.option("--external", multiple=True, help="COLUMN=CSV of image_id,value rows computed elsewhere.")
@pass_session
def eval_cmd(session: Session, out, pred_dir, ref_dir, data, agcm_path, le_path, hg_path, external, **flags):
    """Score predictions against references, or a model chain on a dataset."""
    section = session.config.override("eval", **flags).section("eval")
    metrics = tuple(m.strip() for m in section["metrics"].split(",") if m.strip())
    for name in metrics:
        if name not in METRICS:
            raise ConfigError(f"unknown metric {name!r}")
    if data is not None:
        stages = parse_chain(section["chain"], allow_continuation=False)
        models = load_models(stages, agcm_path, le_path, hg_path)
        dataset = PairedDataset.load(data)
        sdr, hdr = dataset.sdr_codes(), dataset.hdr_codes()
        frames = dataset.frame_conditions()
        pairs = []
        for i, (s, h) in enumerate(zip(sdr, hdr)):
            cond = None if frames is None else EncodedImage(frames[i], "gamma2p2", "bt709", 8, False)
            result = run_chain(EncodedImage(s, "gamma2p2", "bt709", 8, True), stages, models,
                               section["cond_size"], section["gamma_mask"], cond)
            pairs.append((f"patch-{i:04d}", result, EncodedImage(h, "pq", "bt2020", dataset.hdr_bit_depth, True)))
    elif pred_dir is not None and ref_dir is not None:
        pairs = []
        for pred in list_pngs(pred_dir):
            ref = ref_dir / pred.name
            if not ref.exists():
                raise ImageIOError("no matching reference frame", path=ref)
            pairs.append((pred.stem, read_png(pred), read_png(ref)))
        if not pairs:
            raise ImageIOError("no prediction frames", path=pred_dir)
    else:
        raise click.UsageError("eval needs --pred and --ref, or --data with checkpoints")
    report = evaluate_pairs(pairs, metrics, session.threads)
    for item in external:
        column, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"--external expects COLUMN=CSV, got {item!r}")
        report.merge_external(column, _read_external(Path(path)))
    report.write_csv(out)
    session.manifest(out, "eval", {"images": len(pairs), "means": report.means()})


def _condition_source(cond_image: Path | None) -> EncodedImage:
    return read_png(cond_image) if cond_image else make_testcard()


@cli.command("export-lut")
@click.option("--agcm", "--ckpt", "agcm_path", required=True, type=ExistingFile)
@click.option("--out", required=True, type=PathArg, help="LUT file (.cube).")
@click.option("--size", type=int)
@click.option("--title", default=None)
@click.option("--cond-size", type=int)
@click.option("--cond-image", type=ExistingFile, default=None, help="Condition source; defaults to the test card.")
@pass_session
def export_lut_cmd(session: Session, agcm_path, out, cond_image, **flags):
    """Export the learned per-pixel mapping as a 3-D LUT."""
    section = session.config.override("export", **flags).section("export")
    lut = export_lut(AgcmParams.load(agcm_path), _condition_source(cond_image), section["size"],
                     session.threads, section["cond_size"], section["title"])
    write_cube(lut, out)
    session.manifest(out, "export-lut", {"size": lut.size})


@cli.command("apply-lut")
@click.option("--lut", "lut_path", required=True, type=ExistingFile)
@click.option("--in", "in_path", required=True, type=ExistingFile)
@click.option("--out", required=True, type=PathArg)
@pass_session
def apply_lut_cmd(session: Session, lut_path, in_path, out):
    """Apply a cube LUT to an SDR PNG, writing a 16-bit PNG."""
    result = apply_lut(read_cube(lut_path), read_png(in_path))
    write_png(EncodedImage(stage_codes(result.codes), "pq", "bt2020", 16, True), out, bit_depth=16)
    session.manifest(out, "apply-lut")


@cli.command()
@click.option("--agcm", "--ckpt", "agcm_path", required=True, type=ExistingFile)
@click.option("--out", required=True, type=PathArg, help="Point cloud (.ply).")
@click.option("--size", type=int, default=17, show_default=True)
@click.option("--cond-size", type=int)
@click.option("--cond-image", type=ExistingFile, default=None)
@pass_session
def lutcloud(session: Session, agcm_path, out, size, cond_image, **flags):
    """Write the LUT lattice as a point cloud: position = HDR output, color = SDR input."""
    section = session.config.override("export", **flags).section("export")
    lut_point_cloud(AgcmParams.load(agcm_path), _condition_source(cond_image), size, out,
                    session.threads, section["cond_size"])
    session.manifest(out, "lutcloud", {"size": size})


@cli.command()
@click.option("--out", required=True, type=PathArg)
@click.option("--width", type=int, default=448, show_default=True)
@click.option("--height", type=int, default=256, show_default=True)
@pass_session
def testcard(session: Session, out, width, height):
    """Write the color-transition test card as an 8-bit PNG."""
    write_png(make_testcard(width, height), out)
    session.manifest(out, "testcard", {"width": width, "height": height})


# ---------- entry points ----------

def run_argv(argv) -> int:
    """Run the CLI without exiting. Failures print one parseable line on stderr."""
    try:
        rv = cli.main(args=list(argv), prog_name="hdrtv", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("error code=1 kind=Abort message=\"aborted\"", err=True)
        return EXIT_FAILURE
    except Exception as exc:
        code = exit_code_for(exc)
        click.echo(error_line(exc, code), err=True)
        logger.debug("command failed", exc_info=True)
        return code
    return rv if isinstance(rv, int) else EXIT_OK


def run(command: str, args=(), config=None) -> int:
    argv = (["--config", str(config)] if config else []) + [command, *map(str, args)]
    return run_argv(argv)


def main() -> None:
    sys.exit(run_argv(sys.argv[1:]))


if __name__ == "__main__":
    main()
