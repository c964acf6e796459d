"""``partdiff`` command line: one subcommand per pipeline stage.

Artifacts live under ``--out`` (default ``$PARTDIFF_HOME``):

    corpus/     gen-corpus        shape_XXXXX.tsdf, labels.tsv
    codec/      train-vq          codec.ckpt, codebook.cdbk, codec.json
    tokens/     tokenize          map_XXXXX.tokm
    model/      train-diffusion   denoiser.ckpt, denoiser.json, loss.tsv
    samples/    sample            sample_XXXXX.tsdf
    manifests/  every command     <command>.json
"""
import argparse
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from appdirs import AppDirs

from ._typings import SlotsT
from .condition_pipeline import FractionBox, ShapeSampler
from .config import PRESETS, RunConfig
from .denoiser import Denoiser, load_denoiser
from .discrete_diffusion import DiffusionSchedule, schedule_from_config
from .errors import ConfigError, DataError, MissingArtifactError, PartDiffError
from .formats import (
    ArtifactLayout,
    read_codec,
    read_corpus,
    read_tokens,
    read_tsdf,
    write_codec,
    write_corpus,
    write_manifest,
    write_tokens,
    write_tsdf,
)
from .helper import Helper
from .metrics import MetricReport, dct_psd, evaluate_generation, write_reports
from .patch_codec import CodecTrainer, PatchCodec, PatchSpec, TokenMap, codebook_usage, reconstruction_error
from .shape_corpus import NOISE_KINDS, TsdfGrid, add_noise, make_corpus
from .trainer import DenoiserTrainer

__all__ = ["COMMANDS", "PARTDIFF_HOME", "build_parser", "main"]

logger = logging.getLogger(__name__)

PARTDIFF_HOME: str = os.getenv("PARTDIFF_HOME", AppDirs("partdiff").user_data_dir)
LOG_LEVEL: str = os.getenv("PARTDIFF_LOG_LEVEL", "WARNING")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class _Parser(argparse.ArgumentParser):
    """Usage errors raise ConfigError so they share the exit code of bad config"""

    def error(self, message: str) -> Any:  # type: ignore
        raise ConfigError(f"{self.prog}: {message}")


class Run:
    """Everything a command needs: parsed flags, config, layout and the start time"""

    __slots__: SlotsT = ["__weakref__", "args", "config", "layout", "started", "outputs", "extra"]

    def __init__(self, args: argparse.Namespace) -> None:
        self.args: argparse.Namespace = args
        self.config: RunConfig = RunConfig.load(args.config, args.seed, args.threads, args.preset)
        self.layout: ArtifactLayout = ArtifactLayout(args.out)
        self.started: float = time.time()
        self.outputs: List[Path] = []
        self.extra: Dict[str, Any] = {}

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def progress(self) -> bool:
        return not self.args.quiet

    def finish(self, command: str) -> None:
        write_manifest(
            self.layout.manifest(command),
            command,
            self.config.hash(),
            self.seed,
            self.started,
            self.outputs,
            self.extra,
        )

    def codec(self) -> PatchCodec:
        return read_codec(self.layout.require("codec"))

    def schedule(self) -> DiffusionSchedule:
        return schedule_from_config(self.config.schedule, self.config.codec.codebook_size)

    def model_dir(self) -> Path:
        path = self.layout.output(self.args.model)
        if not (path / "denoiser.ckpt").exists():
            raise MissingArtifactError.For(path / "denoiser.ckpt", "train-diffusion")
        return path

    def sampler(self) -> ShapeSampler:
        denoiser = load_denoiser(self.model_dir())
        codec = self.codec()
        return ShapeSampler(denoiser, self.schedule(), codec, self.config.sampling.guidance)

    def token_maps(self) -> List[TokenMap]:
        root = self.layout.require("tokens")
        edge = self.config.geometry.patch_edge
        maps = []
        for path in sorted(root.glob("map_*.tokm")):
            tokens, k = read_tokens(path, edge)
            if k != self.config.codec.codebook_size:
                raise DataError(f"{path} was written for K={k}, config has K={self.config.codec.codebook_size}")
            maps.append(tokens)
        return maps

    def grid(self, path: Optional[str]) -> Tuple[TsdfGrid, Optional[int]]:
        """The grid at path, or the first corpus shape with its label"""
        if path:
            return read_tsdf(path), None
        grid, label = read_corpus(self.layout.require("corpus"))[0]
        return grid, label


def _write_grids(run: Run, directory: Path, stem: str, grids: Sequence[TsdfGrid]) -> None:
    for i, grid in enumerate(grids):
        run.outputs.append(write_tsdf(directory / f"{stem}_{i:05d}.tsdf", grid))


def cmd_gen_corpus(run: Run) -> None:
    geometry = run.config.geometry
    corpus = make_corpus(
        run.args.count,
        run.args.classes,
        geometry.dims,
        Helper.derive_seed(run.seed, "gen-corpus"),
        geometry.truncation,
        run.config.threads,
        run.progress,
    )
    run.outputs.append(write_corpus(run.layout.corpus, corpus))
    run.extra.update(count=run.args.count, classes=run.args.classes)


def cmd_train_vq(run: Run) -> None:
    grids = [g for g, _ in read_corpus(run.layout.require("corpus"))]
    geometry = run.config.geometry
    trainer = CodecTrainer(
        run.config.codec,
        PatchSpec(geometry.dims, geometry.patch_edge),
        geometry.truncation,
        Helper.derive_seed(run.seed, "train-vq"),
    )
    codec = trainer.train(grids, run.progress)
    write_codec(run.layout.codec, codec)
    error = reconstruction_error(grids, codec)
    logger.info("codec reconstruction error %.5f (%.5f in truncation units)", error, error / geometry.truncation)
    run.outputs.append(run.layout.codec)
    run.extra.update(reconstruction_error=error, history=trainer.history[-1:] if trainer.history else [])
    print(f"reconstruction_error\t{error!r}")


def cmd_tokenize(run: Run) -> None:
    codec = run.codec()
    corpus = read_corpus(run.layout.require("corpus"))
    for i, (grid, label) in enumerate(Helper.progress(corpus, "tokenize", disable=not run.progress)):
        path = run.layout.tokens / f"map_{i:05d}.tokm"
        write_tokens(path, codec.tokenize(grid, label), codec.codebook.size)
        run.outputs.append(path)
    usage = codebook_usage([read_tokens(p, codec.patch_spec.edge)[0] for p in run.outputs], codec.codebook.size)
    run.extra.update(utilization=usage["utilization"], perplexity=usage["perplexity"])


def cmd_train_diffusion(run: Run) -> None:
    maps = run.token_maps()
    if not maps:
        raise MissingArtifactError.For(run.layout.tokens, "tokenize")
    denoiser = Denoiser(run.config.denoiser, Helper.derive_seed(run.seed, "denoiser-init"))
    trainer = DenoiserTrainer(
        denoiser, run.schedule(), run.config.training, Helper.derive_seed(run.seed, "train-diffusion")
    )
    trainer.train(maps, progress=run.progress)
    run.outputs.append(trainer.save(run.layout.output(run.args.model)))
    summary = trainer.summary()
    run.extra.update(summary)
    print("\t".join(f"{k}={v}" for k, v in summary.items()))


def cmd_sample(run: Run) -> None:
    sampler = run.sampler()
    count = run.args.count or run.config.sampling.samples
    grids = [
        sampler.sample_unconditional(run.args.label, Helper.derive_seed(run.seed, "sample", i))
        for i in Helper.progress(range(count), "sample", total=count, disable=not run.progress)
    ]
    _write_grids(run, run.layout.samples, "sample", grids)


def cmd_complete(run: Run) -> None:
    sampler = run.sampler()
    grid, label = run.grid(run.args.input)
    region = FractionBox.parse(run.args.region or run.config.sampling.region)
    start = run.args.start if run.args.start is not None else run.config.sampling.complete_start
    count = run.args.count or run.config.sampling.samples
    label = run.args.label if run.args.label is not None else label
    grids = sampler.complete(grid, region, count, start, label, Helper.derive_seed(run.seed, "complete"))
    _write_grids(run, run.layout.output("completions"), "complete", grids)
    run.extra.update(region=str(region), start_fraction=start)


def cmd_denoise(run: Run) -> None:
    sampler = run.sampler()
    grid, label = run.grid(run.args.input)
    sampling = run.config.sampling
    level = run.args.noise_level if run.args.noise_level is not None else sampling.noise_level
    kind = run.args.noise_kind or sampling.noise_kind
    noisy = add_noise(grid, level, kind, Helper.derive_seed(run.seed, "noise")) if level > 0 else grid
    start = run.args.start if run.args.start is not None else sampling.denoise_start
    clean = sampler.denoise(noisy, start, label, Helper.derive_seed(run.seed, "denoise"))
    target = run.layout.output("denoised")
    run.outputs.append(write_tsdf(target / "noisy.tsdf", noisy))
    run.outputs.append(write_tsdf(target / "denoised.tsdf", clean))
    run.extra.update(noise_kind=kind, noise_level=level, start_fraction=start)


def cmd_edit(run: Run) -> None:
    sampler = run.sampler()
    source = run.args.input or os.fspath(run.layout.require("tokens") / "map_00000.tokm")
    tokens, _ = read_tokens(source, run.config.geometry.patch_edge)
    labels = [int(v) for v in run.args.labels.split(",") if v.strip()]
    if not labels:
        raise ConfigError("--labels needs at least one target label")
    start = run.args.start if run.args.start is not None else run.config.sampling.edit_start
    grids = sampler.edit_sequence(tokens, labels, start, Helper.derive_seed(run.seed, "edit"))
    _write_grids(run, run.layout.output("edits"), "edit", grids)
    run.extra.update(labels=labels, start_fraction=start)


def _read_grids(directory: Path) -> List[TsdfGrid]:
    return [read_tsdf(p) for p in sorted(directory.glob("*.tsdf"))]


def cmd_eval(run: Run) -> None:
    generated_dir = Path(run.args.generated) if run.args.generated else run.layout.require("samples")
    generated = _read_grids(generated_dir)
    reference = [g for g, _ in read_corpus(run.layout.require("corpus"))]
    if run.args.limit:
        reference = reference[: run.args.limit]
    cfg = run.config.eval
    kinds = ("CD", "EMD") if cfg.distance.upper() == "BOTH" else (cfg.distance.upper(),)
    reports = evaluate_generation(
        generated,
        reference,
        cfg.points,
        Helper.derive_seed(run.seed, "eval"),
        cfg.normalization,
        kinds,
        run.config.threads,
    )
    tsv, table = write_reports(run.layout.output("reports") / "eval.tsv", reports)
    run.outputs.extend([tsv, table])
    for report in reports:
        print(report.line())


def cmd_spectrum(run: Run) -> None:
    source = Path(run.args.input) if run.args.input else run.layout.require("samples")
    paths = sorted(source.glob("*.tsdf")) if source.is_dir() else [source]
    reports = []
    top = []
    for path in paths:
        psd = dct_psd(read_tsdf(path))
        top.append(float(psd.mean_power[-1]))
        reports.append(
            MetricReport(
                "top-band-power", psd.mean_power[-1], (1,), "DCT", dict(file=path.name, parseval=f"{psd.parseval_error():.2e}")
            )
        )
    reports.append(MetricReport("mean-top-band-power", float(np.mean(top)) if top else 0.0, (len(top),), "DCT"))
    tsv, table = write_reports(run.layout.output("reports") / "spectrum.tsv", reports)
    run.outputs.extend([tsv, table])
    for report in reports:
        print(report.line())


def cmd_schedule(run: Run) -> None:
    schedule = run.schedule()
    sys.stdout.write(schedule.dump())
    run.extra.update(fully_corrupting=schedule.fully_corrupting)


def cmd_usage(run: Run) -> None:
    maps = run.token_maps()
    usage = codebook_usage(maps, run.config.codec.codebook_size)
    print(f"maps\t{len(maps)}")
    print(f"utilization\t{usage['utilization']!r}")
    print(f"perplexity\t{usage['perplexity']!r}")
    print("counts\t" + ",".join(str(c) for c in usage["counts"]))
    run.extra.update(utilization=usage["utilization"], perplexity=usage["perplexity"])


COMMANDS: Dict[str, Callable[[Run], None]] = {
    "gen-corpus": cmd_gen_corpus,
    "train-vq": cmd_train_vq,
    "tokenize": cmd_tokenize,
    "train-diffusion": cmd_train_diffusion,
    "sample": cmd_sample,
    "complete": cmd_complete,
    "denoise": cmd_denoise,
    "edit": cmd_edit,
    "eval": cmd_eval,
    "spectrum": cmd_spectrum,
    "schedule": cmd_schedule,
    "usage": cmd_usage,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="partdiff", description="Part-discretized diffusion for truncated SDF shapes")
    parser.add_argument("--config", default=None, help="INI config file")
    parser.add_argument("--seed", type=int, default=None, help="root seed (unsigned 64 bit)")
    parser.add_argument("--threads", type=int, default=None, help="worker threads, 1 is fully deterministic")
    parser.add_argument("--out", default=PARTDIFF_HOME, help="artifact root directory")
    parser.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    parser.add_argument("--log-level", default=LOG_LEVEL, help="DEBUG, INFO, WARNING or ERROR")
    parser.add_argument("--quiet", action="store_true", help="no progress bars")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-corpus", help="generate the synthetic shape corpus")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--classes", type=int, default=3)

    sub.add_parser("train-vq", help="train the patch codec on the corpus")
    sub.add_parser("tokenize", help="encode the corpus into token maps")

    p = sub.add_parser("train-diffusion", help="train the denoiser on the token maps")
    p.add_argument("--model", default="model", help="model directory name under --out")

    p = sub.add_parser("sample", help="unconditional or class conditional generation")
    p.add_argument("--model", default="model")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--label", type=int, default=None)

    p = sub.add_parser("complete", help="shape completion from a partial observation")
    p.add_argument("--model", default="model")
    p.add_argument("--input", default=None, help="TSDF1 file, first corpus shape by default")
    p.add_argument("--region", default=None, help="preset or x0:x1,y0:y1,z0:z1")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--start", type=float, default=None, help="corruption start k/T")
    p.add_argument("--label", type=int, default=None)

    p = sub.add_parser("denoise", help="denoise a noisy volume")
    p.add_argument("--model", default="model")
    p.add_argument("--input", default=None)
    p.add_argument("--noise-kind", choices=NOISE_KINDS, default=None)
    p.add_argument("--noise-level", type=float, default=None)
    p.add_argument("--start", type=float, default=None)

    p = sub.add_parser("edit", help="edit a token map towards new class labels")
    p.add_argument("--model", default="model")
    p.add_argument("--input", default=None, help="TOKM1 file, first corpus map by default")
    p.add_argument("--labels", required=True, help="comma separated target labels")
    p.add_argument("--start", type=float, default=None)

    p = sub.add_parser("eval", help="1-NNA of generated shapes against the corpus")
    p.add_argument("--generated", default=None, help="directory of TSDF1 files")
    p.add_argument("--limit", type=int, default=None, help="use only the first N corpus shapes")

    p = sub.add_parser("spectrum", help="DCT power in the top octave band")
    p.add_argument("--input", default=None, help="TSDF1 file or directory")

    sub.add_parser("schedule", help="print the diffusion schedule")
    sub.add_parser("usage", help="codebook utilization of the token maps")
    return parser


def _configure_logging(level: str) -> None:
    numeric = logging.getLevelName(level.upper())
    if not isinstance(numeric, int):
        raise ConfigError(f"unknown log level {level!r}")
    logging.basicConfig(level=numeric, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _configure_logging(args.log_level)
        if not args.command:
            raise ConfigError("missing command, expected one of " + ", ".join(COMMANDS))
        run = Run(args)
        COMMANDS[args.command](run)
        run.finish(args.command)
    except ConfigError as e:
        print(f"partdiff: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (PartDiffError, FileNotFoundError, ValueError) as e:
        print(f"partdiff: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK
