"""
errdecode - linha de comando

Subcomandos:
  synth    gera um container sintético a partir de um spec JSON
  fit      pré-processa, ajusta e avalia um decodificador (convnet/rlda/fbcsp)
  stats    testes de permutação, sinal e regressão sobre tabelas de acurácia
  perturb  mapas de correlação por perturbação de um modelo convnet
  avgmaps  média de mapas (nível de participante)
  l1dist   distância L1 normalizada entre quadros de vídeo
"""

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence

import pandas as pd
from dotenv import load_dotenv

# Carregar variáveis de ambiente do diretório pai
load_dotenv(dotenv_path=Path(__file__).parent.parent / ".env")

from container_io import load_recording, read_csv, read_model_kind, save_recording, write_csv
from decoding_pipeline import (
    DecodingMethod,
    DecodingPipeline,
    RunConfig,
    concatenate_recordings,
    load_model,
    params_from_metadata,
    preprocess_for_method,
    write_run_outputs,
)
from decoding_stats import ACCURACY_COLUMNS, DEFAULT_PERMUTATIONS, build_statistics_table
from eeg_structures import (
    ConfigurationError,
    ContainerFormatError,
    DecodingTask,
    FilterDesignError,
    ModelFitError,
    Robot,
    SignalShapeError,
    SingleClassError,
    StatisticsError,
    project_labels,
)
from perturbation_maps import average_maps, frame_distance_frame, load_frames, load_map, map_to_csv, perturbation_map
from preprocessing import epoch_trials
from synthetic_eeg import SynthSpec, generate

logger = logging.getLogger(__name__)

MANIFEST_NAME = "ground_truth.json"

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_CONTAINER = 3
EXIT_SIGNAL = 4
EXIT_FIT = 5

# Ordem importa: a primeira classe compatível define o código.
EXIT_CODES = (
    (ConfigurationError, EXIT_CONFIG),
    (ContainerFormatError, EXIT_CONTAINER),
    (SignalShapeError, EXIT_SIGNAL),
    (FilterDesignError, EXIT_SIGNAL),
    (SingleClassError, EXIT_FIT),
    (ModelFitError, EXIT_FIT),
    (StatisticsError, EXIT_FIT),
)


def exit_code_for(exc: BaseException) -> int:
    for error_class, code in EXIT_CODES:
        if isinstance(exc, error_class):
            return code
    return EXIT_OTHER


# ---------------------------------------------------------------------------
# Environment and configuration
# ---------------------------------------------------------------------------


def configure_logging() -> None:
    level = os.getenv("ERRDECODE_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def thread_cap() -> Optional[int]:
    raw = os.getenv("ERRDECODE_THREADS")
    if raw is None or raw.strip() == "":
        return None
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"ERRDECODE_THREADS must be an integer, got {raw!r}") from exc
    if value < 1:
        raise ConfigurationError(f"ERRDECODE_THREADS must be >= 1, got {value}")
    return value


def resolve_threads(requested: Optional[int]) -> int:
    """Requested worker count, capped by ERRDECODE_THREADS."""
    cap = thread_cap()
    threads = requested if requested is not None else (cap or 1)
    return min(threads, cap) if cap else threads


def read_config_file(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            values = json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(values, dict):
        raise ConfigurationError(f"config {path} must hold a JSON object")
    return values


def apply_overrides(args: argparse.Namespace, overrides: Dict[str, Any], allowed: Sequence[str]) -> None:
    unknown = sorted(set(overrides) - set(allowed))
    if unknown:
        raise ConfigurationError(f"unknown config keys {unknown}; allowed: {sorted(allowed)}")
    for key, value in overrides.items():
        setattr(args, key, value)


@contextmanager
def staged_output(target_dir: Path) -> Iterator[Path]:
    """Yield a staging directory whose contents move into ``target_dir`` on success.

    On failure the staging directory is removed and ``target_dir`` is left
    as it was.
    """
    target_dir = Path(target_dir)
    target_dir.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{target_dir.name}.partial-", dir=target_dir.parent))
    try:
        yield staging
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    target_dir.mkdir(parents=True, exist_ok=True)
    for item in sorted(staging.iterdir()):
        destination = target_dir / item.name
        if destination.is_dir():
            shutil.rmtree(destination)
        os.replace(item, destination)
    shutil.rmtree(staging, ignore_errors=True)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SynthSpec.from_file(args.spec)
    if args.seed is not None:
        spec = spec.model_copy(update={"seed": args.seed})
    result = generate(spec)
    with staged_output(Path(args.out)) as staging:
        save_recording(result.recording, staging)
        result.write_manifest(staging / MANIFEST_NAME)
    print(f"✅ Synthetic recording ({spec.effect.kind.value}, {spec.n_trials} trials) -> {args.out}")
    return EXIT_OK


FIT_FLAG_FIELDS = ("inputs", "method", "task", "robot", "interval", "seed", "run_id", "threads")


def build_run_config(args: argparse.Namespace) -> RunConfig:
    values: Dict[str, Any] = {}
    for name in FIT_FLAG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            values[name] = value
    values["output_dir"] = args.out
    values.update(read_config_file(args.config))
    values["threads"] = resolve_threads(values.get("threads"))
    return RunConfig.build(values)


def cmd_fit(args: argparse.Namespace) -> int:
    config = build_run_config(args)
    result = DecodingPipeline(config).run()
    with staged_output(Path(config.output_dir)) as staging:
        write_run_outputs(result, staging)
    print(f"✅ {result.method.value} {result.run_id}: accuracy {result.accuracy:.4f} "
          f"({result.n_test} test trials) -> {config.output_dir}")
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    tables = [read_csv(path, required_columns=ACCURACY_COLUMNS) for path in args.accuracies]
    table = pd.concat(tables, ignore_index=True)
    stats = build_statistics_table(table, n_perm=args.permutations, seed=args.seed,
                                   max_workers=resolve_threads(None))
    out = Path(args.out)
    with staged_output(out.parent) as staging:
        write_csv(stats, staging / out.name)
    print(f"✅ {len(stats)} statistics rows from {len(table)} accuracy rows -> {out}")
    return EXIT_OK


PERTURB_KEYS = ("model", "inputs", "out", "noise_scale", "iterations", "bin_s", "t_start", "t_end", "seed")


def cmd_perturb(args: argparse.Namespace) -> int:
    apply_overrides(args, read_config_file(args.config), PERTURB_KEYS)
    if not args.model or not args.inputs:
        raise ConfigurationError("perturb needs --model and --input (flags or --config)")
    if read_model_kind(args.model) != DecodingMethod.CONVNET.value:
        raise ConfigurationError("perturbation maps require a convnet model")
    _, model, metadata = load_model(args.model)

    rec = concatenate_recordings([load_recording(path) for path in args.inputs])
    threads = resolve_threads(None)
    prepared = preprocess_for_method(rec, DecodingMethod.CONVNET, params_from_metadata(metadata),
                                     max_workers=threads)
    ts = epoch_trials(prepared.recording, tuple(metadata["interval"]))
    robot = Robot(metadata["robot"]) if metadata.get("robot") else None
    ts = project_labels(ts, DecodingTask(metadata["task"]), robot)
    if (ts.n_channels, ts.n_timepoints) != (model.config.n_channels, model.config.n_timepoints):
        raise SignalShapeError(
            f"trials are {ts.n_channels}x{ts.n_timepoints}, model expects "
            f"{model.config.n_channels}x{model.config.n_timepoints}"
        )

    cmap = perturbation_map(model, ts, noise_scale=args.noise_scale, n_iter=args.iterations, bin_s=args.bin_s,
                            seed=args.seed, t_range_s=(args.t_start, args.t_end), max_workers=threads)
    with staged_output(Path(args.out)) as staging:
        map_to_csv(cmap, staging)
    print(f"✅ Perturbation map ({cmap.n_bins} bins x {cmap.values.shape[1]} channels) -> {args.out}")
    return EXIT_OK


def cmd_avgmaps(args: argparse.Namespace) -> int:
    averaged = average_maps([load_map(path) for path in args.maps])
    with staged_output(Path(args.out)) as staging:
        map_to_csv(averaged, staging)
    print(f"✅ Averaged {averaged.n_maps} maps -> {args.out}")
    return EXIT_OK


def cmd_l1dist(args: argparse.Namespace) -> int:
    frames = load_frames(args.frames, frame_rate_hz=args.frame_rate)
    out = Path(args.out)
    with staged_output(out.parent) as staging:
        write_csv(frame_distance_frame(frames), staging / out.name)
    print(f"✅ Delta_norm for {len(frames.frames) - 1} frame pairs -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="errdecode", description="EEG decoding of robot errors")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic recording container")
    synth.add_argument("--spec", required=True, help="synthetic spec (JSON)")
    synth.add_argument("--out", required=True, help="container directory to write")
    synth.add_argument("--seed", type=int, default=None, help="override the spec seed")
    synth.set_defaults(handler=cmd_synth)

    fit = sub.add_parser("fit", help="preprocess, fit and evaluate one decoder")
    fit.add_argument("--input", dest="inputs", nargs="+", help="recording container(s) of one participant")
    fit.add_argument("--method", choices=[m.value for m in DecodingMethod])
    fit.add_argument("--task", choices=[t.value for t in DecodingTask])
    fit.add_argument("--robot", choices=[r.value for r in Robot])
    fit.add_argument("--interval", nargs=2, type=float, metavar=("START", "END"))
    fit.add_argument("--seed", type=int)
    fit.add_argument("--run-id", dest="run_id")
    fit.add_argument("--threads", type=int)
    fit.add_argument("--out", default="runs/fit", help="output directory")
    fit.add_argument("--config", help="JSON run configuration; its keys override flags")
    fit.set_defaults(handler=cmd_fit)

    stats = sub.add_parser("stats", help="statistics over accuracy tables")
    stats.add_argument("--accuracies", nargs="+", required=True, help="metrics.csv files")
    stats.add_argument("--out", required=True, help="statistics CSV to write")
    stats.add_argument("--permutations", type=int, default=DEFAULT_PERMUTATIONS)
    stats.add_argument("--seed", type=int, default=0)
    stats.set_defaults(handler=cmd_stats)

    perturb = sub.add_parser("perturb", help="input-perturbation correlation maps of a convnet model")
    perturb.add_argument("--model", help="model container written by fit")
    perturb.add_argument("--input", dest="inputs", nargs="+", help="recording container(s)")
    perturb.add_argument("--out", default="runs/maps")
    perturb.add_argument("--noise-scale", dest="noise_scale", type=float, default=0.5)
    perturb.add_argument("--iterations", type=int, default=30)
    perturb.add_argument("--bin-s", dest="bin_s", type=float, default=0.2)
    perturb.add_argument("--t-start", dest="t_start", type=float, default=2.0)
    perturb.add_argument("--t-end", dest="t_end", type=float, default=6.0)
    perturb.add_argument("--seed", type=int, default=0)
    perturb.add_argument("--config", help="JSON object of flag overrides")
    perturb.set_defaults(handler=cmd_perturb)

    avgmaps = sub.add_parser("avgmaps", help="average perturbation maps")
    avgmaps.add_argument("--maps", nargs="+", required=True, help="map directories")
    avgmaps.add_argument("--out", required=True)
    avgmaps.set_defaults(handler=cmd_avgmaps)

    l1dist = sub.add_parser("l1dist", help="normalized L1 distance between consecutive frames")
    l1dist.add_argument("--frames", required=True, help="directory of PGM/PPM/PNG frames")
    l1dist.add_argument("--frame-rate", dest="frame_rate", type=float, default=25.0)
    l1dist.add_argument("--out", required=True, help="CSV to write")
    l1dist.set_defaults(handler=cmd_l1dist)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except Exception as exc:
        code = exit_code_for(exc)
        if code == EXIT_OTHER:
            logger.exception(f"[CLI] {args.command} failed")
        else:
            logger.error(f"[CLI] {args.command} failed: {exc}")
        print(f"❌ {args.command}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
