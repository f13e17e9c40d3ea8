"""Command-line entry point: corpus creation, training, synthesis, evaluation.

Verbs:
  make-corpus   generate the deterministic toy corpus
  pretrain      stage-1 flow-matching training
  finetune      stage-2 few-step adversarial fine-tuning
  synthesize    WAVs from a checkpoint plus wav (copy-synthesis) or .npy mel inputs
  evaluate      objective metric report over a corpus split or a manifest of pairs
  bench         generation speed: NFE, wall-clock, and real-time factor

Configuration is a flat key=value file (--config) merged with repeatable
dotted-path --override flags, last writer wins.  Every run writes a
resolved-config snapshot (resolved.cfg) next to its outputs so the run can be
reproduced without knowledge of any defaults.  The TURBOWAVE_CACHE environment
variable supplies a default corpus location for make-corpus and the training
verbs.  Exit codes: 0 success, 1 runtime failure, 2 usage error.  Failures
print a single line `error[ErrorClass]: message` to stderr.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import apply_overrides, parse_scalar, read_config, write_config
from .data import (
    DatasetSpec,
    analysis_from_meta,
    load_audio,
    make_toy_corpus,
    save_audio,
)
from .errors import ConfigError, DataError, TurbowaveError
from .evaluation import (
    MetricReport,
    benchmark_generation,
    emit_report,
    extract_pitch,
    mstft_distance,
    pitch_error_cents,
    pitch_metrics,
    report_config_hash,
)
from .flow import TimeGrid, ode_sample
from .signal import AudioBuffer, MelConfig, StftConfig, mel_spectrogram
from .train import TrainConfig, copy_synthesize, finetune_turbo, load_generator, pretrain_fm

SNAPSHOT_NAME = "resolved.cfg"
DEFAULT_CORPUS_DIRNAME = "toy-corpus"

# Aliases let ablation overrides use loss.* paths while TrainConfig stays flat.
_TRAIN_ALIASES = {
    "loss.use_gan": "use_gan",
    "loss.mel_variant": "mel_variant",
    "loss.lambda_fm": "lambda_fm",
    "loss.lambda_mel": "lambda_mel",
}

_CORPUS_KEYS = {
    "corpus.n_items": ("n_items", int),
    "corpus.duration": ("duration", float),
    "corpus.sample_rate": ("sample_rate", int),
    "corpus.seed": ("seed", int),
    "corpus.segment_length": ("segment_length", int),
    "corpus.stft.n_fft": ("stft_n_fft", int),
    "corpus.stft.hop_size": ("stft_hop_size", int),
    "corpus.stft.win_size": ("stft_win_size", int),
    "corpus.stft.window": ("stft_window", str),
    "corpus.mel.n_mels": ("mel_n_mels", int),
    "corpus.mel.f_min": ("mel_f_min", float),
    "corpus.mel.f_max": ("mel_f_max", float),
}

_EVAL_KEYS = {"eval.split", "eval.manifest"}
_BENCH_KEYS = {"bench.items", "bench.split"}


def _merged_mapping(args) -> dict:
    mapping = read_config(args.config) if args.config else {}
    return apply_overrides(mapping, getattr(args, "override", None))


def _cache_dir() -> Path | None:
    cache = os.environ.get("TURBOWAVE_CACHE")
    return Path(cache) if cache else None


def _corpus_root(mapping: dict) -> Path:
    root = mapping.get("data.root")
    if root:
        return Path(str(root))
    cache = _cache_dir()
    if cache is not None:
        return cache / DEFAULT_CORPUS_DIRNAME
    raise ConfigError(
        "no corpus location: set data.root in the config "
        "(or --override data.root=PATH) or export TURBOWAVE_CACHE"
    )


def _parse_betas(value) -> tuple:
    if isinstance(value, (tuple, list)):
        return tuple(float(v) for v in value)
    parts = str(value).split(",")
    if len(parts) != 2:
        raise ConfigError(f"betas must be two comma-separated floats, got {value!r}")
    try:
        return (float(parts[0]), float(parts[1]))
    except ValueError as exc:
        raise ConfigError(f"betas must be numeric, got {value!r}") from exc


def _train_config(mapping: dict, stage: str, args) -> TrainConfig:
    kwargs: dict = {}
    for key, raw in mapping.items():
        if key in _TRAIN_ALIASES:
            kwargs[_TRAIN_ALIASES[key]] = parse_scalar(str(raw))
        elif key.startswith("train."):
            kwargs[key[len("train."):]] = parse_scalar(str(raw))
        elif key.startswith("loss."):
            raise ConfigError(
                f"unknown loss key {key!r}; known: {sorted(_TRAIN_ALIASES)}"
            )
    kwargs["stage"] = stage
    if args.seed is not None:
        kwargs["seed"] = args.seed
    if args.steps is not None:
        kwargs["steps"] = args.steps
    if "betas" in kwargs:
        kwargs["betas"] = _parse_betas(kwargs["betas"])
    return TrainConfig.from_dict(kwargs)


def _train_snapshot(cfg: TrainConfig, extra: dict) -> dict:
    mapping: dict = {"run.version": __version__}
    mapping.update(extra)
    for key, value in sorted(cfg.to_dict().items()):
        if key == "betas":
            value = ",".join(repr(float(b)) for b in value)
        alias = next((a for a, f in _TRAIN_ALIASES.items() if f == key), None)
        mapping[alias or f"train.{key}"] = value
    return mapping


def _write_snapshot(out_dir: Path, mapping: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config(out_dir / SNAPSHOT_NAME, mapping)


def _grid_from_args(args) -> TimeGrid:
    steps = args.steps if args.steps is not None else 4
    solver = args.solver or "euler"
    return TimeGrid.uniform(steps, solver)


def _load_analysis(checkpoint) -> tuple:
    generator, train_cfg, data_meta = load_generator(checkpoint)
    if data_meta is None:
        raise ConfigError(
            f"checkpoint {checkpoint} lacks analysis metadata; re-save it from a "
            "training run that knew its dataset"
        )
    sample_rate, stft, mel = analysis_from_meta(data_meta)
    return generator, train_cfg, sample_rate, stft, mel


# ---------------------------------------------------------------------------
# Verbs


def cmd_make_corpus(args) -> int:
    mapping = _merged_mapping(args)
    params: dict = {}
    for key, raw in mapping.items():
        if not key.startswith("corpus."):
            continue
        if key not in _CORPUS_KEYS:
            raise ConfigError(f"unknown corpus key {key!r}; known: {sorted(_CORPUS_KEYS)}")
        name, cast = _CORPUS_KEYS[key]
        value = parse_scalar(str(raw))
        params[name] = None if value is None else cast(value)

    out = Path(args.out) if args.out else None
    if out is None:
        cache = _cache_dir()
        if cache is None:
            raise ConfigError("make-corpus needs --out or the TURBOWAVE_CACHE env var")
        out = cache / DEFAULT_CORPUS_DIRNAME
    if args.seed is not None:
        params["seed"] = args.seed

    stft = StftConfig(
        n_fft=params.pop("stft_n_fft", 512),
        hop_size=params.pop("stft_hop_size", 128),
        win_size=params.pop("stft_win_size", 512),
        window=params.pop("stft_window", "hann"),
    )
    mel = MelConfig(
        n_mels=params.pop("mel_n_mels", 40),
        f_min=params.pop("mel_f_min", 0.0),
        f_max=params.pop("mel_f_max", None),
    )
    spec = make_toy_corpus(out, stft=stft, mel=mel, **params)

    snapshot = {
        "run.version": __version__,
        "run.verb": "make-corpus",
        "corpus.n_items": sum(len(v) for v in spec.splits.values()),
        "corpus.duration": params.get("duration", 2.0),
        "corpus.sample_rate": spec.sample_rate,
        "corpus.seed": params.get("seed", 0),
        "corpus.segment_length": spec.segment_length,
        "corpus.stft.n_fft": stft.n_fft,
        "corpus.stft.hop_size": stft.hop_size,
        "corpus.stft.win_size": stft.win_size,
        "corpus.stft.window": stft.window,
        "corpus.mel.n_mels": mel.n_mels,
        "corpus.mel.f_min": mel.f_min,
        "corpus.mel.f_max": mel.f_max,
    }
    _write_snapshot(out, snapshot)
    n_items = sum(len(v) for v in spec.splits.values())
    print(f"corpus: {out}")
    print(f"items: {n_items} sample_rate: {spec.sample_rate}")
    return 0


def cmd_pretrain(args) -> int:
    mapping = _merged_mapping(args)
    root = _corpus_root(mapping)
    dataset = DatasetSpec.load(root)
    cfg = _train_config(mapping, "fm", args)
    out = Path(args.out)
    snapshot = _train_snapshot(cfg, {"run.verb": "pretrain", "data.root": str(root)})
    if args.checkpoint:
        snapshot["run.resume"] = str(args.checkpoint)
    _write_snapshot(out, snapshot)
    ckpt = pretrain_fm(cfg, dataset, out, resume=args.checkpoint)
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_finetune(args) -> int:
    mapping = _merged_mapping(args)
    root = _corpus_root(mapping)
    dataset = DatasetSpec.load(root)
    cfg = _train_config(mapping, "turbo", args)
    out = Path(args.out)
    snapshot = _train_snapshot(cfg, {"run.verb": "finetune", "data.root": str(root)})
    if args.teacher:
        snapshot["run.teacher"] = str(args.teacher)
    if args.checkpoint:
        snapshot["run.resume"] = str(args.checkpoint)
    _write_snapshot(out, snapshot)
    ckpt = finetune_turbo(cfg, dataset, out, teacher=args.teacher, resume=args.checkpoint)
    print(f"checkpoint: {ckpt}")
    return 0


def _synthesize_one(generator, path: Path, stft, mel, sample_rate, grid, rng) -> AudioBuffer:
    if path.suffix == ".npy":
        values = torch.from_numpy(np.load(path)).float()
        if values.ndim != 2:
            raise DataError(f"{path}: expected a 2-D (n_mels, frames) mel array")
        n_mels = generator.hyperparams()["n_mels"]
        if values.shape[0] != n_mels:
            raise DataError(
                f"{path}: mel array has {values.shape[0]} bands, generator expects {n_mels}"
            )
        length = values.shape[1] * stft.hop_size
        x0 = torch.randn(length, generator=rng)
        with torch.no_grad():
            out = ode_sample(generator, x0, values, grid)
        return AudioBuffer(out, sample_rate)
    audio = load_audio(path, sample_rate=sample_rate)
    return copy_synthesize(generator, audio, stft, mel, grid, rng)


def cmd_synthesize(args) -> int:
    generator, _, sample_rate, stft, mel = _load_analysis(args.checkpoint)
    grid = _grid_from_args(args)
    seed = args.seed if args.seed is not None else 0
    rng = torch.Generator().manual_seed(seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    written = []
    for text in args.inputs:
        path = Path(text)
        result = _synthesize_one(generator, path, stft, mel, sample_rate, grid, rng)
        target = out_dir / f"{path.stem}_gen.wav"
        save_audio(target, result)
        written.append(target)
        print(f"wav: {target}")

    snapshot = {
        "run.version": __version__,
        "run.verb": "synthesize",
        "synth.checkpoint": str(args.checkpoint),
        "synth.steps": grid.n_steps,
        "synth.solver": grid.solver,
        "synth.nfe": grid.nfe,
        "synth.seed": seed,
        "synth.inputs": ",".join(args.inputs),
    }
    _write_snapshot(out_dir, snapshot)
    print(f"generated: {len(written)} nfe: {grid.nfe}")
    return 0


def _manifest_pairs(manifest: Path) -> list:
    pairs = []
    for lineno, raw in enumerate(manifest.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ConfigError(
                f"{manifest}:{lineno}: expected `reference generated` paths, got {line!r}"
            )
        pairs.append(tuple((manifest.parent / p).resolve() if not Path(p).is_absolute() else Path(p) for p in parts))
    if not pairs:
        raise DataError(f"manifest {manifest} lists no pairs")
    return pairs


def _add_pair_metrics(report: MetricReport, name: str, ref: AudioBuffer, hyp: AudioBuffer,
                      frame_hop: int, **extra) -> None:
    metrics = {"mstft": mstft_distance(ref.samples, hyp.samples)}
    ref_track = extract_pitch(ref, frame_hop=frame_hop)
    hyp_track = extract_pitch(hyp, frame_hop=frame_hop)
    pm = pitch_metrics(ref_track, hyp_track)
    metrics["periodicity"] = pm.periodicity_error
    metrics["vuv_f1"] = pm.vuv_f1
    metrics["pitch_hz"] = pm.pitch_error
    metrics["pitch_cents"] = pitch_error_cents(ref_track, hyp_track)
    metrics.update(extra)
    report.add_item(name, **metrics)


def cmd_evaluate(args) -> int:
    mapping = _merged_mapping(args)
    for key in mapping:
        if key.startswith("eval.") and key not in _EVAL_KEYS:
            raise ConfigError(f"unknown eval key {key!r}; known: {sorted(_EVAL_KEYS)}")
    out_dir = Path(args.out)
    manifest = mapping.get("eval.manifest")
    seed = args.seed if args.seed is not None else 0

    snapshot = {"run.version": __version__, "run.verb": "evaluate", "eval.seed": seed}

    if manifest:
        snapshot["eval.manifest"] = str(manifest)
        report = MetricReport(model_id="manifest", config_hash=report_config_hash(snapshot))
        for ref_path, hyp_path in _manifest_pairs(Path(str(manifest))):
            ref = load_audio(ref_path)
            hyp = load_audio(hyp_path, sample_rate=ref.sample_rate)
            usable = min(len(ref), len(hyp))
            ref = AudioBuffer(ref.samples[:usable], ref.sample_rate)
            hyp = AudioBuffer(hyp.samples[:usable], hyp.sample_rate)
            _add_pair_metrics(report, Path(ref_path).stem, ref, hyp, frame_hop=256)
    else:
        if not args.checkpoint:
            raise ConfigError("evaluate needs --checkpoint (or eval.manifest in the config)")
        root = _corpus_root(mapping)
        dataset = DatasetSpec.load(root)
        generator, _, sample_rate, stft, mel = _load_analysis(args.checkpoint)
        grid = _grid_from_args(args)
        split = str(mapping.get("eval.split", "dev"))
        rng = torch.Generator().manual_seed(seed)
        snapshot.update({
            "data.root": str(root),
            "eval.split": split,
            "eval.checkpoint": str(args.checkpoint),
            "eval.steps": grid.n_steps,
            "eval.solver": grid.solver,
        })
        report = MetricReport(
            model_id=Path(args.checkpoint).name,
            config_hash=report_config_hash(snapshot),
        )
        paths = dataset.split_paths(split)
        if not paths:
            raise DataError(f"split {split!r} of {root} is empty")
        for path in paths:
            ref = load_audio(path, sample_rate=sample_rate)
            started = time.perf_counter()
            hyp = copy_synthesize(generator, ref, stft, mel, grid, rng)
            wall = time.perf_counter() - started
            ref_t = AudioBuffer(ref.samples[: len(hyp)], sample_rate)
            xrt = (len(hyp) / sample_rate) / max(wall, 1e-9)
            _add_pair_metrics(report, path.stem, ref_t, hyp,
                              frame_hop=stft.hop_size, nfe=grid.nfe, xrt=xrt)

    _write_snapshot(out_dir, snapshot)
    emit_report(report, out_dir / "report.json", "json")
    emit_report(report, out_dir / "report.csv", "csv")
    emit_report(report, out_dir / "report.md", "markdown")
    agg = report.aggregate()
    summary = " ".join(f"{k}={agg[k]:.4f}" for k in sorted(agg))
    print(f"report: {out_dir / 'report.json'}")
    print(f"aggregate: {summary}")
    return 0


def cmd_bench(args) -> int:
    mapping = _merged_mapping(args)
    for key in mapping:
        if key.startswith("bench.") and key not in _BENCH_KEYS:
            raise ConfigError(f"unknown bench key {key!r}; known: {sorted(_BENCH_KEYS)}")
    root = _corpus_root(mapping)
    dataset = DatasetSpec.load(root)
    generator, _, sample_rate, stft, mel = _load_analysis(args.checkpoint)
    grid = _grid_from_args(args)
    split = str(mapping.get("bench.split", "dev"))
    limit = int(parse_scalar(str(mapping.get("bench.items", 4))))
    if limit < 1:
        raise ConfigError(f"bench.items must be >= 1, got {limit}")
    seed = args.seed if args.seed is not None else 0
    rng = torch.Generator().manual_seed(seed)

    items = []
    for path in dataset.split_paths(split)[:limit]:
        audio = load_audio(path, sample_rate=sample_rate)
        usable = (len(audio) // stft.hop_size) * stft.hop_size
        segment = AudioBuffer(audio.samples[:usable], sample_rate)
        condition = mel_spectrogram(segment, stft, mel)
        x0 = torch.randn(usable, generator=rng)
        items.append((x0, condition))
    if not items:
        raise DataError(f"split {split!r} of {root} is empty")

    result = benchmark_generation(generator, grid, items, sample_rate)

    out_dir = Path(args.out)
    snapshot = {
        "run.version": __version__,
        "run.verb": "bench",
        "data.root": str(root),
        "bench.checkpoint": str(args.checkpoint),
        "bench.split": split,
        "bench.items": len(items),
        "bench.steps": grid.n_steps,
        "bench.solver": grid.solver,
        "bench.seed": seed,
    }
    _write_snapshot(out_dir, snapshot)
    write_config(
        out_dir / "bench.txt",
        {
            "nfe": result.nfe,
            "wall_clock_s": result.wall_clock_s,
            "xrt": result.xrt,
            "steps": grid.n_steps,
            "solver": grid.solver,
            "items": len(items),
        },
    )
    print(f"nfe: {result.nfe} wall_s: {result.wall_clock_s:.4f} xrt: {result.xrt:.4f}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_common(sub, out_required: bool = True) -> None:
    sub.add_argument("--config", default=None, help="flat key=value config file")
    sub.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted-path config override; repeatable, last writer wins",
    )
    sub.add_argument("--out", required=out_required, help="output directory")
    sub.add_argument("--seed", type=int, default=None, help="randomness seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="turbowave",
        description="few-step flow-matching waveform generation",
    )
    parser.add_argument("--version", action="version", version=__version__)
    verbs = parser.add_subparsers(dest="verb", required=True, metavar="VERB")

    corpus = verbs.add_parser("make-corpus", help="generate the deterministic toy corpus")
    _add_common(corpus, out_required=False)
    corpus.set_defaults(func=cmd_make_corpus)

    pre = verbs.add_parser("pretrain", help="stage-1 flow-matching training")
    _add_common(pre)
    pre.add_argument("--steps", type=int, default=None, help="total optimizer steps")
    pre.add_argument("--checkpoint", default=None, help="resume from this checkpoint")
    pre.set_defaults(func=cmd_pretrain)

    fine = verbs.add_parser("finetune", help="stage-2 few-step adversarial fine-tuning")
    _add_common(fine)
    fine.add_argument("--steps", type=int, default=None, help="total optimizer steps")
    fine.add_argument("--teacher", default=None, help="stage-1 checkpoint to initialize from")
    fine.add_argument("--checkpoint", default=None, help="resume from this checkpoint")
    fine.set_defaults(func=cmd_finetune)

    synth = verbs.add_parser("synthesize", help="generate WAVs from a checkpoint")
    _add_common(synth)
    synth.add_argument("inputs", nargs="+", help="wav files (copy-synthesis) or .npy mel arrays")
    synth.add_argument("--checkpoint", required=True, help="generator checkpoint")
    synth.add_argument("--steps", type=int, default=None, help="ODE steps (default 4)")
    synth.add_argument("--solver", choices=("euler", "midpoint"), default=None,
                       help="ODE solver (default euler)")
    synth.set_defaults(func=cmd_synthesize)

    ev = verbs.add_parser("evaluate", help="objective metric report")
    _add_common(ev)
    ev.add_argument("--checkpoint", default=None, help="generator checkpoint")
    ev.add_argument("--steps", type=int, default=None, help="ODE steps (default 4)")
    ev.add_argument("--solver", choices=("euler", "midpoint"), default=None,
                    help="ODE solver (default euler)")
    ev.set_defaults(func=cmd_evaluate)

    bench = verbs.add_parser("bench", help="generation speed benchmark")
    _add_common(bench)
    bench.add_argument("--checkpoint", required=True, help="generator checkpoint")
    bench.add_argument("--steps", type=int, default=None, help="ODE steps (default 4)")
    bench.add_argument("--solver", choices=("euler", "midpoint"), default=None,
                       help="ODE solver (default euler)")
    bench.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except TurbowaveError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - last-resort guard
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
