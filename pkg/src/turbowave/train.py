"""Two-stage training: flow-matching pretraining, then few-step adversarial tuning.

Stage 1 regresses the vector field with the CFM objective.  Stage 2 freezes
the step grid (2 or 4 Euler steps), initializes from the stage-1 checkpoint,
and optimizes the composite of adversarial, feature-matching, and
multi-scale mel losses against a fresh discriminator ensemble, alternating
discriminator and generator updates 1:1.

All training randomness flows through one torch.Generator whose state is
checkpointed, so a resumed run replays the exact trajectory of an
uninterrupted one.  Per step the draw order is: for each batch item a file
index then a segment offset; then the stage's noise draws (t and x0 for CFM,
x0 for turbo).
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .checkpoint import load_archive, save_archive
from .data import DatasetSpec, sample_segment
from .errors import CheckpointError, ConfigError, TrainingDiverged
from .flow import ProbabilityPath, TimeGrid, cfm_loss, fixed_step_generate, ode_sample
from .losses import (
    LossWeights,
    MultiScaleMelSpec,
    adv_d_loss_from_scores,
    adv_g_loss_from_scores,
    feature_matching_loss,
    final_generator_loss,
    mel_loss,
    multiscale_mel_loss,
    multiscale_stft_loss,
)
from .model import (
    DiscriminatorEnsemble,
    ModelScale,
    VectorFieldEstimator,
)
from .signal import AudioBuffer, CqtConfig, MelConfig, StftConfig, mel_spectrogram

STAGES = ("fm", "turbo")
MEL_VARIANTS = ("multi", "single", "mstft")
INITS = ("from_checkpoint", "scratch")
LOG_NAME = "train_log.jsonl"
RECENT_WINDOW = 100


@dataclass
class TrainConfig:
    """Everything one training run needs, flat and serializable."""

    stage: str = "fm"
    steps: int = 1000
    lr: float = 2e-4
    d_lr: float | None = None  # discriminator rate; defaults to lr
    betas: tuple = (0.8, 0.99)
    weight_decay: float = 0.01
    batch_size: int = 4
    n_steps: int = 4
    use_gan: bool = True
    mel_variant: str = "multi"
    init: str = "from_checkpoint"
    seed: int = 0
    lambda_fm: float = 2.0
    lambda_mel: float = 45.0
    grad_clip: float = 1.0  # global norm during turbo; 0 disables
    scale: str = "tiny"
    sigma_min: float = 1e-4
    checkpoint_every: int = 0  # 0 keeps only the final checkpoint

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.mel_variant not in MEL_VARIANTS:
            raise ConfigError(f"mel_variant must be one of {MEL_VARIANTS}")
        if self.init not in INITS:
            raise ConfigError(f"init must be one of {INITS}")
        if self.n_steps not in (2, 4):
            raise ConfigError("n_steps must be 2 or 4")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(lambda_fm=self.lambda_fm, lambda_mel=self.lambda_mel)

    def to_dict(self) -> dict:
        record = dataclasses.asdict(self)
        record["betas"] = list(self.betas)
        return record

    @classmethod
    def from_dict(cls, record: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(record) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        kwargs = dict(record)
        if "betas" in kwargs:
            kwargs["betas"] = tuple(kwargs["betas"])
        return cls(**kwargs)


@dataclass
class TrainState:
    """Live training state; serializable losslessly via save_checkpoint."""

    config: TrainConfig
    generator: VectorFieldEstimator
    g_opt: torch.optim.AdamW
    rng: torch.Generator
    step: int = 0
    discriminator: DiscriminatorEnsemble | None = None
    d_opt: torch.optim.AdamW | None = None
    recent: list = field(default_factory=list)
    data_meta: dict | None = None  # analysis configs for standalone synthesis

    def note_loss(self, value: float) -> None:
        self.recent.append(float(value))
        del self.recent[:-RECENT_WINDOW]


def build_generator(cfg: TrainConfig, n_mels: int, conditioning_hop: int) -> VectorFieldEstimator:
    torch.manual_seed(cfg.seed)
    return VectorFieldEstimator(
        ModelScale.from_name(cfg.scale),
        n_mels=n_mels,
        conditioning_hop=conditioning_hop,
    )


def build_discriminator(cfg: TrainConfig, sample_rate: int) -> DiscriminatorEnsemble:
    torch.manual_seed(cfg.seed + 1)
    return DiscriminatorEnsemble(sample_rate=sample_rate)


def _generator_from_hyperparams(hp: dict) -> VectorFieldEstimator:
    return VectorFieldEstimator(
        ModelScale(hp["scale"], hp["hidden_dim"], hp["final_dim"]),
        n_mels=hp["n_mels"],
        periods=tuple(hp["periods"]),
        conditioning_hop=hp["conditioning_hop"],
    )


def _discriminator_from_hyperparams(hp: dict) -> DiscriminatorEnsemble:
    cqt = CqtConfig(
        f_min=hp["cqt_f_min"],
        octaves=hp["cqt_octaves"],
        bins_per_octave=hp["cqt_bins_per_octave"],
        scales=tuple(hp["cqt_scales"]),
    )
    return DiscriminatorEnsemble(
        sample_rate=hp["sample_rate"],
        periods=tuple(hp["periods"]),
        cqt_config=cqt,
        mpd_channels=tuple(hp["mpd_channels"]),
    )


def _make_optimizer(module: torch.nn.Module, lr: float, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        module.parameters(), lr=lr, betas=cfg.betas, weight_decay=cfg.weight_decay
    )


def _optimizer_arrays(opt: torch.optim.Optimizer, prefix: str) -> dict:
    arrays = {}
    for idx, state in opt.state_dict()["state"].items():
        for key, value in state.items():
            tensor = value if torch.is_tensor(value) else torch.tensor(float(value))
            arrays[f"{prefix}.{idx}.{key}"] = tensor
    return arrays


def _load_optimizer(opt: torch.optim.Optimizer, arrays: dict, prefix: str) -> None:
    sd = opt.state_dict()
    state: dict[int, dict] = {}
    marker = prefix + "."
    for name, tensor in arrays.items():
        if not name.startswith(marker):
            continue
        idx_text, key = name[len(marker) :].split(".", 1)
        state.setdefault(int(idx_text), {})[key] = tensor.clone()
    sd["state"] = state
    opt.load_state_dict(sd)


def save_checkpoint(state: TrainState, path) -> Path:
    """Serialize a TrainState to a single integrity-checked archive."""
    arrays = {f"g.{k}": v for k, v in state.generator.state_dict().items()}
    arrays.update(_optimizer_arrays(state.g_opt, "g_opt"))
    arrays["rng_state"] = state.rng.get_state()
    meta = {
        "kind": "train_state",
        "stage": state.config.stage,
        "step": state.step,
        "config": state.config.to_dict(),
        "generator": state.generator.hyperparams(),
        "discriminator": None,
        "recent": state.recent,
        "data": state.data_meta,
    }
    if state.discriminator is not None:
        arrays.update({f"d.{k}": v for k, v in state.discriminator.state_dict().items()})
        arrays.update(_optimizer_arrays(state.d_opt, "d_opt"))
        meta["discriminator"] = state.discriminator.hyperparams()
    path = Path(path)
    save_archive(path, arrays, meta)
    return path


def load_checkpoint(path) -> TrainState:
    """Rebuild a TrainState, including optimizers and the rng, from disk."""
    arrays, meta = load_archive(path)
    if meta.get("kind") != "train_state":
        raise CheckpointError(f"{path} is not a training checkpoint")
    cfg = TrainConfig.from_dict(meta["config"])

    generator = _generator_from_hyperparams(meta["generator"])
    generator.load_state_dict(
        {k[2:]: v for k, v in arrays.items() if k.startswith("g.")}
    )
    g_opt = _make_optimizer(generator, cfg.lr, cfg)
    _load_optimizer(g_opt, arrays, "g_opt")

    discriminator = d_opt = None
    if meta["discriminator"] is not None:
        discriminator = _discriminator_from_hyperparams(meta["discriminator"])
        discriminator.load_state_dict(
            {k[2:]: v for k, v in arrays.items() if k.startswith("d.")}
        )
        d_opt = _make_optimizer(discriminator, cfg.d_lr or cfg.lr, cfg)
        _load_optimizer(d_opt, arrays, "d_opt")

    rng = torch.Generator()
    rng.set_state(arrays["rng_state"])
    return TrainState(
        config=cfg,
        generator=generator,
        g_opt=g_opt,
        rng=rng,
        step=meta["step"],
        discriminator=discriminator,
        d_opt=d_opt,
        recent=list(meta.get("recent", [])),
        data_meta=meta.get("data"),
    )


def load_generator(path) -> tuple:
    """Load a generator for synthesis: (model, config, analysis metadata)."""
    arrays, meta = load_archive(path)
    if meta.get("kind") != "train_state":
        raise CheckpointError(f"{path} is not a training checkpoint")
    generator = _generator_from_hyperparams(meta["generator"])
    generator.load_state_dict({k[2:]: v for k, v in arrays.items() if k.startswith("g.")})
    generator.eval()
    return generator, TrainConfig.from_dict(meta["config"]), meta.get("data")


def _sample_batch(buffers, dataset: DatasetSpec, batch_size: int, rng: torch.Generator):
    segments, conditions = [], []
    for _ in range(batch_size):
        idx = int(torch.randint(len(buffers), (1,), generator=rng))
        example = sample_segment(buffers[idx], dataset, rng)
        segments.append(example.segment.samples)
        conditions.append(example.condition.values)
    return torch.stack(segments), torch.stack(conditions)


def _append_log(out_dir: Path, record: dict) -> None:
    with open(out_dir / LOG_NAME, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _halt_diverged(state: TrainState, out_dir: Path, reason: str) -> None:
    ckpt = out_dir / f"{state.config.stage}_diverged_step{state.step:06d}.ckpt"
    save_checkpoint(state, ckpt)
    raise TrainingDiverged(f"{reason} at step {state.step}; diagnostic checkpoint: {ckpt}")


def _maybe_periodic_checkpoint(state: TrainState, out_dir: Path) -> None:
    every = state.config.checkpoint_every
    if every and state.step % every == 0:
        save_checkpoint(state, out_dir / f"{state.config.stage}_step{state.step:06d}.ckpt")


def pretrain_fm(cfg: TrainConfig, dataset: DatasetSpec, out_dir, resume=None) -> Path:
    """Stage 1: regress the vector field with the CFM objective.

    Runs until cfg.steps total steps (so a resumed run finishes the same
    budget) and returns the final checkpoint path.
    """
    if cfg.stage != "fm":
        raise ConfigError(f"pretrain_fm needs stage=fm, got {cfg.stage!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        state = load_checkpoint(resume)
        if state.config.stage != "fm":
            raise CheckpointError("resume checkpoint is not a stage-1 state")
        cfg = state.config
    else:
        generator = build_generator(cfg, dataset.mel.n_mels, dataset.stft.hop_size)
        rng = torch.Generator().manual_seed(cfg.seed)
        state = TrainState(
            cfg,
            generator,
            _make_optimizer(generator, cfg.lr, cfg),
            rng,
            data_meta=dataset.analysis_meta(),
        )

    path = ProbabilityPath(sigma_min=cfg.sigma_min)
    buffers = dataset.load_split("train")
    state.generator.train()

    while state.step < cfg.steps:
        started = time.perf_counter()
        x1, cond = _sample_batch(buffers, dataset, cfg.batch_size, state.rng)
        loss = cfm_loss(state.generator, path, x1, cond, state.rng)
        if not torch.isfinite(loss):
            _halt_diverged(state, out_dir, "non-finite CFM loss")
        state.g_opt.zero_grad(set_to_none=True)
        loss.backward()
        state.g_opt.step()
        state.step += 1
        state.note_loss(float(loss.detach()))
        _append_log(
            out_dir,
            {
                "stage": "fm",
                "step": state.step,
                "loss": float(loss.detach()),
                "wall_s": time.perf_counter() - started,
            },
        )
        _maybe_periodic_checkpoint(state, out_dir)

    final = out_dir / "fm_final.ckpt"
    save_checkpoint(state, final)
    return final


def finetune_turbo(cfg: TrainConfig, dataset: DatasetSpec, out_dir, teacher=None, resume=None) -> Path:
    """Stage 2: adversarial fine-tuning of the fixed few-step generator."""
    if cfg.stage != "turbo":
        raise ConfigError(f"finetune_turbo needs stage=turbo, got {cfg.stage!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        state = load_checkpoint(resume)
        if state.config.stage != "turbo":
            raise CheckpointError("resume checkpoint is not a stage-2 state")
        cfg = state.config
    else:
        if cfg.init == "from_checkpoint":
            if teacher is None:
                raise ConfigError(
                    "turbo stage needs a teacher checkpoint unless init=scratch is set explicitly"
                )
            generator, _, _ = load_generator(teacher)
        else:
            generator = build_generator(cfg, dataset.mel.n_mels, dataset.stft.hop_size)
        discriminator = build_discriminator(cfg, dataset.sample_rate)
        rng = torch.Generator().manual_seed(cfg.seed)
        state = TrainState(
            cfg,
            generator,
            _make_optimizer(generator, cfg.lr, cfg),
            rng,
            discriminator=discriminator,
            d_opt=_make_optimizer(discriminator, cfg.d_lr or cfg.lr, cfg),
            data_meta=dataset.analysis_meta(),
        )

    mel_bank = MultiScaleMelSpec.default(dataset.sample_rate)
    buffers = dataset.load_split("train")
    state.generator.train()
    state.discriminator.train()
    gen = state.generator
    ens = state.discriminator

    while state.step < cfg.steps:
        started = time.perf_counter()
        x1, cond = _sample_batch(buffers, dataset, cfg.batch_size, state.rng)
        x0 = torch.randn(x1.shape, generator=state.rng)
        x_hat = fixed_step_generate(gen, x0, cond, cfg.n_steps)
        if not torch.isfinite(x_hat).all():
            _halt_diverged(state, out_dir, "non-finite generator output")

        if cfg.use_gan:
            fake_detached = x_hat.detach()
            real_outs = ens(x1)
            fake_outs = ens(fake_detached)
            d_loss = adv_d_loss_from_scores(
                [o.score for o in real_outs], [o.score for o in fake_outs]
            )
            if not torch.isfinite(d_loss):
                _halt_diverged(state, out_dir, "non-finite discriminator loss")
            state.d_opt.zero_grad(set_to_none=True)
            d_loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(ens.parameters(), cfg.grad_clip)
            state.d_opt.step()

            fake_outs = ens(x_hat)
            with torch.no_grad():
                real_outs = ens(x1)
            adv_g = adv_g_loss_from_scores([o.score for o in fake_outs])
            fm = feature_matching_loss(real_outs, fake_outs)
        else:
            d_loss = torch.tensor(0.0)
            adv_g = torch.tensor(0.0)
            fm = torch.tensor(0.0)

        if cfg.mel_variant == "multi":
            mel = multiscale_mel_loss(x1, x_hat, mel_bank)
        elif cfg.mel_variant == "mstft":
            mel = multiscale_stft_loss(x1, x_hat, mel_bank)
        else:
            mel = mel_loss(x1, x_hat, dataset.stft, dataset.mel, sample_rate=dataset.sample_rate)

        try:
            total = final_generator_loss(adv_g, fm, mel, cfg.weights)
        except TrainingDiverged as exc:
            _halt_diverged(state, out_dir, str(exc))
        state.g_opt.zero_grad(set_to_none=True)
        total.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(gen.parameters(), cfg.grad_clip)
        state.g_opt.step()

        state.step += 1
        state.note_loss(float(total.detach()))
        _append_log(
            out_dir,
            {
                "stage": "turbo",
                "step": state.step,
                "d_loss": float(d_loss.detach()),
                "adv_g": float(adv_g.detach()),
                "fm": float(fm.detach()),
                "mel": float(mel.detach()),
                "total": float(total.detach()),
                "wall_s": time.perf_counter() - started,
            },
        )
        _maybe_periodic_checkpoint(state, out_dir)

    final = out_dir / "turbo_final.ckpt"
    save_checkpoint(state, final)
    return final


def copy_synthesize(
    generator: VectorFieldEstimator,
    audio: AudioBuffer,
    stft: StftConfig,
    mel: MelConfig,
    grid: TimeGrid,
    rng: torch.Generator,
) -> AudioBuffer:
    """Reconstruct a clip from its own mel condition (trimmed hop-aligned)."""
    hop = stft.hop_size
    usable = (len(audio) // hop) * hop
    segment = AudioBuffer(audio.samples[:usable], audio.sample_rate)
    condition = mel_spectrogram(segment, stft, mel)
    x0 = torch.randn(usable, generator=rng)
    with torch.no_grad():
        out = ode_sample(generator, x0, condition, grid)
    return AudioBuffer(out, audio.sample_rate)


def read_log(out_dir) -> list:
    """Load a training log as a list of dicts (empty if absent)."""
    path = Path(out_dir) / LOG_NAME
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line]
