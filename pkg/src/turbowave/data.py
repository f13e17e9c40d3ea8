"""Corpus handling: WAV I/O, segment sampling, and a synthetic toy corpus.

The toy corpus generates amplitude-modulated harmonic stacks with known
fundamentals so the whole two-stage recipe — and its pitch metrics — can run
on a laptop CPU in minutes.  Real corpora are just directories of WAVs with
newline-delimited split manifests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile
from scipy.signal import resample_poly

from .config import format_flat, parse_flat, parse_scalar
from .errors import ConfigError, DataError
from .signal import AudioBuffer, MelConfig, MelSpectrogram, StftConfig, mel_spectrogram

CORPUS_CONFIG_NAME = "corpus.cfg"
SPLIT_NAMES = ("train", "dev", "test")


def load_audio(path, sample_rate: int | None = None) -> AudioBuffer:
    """Read a PCM16/float WAV as mono float32 in [-1, 1].

    Multichannel files keep only the first channel.  If sample_rate is given
    and differs from the file's, the audio is resampled with a linear-phase
    polyphase filter.
    """
    try:
        native_rate, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read WAV {path}: {exc}") from exc
    if data.ndim > 1:
        data = data[:, 0]
    if data.size == 0:
        raise DataError(f"empty WAV {path}")
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float32) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float32)
    else:
        raise DataError(f"unsupported WAV sample format {data.dtype} in {path}")
    if sample_rate is not None and sample_rate != native_rate:
        g = np.gcd(int(native_rate), int(sample_rate))
        samples = resample_poly(samples.astype(np.float64), sample_rate // g, native_rate // g)
        samples = samples.astype(np.float32)
        native_rate = sample_rate
    return AudioBuffer(torch.from_numpy(np.ascontiguousarray(samples)), int(native_rate))


def save_audio(path, audio: AudioBuffer, fmt: str = "float32") -> None:
    """Write an AudioBuffer as a WAV file (float32 or pcm16)."""
    samples = audio.samples.detach().cpu().numpy()
    if fmt == "float32":
        wavfile.write(path, audio.sample_rate, samples.astype(np.float32))
    elif fmt == "pcm16":
        # quantize on the same /32768 scale the loader uses so a round trip
        # stays within one LSB
        clipped = np.clip(samples, -1.0, 1.0)
        ints = np.clip(np.round(clipped * 32768.0), -32768, 32767)
        wavfile.write(path, audio.sample_rate, ints.astype(np.int16))
    else:
        raise ConfigError(f"unsupported WAV format {fmt!r}; use float32 or pcm16")


@dataclass
class TrainingExample:
    """One (segment, mel condition) pair for either training stage."""

    segment: AudioBuffer
    condition: MelSpectrogram

    def __post_init__(self):
        hop = self.condition.stft_config.hop_size
        if self.condition.frames * hop != len(self.segment):
            raise DataError(
                f"condition frames x hop ({self.condition.frames} x {hop}) "
                f"!= segment length {len(self.segment)}"
            )
        peak = float(self.segment.samples.abs().max())
        if peak > 1.0:
            raise DataError(f"segment amplitude {peak} outside [-1, 1]")


@dataclass
class DatasetSpec:
    """A corpus on disk: sample rate, analysis configs, and split manifests."""

    root: Path
    sample_rate: int
    stft: StftConfig
    mel: MelConfig
    segment_length: int = 32768
    splits: dict = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)
        if self.segment_length % self.stft.hop_size:
            raise ConfigError(
                f"segment_length {self.segment_length} must be a multiple of "
                f"hop_size {self.stft.hop_size}"
            )

    def split_paths(self, split: str) -> list:
        if split not in self.splits:
            raise ConfigError(f"unknown split {split!r}; have {sorted(self.splits)}")
        return [self.root / rel for rel in self.splits[split]]

    def analysis_meta(self) -> dict:
        """JSON-safe record of the analysis configs, for checkpoints."""
        return {
            "sample_rate": self.sample_rate,
            "segment_length": self.segment_length,
            "stft": {
                "n_fft": self.stft.n_fft,
                "hop_size": self.stft.hop_size,
                "win_size": self.stft.win_size,
                "window": self.stft.window,
            },
            "mel": {
                "n_mels": self.mel.n_mels,
                "f_min": self.mel.f_min,
                "f_max": self.mel.f_max,
                "log_floor": self.mel.log_floor,
            },
        }

    def load_split(self, split: str) -> list:
        return [load_audio(p, sample_rate=self.sample_rate) for p in self.split_paths(split)]

    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        record = {
            "sample_rate": self.sample_rate,
            "segment_length": self.segment_length,
            "stft.n_fft": self.stft.n_fft,
            "stft.hop_size": self.stft.hop_size,
            "stft.win_size": self.stft.win_size,
            "stft.window": self.stft.window,
            "mel.n_mels": self.mel.n_mels,
            "mel.f_min": self.mel.f_min,
            "mel.f_max": self.mel.f_max,
            "mel.log_floor": self.mel.log_floor,
        }
        (self.root / CORPUS_CONFIG_NAME).write_text(format_flat(record))
        for split, rels in self.splits.items():
            (self.root / f"{split}.txt").write_text("".join(f"{r}\n" for r in rels))

    @classmethod
    def load(cls, root) -> "DatasetSpec":
        root = Path(root)
        cfg_path = root / CORPUS_CONFIG_NAME
        if not cfg_path.exists():
            raise DataError(f"no {CORPUS_CONFIG_NAME} under {root}")
        raw = {k: parse_scalar(v) for k, v in parse_flat(cfg_path.read_text()).items()}
        stft = StftConfig(
            n_fft=raw["stft.n_fft"],
            hop_size=raw["stft.hop_size"],
            win_size=raw["stft.win_size"],
            window=raw["stft.window"],
        )
        mel = MelConfig(
            n_mels=raw["mel.n_mels"],
            f_min=raw["mel.f_min"],
            f_max=raw["mel.f_max"],
            log_floor=raw["mel.log_floor"],
        )
        splits = {}
        for split in SPLIT_NAMES:
            manifest = root / f"{split}.txt"
            if manifest.exists():
                splits[split] = [line for line in manifest.read_text().splitlines() if line]
        return cls(
            root=root,
            sample_rate=raw["sample_rate"],
            stft=stft,
            mel=mel,
            segment_length=raw["segment_length"],
            splits=splits,
        )


def analysis_from_meta(meta: dict) -> tuple:
    """Rebuild ``(sample_rate, StftConfig, MelConfig)`` from analysis metadata.

    Inverse of :meth:`DatasetSpec.analysis_meta`, used to condition a loaded
    generator without access to the original corpus directory.
    """
    try:
        stft = StftConfig(
            n_fft=int(meta["stft"]["n_fft"]),
            hop_size=int(meta["stft"]["hop_size"]),
            win_size=int(meta["stft"]["win_size"]),
            window=str(meta["stft"]["window"]),
        )
        f_max = meta["mel"]["f_max"]
        mel = MelConfig(
            n_mels=int(meta["mel"]["n_mels"]),
            f_min=float(meta["mel"]["f_min"]),
            f_max=None if f_max is None else float(f_max),
            log_floor=float(meta["mel"]["log_floor"]),
        )
        sample_rate = int(meta["sample_rate"])
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed analysis metadata: missing {exc}") from exc
    return sample_rate, stft, mel


def sample_segment(audio: AudioBuffer, spec: DatasetSpec, rng: torch.Generator) -> TrainingExample:
    """Cut a uniformly random hop-aligned segment and compute its condition.

    Clips shorter than the segment length are zero-padded at the tail; the
    mel condition is always computed from the final segment so the pair stays
    consistent by construction.
    """
    hop = spec.stft.hop_size
    seg_len = spec.segment_length
    samples = audio.samples
    if len(samples) >= seg_len:
        max_offset = (len(samples) - seg_len) // hop
        offset = int(torch.randint(0, max_offset + 1, (1,), generator=rng)) * hop
        segment = samples[offset : offset + seg_len]
    else:
        segment = torch.cat([samples, torch.zeros(seg_len - len(samples))])
    buf = AudioBuffer(segment, spec.sample_rate)
    condition = mel_spectrogram(buf, spec.stft, spec.mel)
    return TrainingExample(segment=buf, condition=condition)


def _toy_item(rng: np.random.Generator, n_samples: int, sample_rate: int) -> np.ndarray:
    """One synthetic clip: an AM harmonic stack over a quiet noise floor."""
    f0 = rng.uniform(80.0, 400.0)
    n_harmonics = int(rng.integers(1, 9))
    am_rate = rng.uniform(1.0, 6.0)
    am_phase = rng.uniform(0, 2 * np.pi)
    phases = rng.uniform(0, 2 * np.pi, size=n_harmonics)
    t = np.arange(n_samples) / sample_rate
    wave = np.zeros(n_samples)
    for k in range(1, n_harmonics + 1):
        if k * f0 >= sample_rate / 2:
            break
        wave += np.sin(2 * np.pi * k * f0 * t + phases[k - 1]) / k
    wave *= 1.0 + 0.3 * np.sin(2 * np.pi * am_rate * t + am_phase)
    wave += 10 ** (-40 / 20) * rng.standard_normal(n_samples)  # -40 dB floor
    peak = np.max(np.abs(wave))
    return (0.8 * wave / peak).astype(np.float32)


def make_toy_corpus(
    root,
    n_items: int = 64,
    duration: float = 2.0,
    sample_rate: int = 8000,
    seed: int = 0,
    stft: StftConfig | None = None,
    mel: MelConfig | None = None,
    segment_length: int = 2048,
) -> DatasetSpec:
    """Generate a deterministic harmonic-stack corpus with split manifests."""
    root = Path(root)
    try:
        (root / "wav").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create corpus directory {root}: {exc}") from exc
    if stft is None:
        stft = StftConfig(n_fft=512, hop_size=128, win_size=512)
    if mel is None:
        mel = MelConfig(n_mels=40)

    rng = np.random.default_rng(seed)
    n_samples = int(round(duration * sample_rate))
    rels = []
    for i in range(n_items):
        wave = _toy_item(rng, n_samples, sample_rate)
        rel = f"wav/item_{i:04d}.wav"
        wavfile.write(root / rel, sample_rate, wave)
        rels.append(rel)

    n_eval = max(2, n_items // 16)
    splits = {
        "train": rels[: n_items - 2 * n_eval],
        "dev": rels[n_items - 2 * n_eval : n_items - n_eval],
        "test": rels[n_items - n_eval :],
    }
    spec = DatasetSpec(
        root=root,
        sample_rate=sample_rate,
        stft=stft,
        mel=mel,
        segment_length=segment_length,
        splits=splits,
    )
    spec.save()
    return spec
