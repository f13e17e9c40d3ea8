"""Differentiable audio transforms: STFT, Mel projection, CQT, period folding.

Everything here is a pure function of its inputs. Waveform arguments accept
either an :class:`AudioBuffer` or a raw tensor shaped ``(..., samples)``, so
the same code paths serve single clips and training batches. All transforms
are differentiable with respect to the samples.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F

from .errors import ConfigError, DataError, LengthError

DEFAULT_LOG_FLOOR = 1e-5

_WINDOWS = ("hann", "rect")


def as_samples(audio) -> torch.Tensor:
    """Return the sample tensor behind an AudioBuffer, tensor, or array-like."""
    if isinstance(audio, AudioBuffer):
        return audio.samples
    if isinstance(audio, torch.Tensor):
        return audio
    t = torch.as_tensor(audio)
    return t.float() if not t.is_floating_point() else t


@dataclass
class AudioBuffer:
    """Mono waveform samples plus their sample rate.

    Samples are a 1-D float tensor, nominally in [-1, 1].
    """

    samples: torch.Tensor
    sample_rate: int

    def __post_init__(self):
        if not isinstance(self.samples, torch.Tensor):
            self.samples = as_samples(self.samples)
        if self.samples.ndim != 1:
            raise DataError(f"expected 1-D samples, got shape {tuple(self.samples.shape)}")
        if self.samples.numel() < 1:
            raise DataError("audio must contain at least one sample")
        if not torch.isfinite(self.samples).all():
            raise DataError("audio contains non-finite samples")
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.shape[-1]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    """Framing parameters for the short-time Fourier transform.

    Signals are reflect-padded by ``(n_fft - hop_size) // 2`` on each side
    before framing, so a hop-aligned input of length L yields exactly
    ``L // hop_size`` frames when ``win_size == n_fft`` (the usual vocoder
    alignment between mel frames and samples).
    """

    n_fft: int = 1024
    hop_size: int = 256
    win_size: int = 1024
    window: str = "hann"

    def __post_init__(self):
        if not (0 < self.hop_size <= self.win_size <= self.n_fft):
            raise ConfigError(
                f"need 0 < hop_size <= win_size <= n_fft, got "
                f"hop={self.hop_size} win={self.win_size} fft={self.n_fft}"
            )
        if self.window not in _WINDOWS:
            raise ConfigError(f"unknown window {self.window!r}; choose from {_WINDOWS}")

    @property
    def pad(self) -> int:
        """Reflect padding applied to each side before framing."""
        return (self.n_fft - self.hop_size) // 2

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def frame_count(self, length: int) -> int:
        """Number of frames produced for an input of ``length`` samples."""
        return (length + 2 * self.pad - self.win_size) // self.hop_size + 1


@dataclass(frozen=True)
class MelConfig:
    """Mel filterbank parameters. ``f_max=None`` means the Nyquist frequency."""

    n_mels: int = 80
    f_min: float = 0.0
    f_max: float | None = None
    log_floor: float = DEFAULT_LOG_FLOOR

    def __post_init__(self):
        if self.n_mels < 1:
            raise ConfigError(f"n_mels must be >= 1, got {self.n_mels}")
        if self.f_min < 0:
            raise ConfigError(f"f_min must be >= 0, got {self.f_min}")
        if self.f_max is not None and self.f_max <= self.f_min:
            raise ConfigError(f"need f_min < f_max, got [{self.f_min}, {self.f_max}]")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")


@dataclass(frozen=True)
class CqtConfig:
    """Constant-Q analysis parameters.

    ``scales`` lists the hop sizes of the resolution variants used by the
    multi-scale discriminator; ``hop_size`` is the hop of this config itself.
    """

    f_min: float = 32.703195  # C1
    octaves: int = 6
    bins_per_octave: int = 12
    hop_size: int = 256
    scales: tuple[int, ...] = (256, 512, 1024)

    def __post_init__(self):
        if self.f_min <= 0:
            raise ConfigError("f_min must be positive")
        if self.octaves < 1 or self.bins_per_octave < 1:
            raise ConfigError("octaves and bins_per_octave must be >= 1")
        if self.hop_size < 1:
            raise ConfigError("hop_size must be >= 1")
        if any(s < 1 for s in self.scales):
            raise ConfigError("every scale hop must be >= 1")

    @property
    def n_bins(self) -> int:
        return self.octaves * self.bins_per_octave

    def variants(self) -> list["CqtConfig"]:
        """One config per resolution scale, differing only in hop size."""
        return [replace(self, hop_size=s) for s in self.scales]


@dataclass
class ComplexSpectrogram:
    values: torch.Tensor  # (..., bins, frames), complex
    config: StftConfig

    @property
    def magnitude(self) -> torch.Tensor:
        return self.values.abs()


@dataclass
class MelSpectrogram:
    values: torch.Tensor  # (..., n_mels, frames), log-compressed
    stft_config: StftConfig
    mel_config: MelConfig

    @property
    def frames(self) -> int:
        return self.values.shape[-1]


@dataclass
class CqtSpectrogram:
    values: torch.Tensor  # (..., bins, frames), log-compressed
    config: CqtConfig


@functools.lru_cache(maxsize=64)
def _window_tensor(window: str, win_size: int, dtype: torch.dtype) -> torch.Tensor:
    if window == "rect":
        return torch.ones(win_size, dtype=dtype)
    return torch.hann_window(win_size, periodic=True, dtype=dtype)


def _frame(y: torch.Tensor, cfg: StftConfig) -> torch.Tensor:
    """Reflect-pad and slice into overlapping frames of win_size samples."""
    length = y.shape[-1]
    pad = cfg.pad
    if length + 2 * pad < cfg.win_size:
        raise LengthError(
            f"input of {length} samples is shorter than win_size={cfg.win_size} after padding"
        )
    if pad > 0:
        if pad > length - 1:
            raise LengthError(
                f"input of {length} samples too short for reflect padding of {pad}"
            )
        lead = y.shape[:-1]
        y = F.pad(y.reshape(1, -1, length), (pad, pad), mode="reflect")
        y = y.reshape(*lead, length + 2 * pad)
    return y.unfold(-1, cfg.win_size, cfg.hop_size)


def stft(audio, cfg: StftConfig) -> ComplexSpectrogram:
    """Short-time Fourier transform of a waveform.

    Returns a complex spectrogram shaped ``(..., n_fft // 2 + 1, frames)``
    where the frame count follows :meth:`StftConfig.frame_count`.
    """
    y = as_samples(audio)
    if not torch.isfinite(y).all():
        raise DataError("refusing to transform non-finite samples")
    frames = _frame(y, cfg)
    win = _window_tensor(cfg.window, cfg.win_size, y.dtype)
    spec = torch.fft.rfft(frames * win, n=cfg.n_fft)
    return ComplexSpectrogram(spec.transpose(-2, -1), cfg)


def _hz_to_mel(f):
    return 2595.0 * math.log10(1.0 + f / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


def _triangle_bank(sample_rate: int, n_fft: int, n_mels: int, f_min: float, f_max: float) -> torch.Tensor:
    freqs = torch.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1, dtype=torch.float64)
    pts = torch.tensor(
        [_mel_to_hz(m) for m in torch.linspace(_hz_to_mel(f_min), _hz_to_mel(f_max), n_mels + 2).tolist()],
        dtype=torch.float64,
    )
    lower, center, upper = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    rising = (freqs[None, :] - lower) / torch.clamp(center - lower, min=1e-12)
    falling = (upper - freqs[None, :]) / torch.clamp(upper - center, min=1e-12)
    return torch.clamp(torch.minimum(rising, falling), min=0.0)


@functools.lru_cache(maxsize=128)
def _mel_filterbank_cached(sample_rate, n_fft, n_mels, f_min, f_max, dtype):
    bank = _triangle_bank(sample_rate, n_fft, n_mels, f_min, f_max)
    empty = (bank.sum(dim=1) == 0).nonzero().flatten().tolist()
    if empty:
        raise ConfigError(
            f"mel filterbank with {n_mels} filters over {n_fft // 2 + 1} bins leaves "
            f"filters {empty} empty; reduce n_mels (see max_feasible_mels)"
        )
    return bank.to(dtype)


def mel_filterbank(sample_rate: int, n_fft: int, mel: MelConfig, dtype=torch.float32) -> torch.Tensor:
    """Triangular mel filterbank, shape ``(n_mels, n_fft // 2 + 1)``.

    Every row is non-negative and contains at least one positive entry;
    configurations that would produce an empty filter raise ConfigError.
    """
    f_max = sample_rate / 2.0 if mel.f_max is None else float(mel.f_max)
    if f_max > sample_rate / 2.0 + 1e-9:
        raise ConfigError(f"f_max={f_max} exceeds Nyquist {sample_rate / 2.0}")
    return _mel_filterbank_cached(sample_rate, n_fft, mel.n_mels, float(mel.f_min), f_max, dtype)


def max_feasible_mels(sample_rate: int, n_fft: int, f_min: float = 0.0, f_max: float | None = None, ceiling: int = 80) -> int:
    """Largest filter count <= ceiling for which no mel filter ends up empty."""
    f_hi = sample_rate / 2.0 if f_max is None else float(f_max)
    for n in range(min(ceiling, n_fft // 2 + 1), 0, -1):
        bank = _triangle_bank(sample_rate, n_fft, n, f_min, f_hi)
        if bool((bank.sum(dim=1) > 0).all()):
            return n
    raise ConfigError(f"no feasible mel filter count for n_fft={n_fft} at {sample_rate} Hz")


def mel_spectrogram(audio, cfg: StftConfig, mel: MelConfig, sample_rate: int | None = None) -> MelSpectrogram:
    """Log-compressed mel spectrogram: ``log(max(filterbank @ |STFT|, log_floor))``."""
    y = as_samples(audio)
    if sample_rate is None:
        if not isinstance(audio, AudioBuffer):
            raise ConfigError("sample_rate is required when audio is a raw tensor")
        sample_rate = audio.sample_rate
    mag = stft(y, cfg).magnitude
    bank = mel_filterbank(sample_rate, cfg.n_fft, mel, dtype=y.dtype)
    values = torch.log(torch.clamp(torch.matmul(bank, mag), min=mel.log_floor))
    return MelSpectrogram(values, cfg, mel)


@functools.lru_cache(maxsize=32)
def _cqt_kernels(sample_rate, f_min, octaves, bins_per_octave, dtype):
    """Complex kernel bank as (real, imag) matrices of shape (bins, max_len)."""
    top = f_min * 2.0 ** octaves
    if top > sample_rate / 2.0 + 1e-9:
        raise ConfigError(
            f"CQT range f_min*2^octaves = {top:.1f} Hz exceeds Nyquist {sample_rate / 2.0} Hz"
        )
    q = 1.0 / (2.0 ** (1.0 / bins_per_octave) - 1.0)
    n_bins = octaves * bins_per_octave
    freqs = [f_min * 2.0 ** (k / bins_per_octave) for k in range(n_bins)]
    lengths = [max(2, int(round(q * sample_rate / f))) for f in freqs]
    n_max = max(lengths)
    real = torch.zeros(n_bins, n_max, dtype=torch.float64)
    imag = torch.zeros(n_bins, n_max, dtype=torch.float64)
    for k, (f, n_k) in enumerate(zip(freqs, lengths)):
        start = (n_max - n_k) // 2
        n = torch.arange(n_k, dtype=torch.float64)
        win = torch.hann_window(n_k, periodic=False, dtype=torch.float64)
        phase = 2.0 * math.pi * f * (n - (n_k - 1) / 2.0) / sample_rate
        real[k, start : start + n_k] = win * torch.cos(phase) / n_k
        imag[k, start : start + n_k] = win * torch.sin(phase) / n_k
    return real.to(dtype), imag.to(dtype), n_max


def cqt_center_frequencies(cfg: CqtConfig) -> list[float]:
    return [cfg.f_min * 2.0 ** (k / cfg.bins_per_octave) for k in range(cfg.n_bins)]


def cqt(audio, cfg: CqtConfig, sample_rate: int | None = None) -> CqtSpectrogram:
    """Log-magnitude constant-Q transform via direct kernel-bank inner products.

    Center frequencies are geometrically spaced at ``f_min * 2^(k/bins_per_octave)``.
    The signal is zero-padded so frames are centered on hop positions.
    """
    y = as_samples(audio)
    if sample_rate is None:
        if not isinstance(audio, AudioBuffer):
            raise ConfigError("sample_rate is required when audio is a raw tensor")
        sample_rate = audio.sample_rate
    if not torch.isfinite(y).all():
        raise DataError("refusing to transform non-finite samples")
    real, imag, n_max = _cqt_kernels(
        sample_rate, float(cfg.f_min), cfg.octaves, cfg.bins_per_octave, y.dtype
    )
    pad = n_max // 2
    frames = F.pad(y, (pad, pad)).unfold(-1, n_max, cfg.hop_size)
    re = torch.matmul(frames, real.transpose(0, 1))
    im = torch.matmul(frames, imag.transpose(0, 1))
    mag = torch.sqrt(re * re + im * im + 1e-24)
    values = torch.log(torch.clamp(mag, min=DEFAULT_LOG_FLOOR)).transpose(-2, -1)
    return CqtSpectrogram(values, cfg)


def reshape_periods(audio, period: int) -> torch.Tensor:
    """Fold a waveform into a ``(..., period, ceil(len/period))`` grid.

    Sample i lands at row ``i % period``, column ``i // period``; the tail is
    zero-padded so the fold is exactly invertible via :func:`unfold_periods`.
    """
    if not isinstance(period, int) or period < 1:
        raise ConfigError(f"period must be a positive integer, got {period!r}")
    y = as_samples(audio)
    length = y.shape[-1]
    cols = -(-length // period)
    shortfall = cols * period - length
    if shortfall:
        y = F.pad(y, (0, shortfall))
    return y.reshape(*y.shape[:-1], cols, period).transpose(-2, -1)


def unfold_periods(grid: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`reshape_periods`, including any zero padding."""
    flat = grid.transpose(-2, -1)
    return flat.reshape(*flat.shape[:-2], -1)
