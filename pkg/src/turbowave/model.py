"""Period-aware vector-field generator and the discriminator ensemble.

The generator is a time-conditioned network whose hidden features are folded
into (period, length/period) grids and processed with 2-D convolutions, one
branch per prime period — the same inductive bias the waveform discriminators
use, applied to vector-field estimation.  The ensemble pairs those per-period
waveform discriminators with sub-band discriminators that operate on
constant-Q spectrograms at three hop scales.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, LengthError, ShapeError
from .signal import CqtConfig, StftConfig, as_samples, cqt, reshape_periods

DEFAULT_PERIODS = (2, 3, 5, 7, 11)
_LRELU_SLOPE = 0.1


@dataclass(frozen=True)
class ModelScale:
    """Width preset for the generator: hidden width and pre-output width."""

    name: str
    hidden_dim: int
    final_dim: int

    def __post_init__(self):
        if not (self.hidden_dim >= self.final_dim >= 1):
            raise ConfigError(
                f"need hidden_dim >= final_dim >= 1, got ({self.hidden_dim}, {self.final_dim})"
            )

    @classmethod
    def tiny(cls) -> "ModelScale":
        return cls("tiny", 32, 4)

    @classmethod
    def small(cls) -> "ModelScale":
        return cls("small", 256, 16)

    @classmethod
    def base(cls) -> "ModelScale":
        return cls("base", 512, 32)

    @classmethod
    def large(cls) -> "ModelScale":
        return cls("large", 768, 48)

    @classmethod
    def from_name(cls, name: str) -> "ModelScale":
        presets = {p.name: p for p in (cls.tiny(), cls.small(), cls.base(), cls.large())}
        if name not in presets:
            raise ConfigError(f"unknown model scale {name!r}; choose from {sorted(presets)}")
        return presets[name]


class SinusoidalTimeEmbedding(nn.Module):
    """Classic sin/cos embedding of a scalar diffusion/flow time."""

    def __init__(self, dim: int, max_period: float = 10_000.0):
        super().__init__()
        if dim < 2 or dim % 2:
            raise ConfigError("time embedding dim must be even and >= 2")
        self.dim = dim
        half = dim // 2
        exponents = torch.arange(half, dtype=torch.float32) / max(half - 1, 1)
        self.register_buffer("freqs", max_period ** (-exponents), persistent=False)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.float32).reshape(-1)
        angles = t[:, None] * self.freqs[None, :] * 2 * math.pi
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


def _fold_features(h: torch.Tensor, period: int) -> tuple[torch.Tensor, int]:
    """Fold (B, C, L) features into (B, C, period, ceil(L/period)) grids."""
    b, c, length = h.shape
    remainder = (-length) % period
    if remainder:
        h = F.pad(h, (0, remainder))
    cols = h.shape[-1] // period
    return h.reshape(b, c, cols, period).transpose(-2, -1), remainder


def _unfold_features(grid: torch.Tensor, trim: int) -> torch.Tensor:
    b, c, period, cols = grid.shape
    flat = grid.transpose(-2, -1).reshape(b, c, period * cols)
    return flat[..., : period * cols - trim] if trim else flat


class PeriodBranch(nn.Module):
    """Residual 2-D convolution stack over one period fold of the features."""

    def __init__(self, channels: int, period: int):
        super().__init__()
        self.period = period
        self.conv_a = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.conv_b = nn.Conv2d(channels, channels, kernel_size=3, padding=1)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        grid, trim = _fold_features(h, self.period)
        out = self.conv_a(F.leaky_relu(grid, _LRELU_SLOPE))
        out = self.conv_b(F.leaky_relu(out, _LRELU_SLOPE))
        return _unfold_features(grid + out, trim)


class VectorFieldEstimator(nn.Module):
    """Conditional vector-field network u(x_t, c, t) over raw waveforms.

    The mel conditioning c is upsampled to sample rate by frame repetition and
    concatenated with x_t at the input; t enters as a per-channel bias from a
    sinusoidal embedding; per-period branches are averaged back together
    before the output head.
    """

    def __init__(
        self,
        scale: ModelScale,
        n_mels: int,
        periods: Sequence[int] = DEFAULT_PERIODS,
        conditioning_hop: int = 256,
    ):
        super().__init__()
        if not periods or any(p < 1 for p in periods):
            raise ConfigError("periods must be positive integers")
        if conditioning_hop < 1:
            raise ConfigError("conditioning_hop must be positive")
        self.scale = scale
        self.n_mels = n_mels
        self.periods = tuple(int(p) for p in periods)
        self.conditioning_hop = conditioning_hop

        hidden = scale.hidden_dim
        self.time_embed = SinusoidalTimeEmbedding(hidden)
        self.time_proj = nn.Linear(hidden, hidden)
        self.input_conv = nn.Conv1d(1 + n_mels, hidden, kernel_size=7, padding=3)
        self.encoder = nn.Conv1d(hidden, hidden, kernel_size=7, padding=3)
        self.branches = nn.ModuleList(PeriodBranch(hidden, p) for p in self.periods)
        self.head_a = nn.Conv1d(hidden, scale.final_dim, kernel_size=7, padding=3)
        self.head_b = nn.Conv1d(scale.final_dim, 1, kernel_size=7, padding=3)

    def hyperparams(self) -> dict:
        return {
            "scale": self.scale.name,
            "hidden_dim": self.scale.hidden_dim,
            "final_dim": self.scale.final_dim,
            "n_mels": self.n_mels,
            "periods": list(self.periods),
            "conditioning_hop": self.conditioning_hop,
        }

    def forward(self, x_t, c, t) -> torch.Tensor:
        x = as_samples(x_t)
        squeeze_batch = x.dim() == 1
        if squeeze_batch:
            x = x[None, :]
        if x.dim() != 2:
            raise ShapeError(f"expected 1-D or (batch, length) input, got {tuple(x.shape)}")

        if torch.is_tensor(c):
            cond = c
        elif torch.is_tensor(getattr(c, "values", None)):
            cond = c.values
        else:
            cond = torch.as_tensor(c)
        if cond.dim() == 2:
            cond = cond[None].expand(x.shape[0], -1, -1)
        if cond.dim() != 3 or cond.shape[1] != self.n_mels:
            raise ShapeError(f"conditioning must be ({self.n_mels}, frames), got {tuple(cond.shape)}")
        length = x.shape[-1]
        if length != cond.shape[-1] * self.conditioning_hop:
            raise ShapeError(
                f"input length {length} != frames {cond.shape[-1]} x hop {self.conditioning_hop}"
            )

        cond_up = cond.repeat_interleave(self.conditioning_hop, dim=-1)
        h = self.input_conv(torch.cat([x[:, None, :], cond_up], dim=1))

        t_vec = torch.as_tensor(t, dtype=x.dtype).reshape(-1)
        if t_vec.numel() == 1:
            t_vec = t_vec.expand(x.shape[0])
        elif t_vec.numel() != x.shape[0]:
            raise ShapeError(f"t must be scalar or per-item, got {t_vec.numel()} values")
        h = h + self.time_proj(self.time_embed(t_vec))[:, :, None]

        h = h + self.encoder(F.leaky_relu(h, _LRELU_SLOPE))
        h = torch.stack([branch(h) for branch in self.branches], dim=0).mean(dim=0)
        out = self.head_b(F.leaky_relu(self.head_a(F.leaky_relu(h, _LRELU_SLOPE)), _LRELU_SLOPE))
        out = out[:, 0, :]
        return out[0] if squeeze_batch else out


def estimate_vector_field(est: VectorFieldEstimator, x_t, c, t) -> torch.Tensor:
    """Functional alias for the generator forward pass."""
    return est(x_t, c, t)


@dataclass
class DiscriminatorOutput:
    """One branch's verdict: a map of real/fake logits plus feature taps."""

    score: torch.Tensor
    features: list

    def __post_init__(self):
        if not self.features:
            raise ShapeError("discriminator output must expose at least one feature map")


class PeriodDiscriminator(nn.Module):
    """2-D convolutional critic over the (period, length/period) fold."""

    def __init__(self, period: int, channels: Sequence[int] = (16, 32, 64)):
        super().__init__()
        self.period = period
        self.min_length = 5 * period
        convs = []
        in_ch = 1
        for out_ch in channels:
            convs.append(nn.Conv2d(in_ch, out_ch, kernel_size=(1, 5), stride=(1, 3), padding=(0, 2)))
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        self.post = nn.Conv2d(in_ch, 1, kernel_size=(1, 3), padding=(0, 1))

    def forward(self, audio: torch.Tensor) -> DiscriminatorOutput:
        h = reshape_periods(audio, self.period)
        h = h[:, None] if h.dim() == 3 else h[None, None]
        features = []
        for conv in self.convs:
            h = F.leaky_relu(conv(h), _LRELU_SLOPE)
            features.append(h)
        score = self.post(h)
        return DiscriminatorOutput(score=score, features=features)


class CqtSubBandDiscriminator(nn.Module):
    """2-D convolutional critic over per-octave bands of a log-CQT."""

    def __init__(self, cqt_config: CqtConfig, sample_rate: int):
        super().__init__()
        self.cqt_config = cqt_config
        self.sample_rate = sample_rate
        self.min_length = 1
        self.conv_a = nn.Conv2d(1, 16, kernel_size=(3, 5), stride=(1, 2), padding=(1, 2))
        self.conv_b = nn.Conv2d(16, 32, kernel_size=(3, 5), stride=(1, 2), padding=(1, 2))
        self.post = nn.Conv2d(32, 1, kernel_size=3, padding=1)

    def forward(self, audio: torch.Tensor) -> DiscriminatorOutput:
        spec = cqt(audio, self.cqt_config, sample_rate=self.sample_rate).values
        if spec.dim() == 2:
            spec = spec[None]
        bpo = self.cqt_config.bins_per_octave
        features = []
        scores = []
        for octave in range(self.cqt_config.octaves):
            band = spec[:, None, octave * bpo : (octave + 1) * bpo, :]
            h = F.leaky_relu(self.conv_a(band), _LRELU_SLOPE)
            features.append(h)
            h = F.leaky_relu(self.conv_b(h), _LRELU_SLOPE)
            features.append(h)
            scores.append(self.post(h))
        return DiscriminatorOutput(score=torch.cat(scores, dim=2), features=features)


class DiscriminatorEnsemble(nn.Module):
    """All adversarial branches: per-period critics plus per-scale CQT critics."""

    def __init__(
        self,
        sample_rate: int,
        periods: Sequence[int] = DEFAULT_PERIODS,
        cqt_config: CqtConfig = CqtConfig(),
        mpd_channels: Sequence[int] = (16, 32, 64),
    ):
        super().__init__()
        self.sample_rate = sample_rate
        self.periods = tuple(int(p) for p in periods)
        self.cqt_config = cqt_config
        self.mpd_channels = tuple(int(c) for c in mpd_channels)
        self.mpd_branches = nn.ModuleList(
            PeriodDiscriminator(p, channels=self.mpd_channels) for p in self.periods
        )
        self.cqtd_branches = nn.ModuleList(
            CqtSubBandDiscriminator(variant, sample_rate) for variant in cqt_config.variants()
        )

    def hyperparams(self) -> dict:
        return {
            "sample_rate": self.sample_rate,
            "periods": list(self.periods),
            "mpd_channels": list(self.mpd_channels),
            "cqt_f_min": self.cqt_config.f_min,
            "cqt_octaves": self.cqt_config.octaves,
            "cqt_bins_per_octave": self.cqt_config.bins_per_octave,
            "cqt_scales": list(self.cqt_config.scales),
        }

    @property
    def branch_count(self) -> int:
        return len(self.mpd_branches) + len(self.cqtd_branches)

    @property
    def min_input_length(self) -> int:
        return max(b.min_length for b in self.mpd_branches)

    def forward(self, audio) -> list:
        x = as_samples(audio)
        if x.shape[-1] < self.min_input_length:
            raise LengthError(
                f"input of {x.shape[-1]} samples is below the minimum receptive "
                f"length {self.min_input_length}"
            )
        outs = [branch(x) for branch in self.mpd_branches]
        outs.extend(branch(x) for branch in self.cqtd_branches)
        return outs


def discriminate(ens: DiscriminatorEnsemble, x) -> list:
    """Functional alias for the ensemble forward pass."""
    return ens(x)


def count_parameters(module: nn.Module) -> int:
    """Exact count of learnable scalars in a model."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
