"""Training objectives: reconstruction, adversarial, and feature-matching losses.

The generator objective is

    L_final = L_adv(G) + lambda_fm * L_fm + lambda_mel * L_mel

with least-squares GAN terms for both players.  Reductions are fixed once
here so ablations stay comparable: mean within each spectrogram or feature
map, mean across mel resolutions, sum across discriminator branches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .errors import ConfigError, LengthError, ShapeError, TrainingDiverged
from .signal import (
    MelConfig,
    StftConfig,
    as_samples,
    max_feasible_mels,
    mel_spectrogram,
    stft,
)

DEFAULT_MEL_HOPS = (8, 16, 32, 64, 128, 256, 512)


@dataclass(frozen=True)
class LossWeights:
    """Weights for the composite generator loss."""

    lambda_fm: float = 2.0
    lambda_mel: float = 45.0

    def __post_init__(self):
        if self.lambda_fm < 0 or self.lambda_mel < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass(frozen=True)
class MultiScaleMelSpec:
    """Bank of STFT/mel resolutions for the multi-scale reconstruction loss.

    Each resolution is a (hop_size, win_size, n_fft, n_mels) tuple; windows
    default to 4x the hop and the mel count is capped by what the filterbank
    can support at that FFT size.
    """

    resolutions: tuple = ()
    sample_rate: int = 22050

    @classmethod
    def default(cls, sample_rate: int, hops: Sequence[int] = DEFAULT_MEL_HOPS) -> "MultiScaleMelSpec":
        resolutions = []
        for hop in hops:
            win = 4 * hop
            n_mels = min(80, hop * 10, max_feasible_mels(sample_rate, win, ceiling=80))
            resolutions.append((hop, win, win, n_mels))
        return cls(resolutions=tuple(resolutions), sample_rate=sample_rate)

    def __post_init__(self):
        for res in self.resolutions:
            hop, win, n_fft, n_mels = res
            if not (0 < hop <= win <= n_fft) or n_mels < 1:
                raise ConfigError(f"invalid mel resolution {res}")

    @property
    def max_win_size(self) -> int:
        return max(r[1] for r in self.resolutions)


def _paired_samples(x, x_hat) -> tuple[torch.Tensor, torch.Tensor]:
    a, b = as_samples(x), as_samples(x_hat)
    if a.shape != b.shape:
        raise LengthError(f"signal shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def mel_loss(x, x_hat, cfg: StftConfig, mel: MelConfig, sample_rate: int | None = None) -> torch.Tensor:
    """L1 distance between log-mel spectrograms, mean over the map."""
    sr = sample_rate
    if sr is None:
        sr = getattr(x, "sample_rate", None) or getattr(x_hat, "sample_rate", None)
    a, b = _paired_samples(x, x_hat)
    ref = mel_spectrogram(a, cfg, mel, sample_rate=sr).values
    est = mel_spectrogram(b, cfg, mel, sample_rate=sr).values
    return (ref - est).abs().mean()


def multiscale_mel_loss(x, x_hat, spec: MultiScaleMelSpec) -> torch.Tensor:
    """Mean of the per-resolution mel losses over the whole bank."""
    a, b = _paired_samples(x, x_hat)
    if a.shape[-1] < spec.max_win_size:
        raise LengthError(
            f"input of {a.shape[-1]} samples is shorter than the largest window "
            f"({spec.max_win_size})"
        )
    total = 0.0
    for hop, win, n_fft, n_mels in spec.resolutions:
        cfg = StftConfig(n_fft=n_fft, hop_size=hop, win_size=win)
        total = total + mel_loss(a, b, cfg, MelConfig(n_mels=n_mels), sample_rate=spec.sample_rate)
    return total / len(spec.resolutions)


def multiscale_stft_loss(x, x_hat, spec: MultiScaleMelSpec) -> torch.Tensor:
    """Spectral convergence plus log-magnitude L1 over the same resolution bank.

    Ablation stand-in for the mel variant; shares MultiScaleMelSpec so the
    resolutions line up exactly (the mel counts are ignored).
    """
    a, b = _paired_samples(x, x_hat)
    if a.shape[-1] < spec.max_win_size:
        raise LengthError(
            f"input of {a.shape[-1]} samples is shorter than the largest window "
            f"({spec.max_win_size})"
        )
    total = 0.0
    for hop, win, n_fft, _ in spec.resolutions:
        cfg = StftConfig(n_fft=n_fft, hop_size=hop, win_size=win)
        ref = stft(a, cfg).magnitude
        est = stft(b, cfg).magnitude
        sc = torch.linalg.norm(ref - est) / torch.linalg.norm(ref).clamp(min=1e-8)
        log_l1 = (torch.log(ref.clamp(min=1e-5)) - torch.log(est.clamp(min=1e-5))).abs().mean()
        total = total + sc + log_l1
    return total / len(spec.resolutions)


def adv_d_loss_from_scores(real_scores: Sequence[torch.Tensor], fake_scores: Sequence[torch.Tensor]) -> torch.Tensor:
    """Least-squares discriminator loss, summed over branches.

    Real scores are pushed to 1 and fake scores to 0; each branch contributes
    the mean over its score map.
    """
    if len(real_scores) != len(fake_scores):
        raise ShapeError("real/fake branch counts differ")
    total = 0.0
    for real, fake in zip(real_scores, fake_scores):
        total = total + ((real - 1.0) ** 2).mean() + (fake**2).mean()
    return total


def adv_g_loss_from_scores(fake_scores: Sequence[torch.Tensor]) -> torch.Tensor:
    """Least-squares generator loss: fake scores pushed to 1, summed over branches."""
    total = 0.0
    for fake in fake_scores:
        total = total + ((fake - 1.0) ** 2).mean()
    return total


def adv_d_loss(ens, x, x_hat) -> torch.Tensor:
    """Discriminator loss for an ensemble evaluated on real and generated audio.

    The generated signal is treated as a constant: no gradient reaches the
    generator from here.
    """
    real_outs = ens(as_samples(x))
    fake_outs = ens(as_samples(x_hat).detach())
    return adv_d_loss_from_scores([o.score for o in real_outs], [o.score for o in fake_outs])


def adv_g_loss(ens, x_hat) -> torch.Tensor:
    """Generator-side adversarial loss; gradient flows through x_hat."""
    fake_outs = ens(as_samples(x_hat))
    return adv_g_loss_from_scores([o.score for o in fake_outs])


def feature_matching_loss(real_outs: Sequence, fake_outs: Sequence) -> torch.Tensor:
    """L1 between intermediate discriminator features, summed over branches and layers.

    Real features are treated as constants.  Each layer contributes the mean
    absolute difference over its feature map.
    """
    if len(real_outs) != len(fake_outs):
        raise ShapeError("real/fake branch counts differ")
    total = 0.0
    for real, fake in zip(real_outs, fake_outs):
        if len(real.features) != len(fake.features):
            raise ShapeError("real/fake feature layer counts differ")
        for r, f in zip(real.features, fake.features):
            if r.shape != f.shape:
                raise ShapeError(f"feature shapes differ: {tuple(r.shape)} vs {tuple(f.shape)}")
            total = total + (r.detach() - f).abs().mean()
    return total


def final_generator_loss(adv_g, fm, mmel, w: LossWeights = LossWeights()) -> torch.Tensor:
    """Composite generator objective: adv_g + lambda_fm*fm + lambda_mel*mmel."""
    parts = {"adv_g": adv_g, "fm": fm, "mel": mmel}
    for name, value in parts.items():
        scalar = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(scalar):
            raise TrainingDiverged(f"non-finite loss component: {name}={scalar}")
    if not torch.is_tensor(adv_g):
        adv_g = torch.as_tensor(adv_g, dtype=torch.float32)
    return adv_g + w.lambda_fm * fm + w.lambda_mel * mmel
