"""Objective evaluation: spectral distance, pitch metrics, speed accounting.

The multi-resolution STFT distance uses a fixed three-resolution recipe that
is frozen into every report's config hash; values are comparable across runs
of this package, not across papers.  Pitch analysis is a YIN-style
normalized-difference method whose periodicity confidence doubles as the
voicing statistic.  PESQ and UTMOS require external scorers and are emitted
as "n/a" slots.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .errors import ConfigError, DataError, LengthError
from .flow import TimeGrid, ode_sample
from .signal import StftConfig, as_samples, stft

# (n_fft, hop, win) triples for the M-STFT distance
MSTFT_RESOLUTIONS = ((512, 50, 240), (1024, 120, 600), (2048, 240, 1200))

REPORT_COLUMNS = ("mstft", "periodicity", "vuv_f1", "pitch_hz", "nfe", "xrt")
MARKDOWN_HEADER = "| item | M-STFT | Period. | V/UV | Pitch | NFE | xRT |"

UNAVAILABLE = {
    "pesq": "n/a (requires the external PESQ reference implementation)",
    "utmos": "n/a (requires the external UTMOS pretrained scorer)",
}


def _match_length(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    if x_hat.shape[-1] > x.shape[-1]:
        return x_hat[..., : x.shape[-1]]
    if x_hat.shape[-1] < x.shape[-1]:
        pad = torch.zeros(*x_hat.shape[:-1], x.shape[-1] - x_hat.shape[-1], dtype=x_hat.dtype)
        return torch.cat([x_hat, pad], dim=-1)
    return x_hat


def mstft_distance(x, x_hat) -> float:
    """Mean over fixed resolutions of spectral convergence + log-magnitude L1."""
    a = as_samples(x).detach()
    b = _match_length(a, as_samples(x_hat).detach())
    largest_win = max(win for _, _, win in MSTFT_RESOLUTIONS)
    if a.shape[-1] < largest_win:
        raise LengthError(f"need at least {largest_win} samples, got {a.shape[-1]}")
    total = 0.0
    for n_fft, hop, win in MSTFT_RESOLUTIONS:
        cfg = StftConfig(n_fft=n_fft, hop_size=hop, win_size=win)
        ref = stft(a, cfg).magnitude
        est = stft(b, cfg).magnitude
        sc = float(torch.linalg.norm(ref - est) / torch.linalg.norm(ref).clamp(min=1e-8))
        log_l1 = float((torch.log(ref.clamp(min=1e-5)) - torch.log(est.clamp(min=1e-5))).abs().mean())
        total += sc + log_l1
    return total / len(MSTFT_RESOLUTIONS)


@dataclass
class PitchTrack:
    """Per-frame fundamental frequency with voicing and confidence."""

    f0: np.ndarray          # Hz, 0 where unvoiced
    voiced: np.ndarray      # bool
    periodicity: np.ndarray # confidence in [0, 1]
    frame_hop: int

    def __post_init__(self):
        self.f0 = np.asarray(self.f0, dtype=np.float64)
        self.voiced = np.asarray(self.voiced, dtype=bool)
        self.periodicity = np.asarray(self.periodicity, dtype=np.float64)
        if not (self.f0.shape == self.voiced.shape == self.periodicity.shape):
            raise DataError("pitch track field lengths differ")
        if np.any(self.f0 < 0):
            raise DataError("f0 must be non-negative")
        if np.any((self.f0 > 0) != self.voiced):
            raise DataError("voicing flags must match f0 > 0")

    def __len__(self) -> int:
        return len(self.f0)


def extract_pitch(
    audio,
    frame_hop: int = 256,
    sample_rate: int | None = None,
    f_min: float = 50.0,
    f_max: float = 800.0,
    voicing_threshold: float = 0.3,
) -> PitchTrack:
    """YIN-style pitch tracking via the cumulative-mean normalized difference.

    A frame is voiced when the normalized difference minimum falls below the
    threshold; periodicity confidence is 1 minus that minimum.  The search
    lag range covers [f_min, f_max], refined by parabolic interpolation.
    """
    sr = sample_rate or getattr(audio, "sample_rate", None)
    if sr is None:
        raise ConfigError("sample_rate required when audio is a raw tensor")
    x = as_samples(audio).detach().cpu().numpy().astype(np.float64)
    if x.ndim != 1:
        raise DataError("pitch extraction expects a single channel")

    tau_min = max(2, int(sr / f_max))
    tau_max = int(math.ceil(sr / f_min))
    window = tau_max
    span = window + tau_max
    if len(x) < span:
        raise LengthError(f"need at least {span} samples for pitch analysis, got {len(x)}")

    n_frames = (len(x) - span) // frame_hop + 1
    starts = np.arange(n_frames) * frame_hop
    frames = np.stack([x[s : s + span] for s in starts])
    base = frames[:, :window]

    diff = np.empty((n_frames, tau_max + 1))
    diff[:, 0] = 0.0
    for tau in range(1, tau_max + 1):
        delta = base - frames[:, tau : tau + window]
        diff[:, tau] = np.einsum("ij,ij->i", delta, delta)

    cumulative = np.cumsum(diff[:, 1:], axis=1)
    taus = np.arange(1, tau_max + 1, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        cmnd = np.where(cumulative > 0, diff[:, 1:] * taus / cumulative, 1.0)
    cmnd = np.concatenate([np.ones((n_frames, 1)), cmnd], axis=1)  # tau=0 sentinel

    # absolute-threshold rule: take the FIRST lag whose normalized difference
    # dips below the threshold and slide to its local minimum; this prefers
    # the fundamental over the equally deep dips at subharmonic lags.  Frames
    # with no qualifying dip keep the global minimum (and stay unvoiced).
    best = np.empty(n_frames, dtype=np.int64)
    for i in range(n_frames):
        row = cmnd[i]
        candidates = np.nonzero(row[tau_min : tau_max + 1] < voicing_threshold)[0]
        if candidates.size:
            tau = tau_min + int(candidates[0])
            while tau < tau_max and row[tau + 1] < row[tau]:
                tau += 1
        else:
            tau = tau_min + int(np.argmin(row[tau_min : tau_max + 1]))
        best[i] = tau
    d_min = cmnd[np.arange(n_frames), best]

    # parabolic refinement of the lag around the discrete minimum
    refined = best.astype(np.float64)
    interior = (best > tau_min) & (best < tau_max)
    idx = np.where(interior)[0]
    if idx.size:
        left = cmnd[idx, best[idx] - 1]
        mid = cmnd[idx, best[idx]]
        right = cmnd[idx, best[idx] + 1]
        denom = left - 2 * mid + right
        shift = np.where(np.abs(denom) > 1e-12, 0.5 * (left - right) / np.where(denom == 0, 1, denom), 0.0)
        refined[idx] = best[idx] + np.clip(shift, -0.5, 0.5)

    periodicity = np.clip(1.0 - d_min, 0.0, 1.0)
    voiced = d_min < voicing_threshold
    f0 = np.where(voiced, sr / refined, 0.0)
    out_of_range = (f0 < f_min) | (f0 > f_max)
    f0[out_of_range] = 0.0
    voiced &= ~out_of_range
    return PitchTrack(f0=f0, voiced=voiced, periodicity=periodicity, frame_hop=frame_hop)


class PitchMetrics(NamedTuple):
    periodicity_error: float
    vuv_f1: float
    pitch_error: float | None  # Hz RMSE over mutually voiced frames; None if none exist


def pitch_metrics(track_x: PitchTrack, track_xhat: PitchTrack) -> PitchMetrics:
    """Compare two aligned pitch tracks, with the first as the reference."""
    if len(track_x) != len(track_xhat):
        raise LengthError(f"track lengths differ: {len(track_x)} vs {len(track_xhat)}")
    periodicity_error = float(
        np.sqrt(np.mean((track_x.periodicity - track_xhat.periodicity) ** 2))
    )

    ref, est = track_x.voiced, track_xhat.voiced
    tp = int(np.sum(ref & est))
    fp = int(np.sum(~ref & est))
    fn = int(np.sum(ref & ~est))
    if tp == 0:
        vuv_f1 = 1.0 if (fp == 0 and fn == 0) else 0.0
    else:
        precision = tp / (tp + fp)
        recall = tp / (tp + fn)
        vuv_f1 = 2 * precision * recall / (precision + recall)

    both = ref & est
    if not np.any(both):
        pitch_error = None
    else:
        pitch_error = float(np.sqrt(np.mean((track_x.f0[both] - track_xhat.f0[both]) ** 2)))
    return PitchMetrics(periodicity_error, float(vuv_f1), pitch_error)


def pitch_error_cents(track_x: PitchTrack, track_xhat: PitchTrack) -> float | None:
    """RMSE in cents over mutually voiced frames (logged alongside Hz)."""
    both = track_x.voiced & track_xhat.voiced
    if not np.any(both):
        return None
    cents = 1200.0 * np.log2(track_xhat.f0[both] / track_x.f0[both])
    return float(np.sqrt(np.mean(cents**2)))


class BenchmarkResult(NamedTuple):
    nfe: int           # function evaluations per generated item
    wall_clock_s: float
    xrt: float         # audio seconds generated per wall-clock second


def benchmark_generation(est, grid: TimeGrid, items, sample_rate: int) -> BenchmarkResult:
    """Time ODE generation over (x0, condition) items, counting evaluations exactly."""
    calls = 0

    def counted(x, c, t):
        nonlocal calls
        calls += 1
        return est(x, c, t)

    total_samples = 0
    start = time.perf_counter()
    with torch.no_grad():
        for x0, cond in items:
            out = ode_sample(counted, x0, cond, grid)
            total_samples += out.shape[-1]
    wall = time.perf_counter() - start
    nfe_per_item, remainder = divmod(calls, len(items))
    if remainder or nfe_per_item != grid.nfe:
        raise ConfigError(
            f"evaluation count {calls} over {len(items)} items disagrees with "
            f"the grid's declared NFE {grid.nfe}"
        )
    audio_seconds = total_samples / sample_rate
    return BenchmarkResult(nfe=nfe_per_item, wall_clock_s=wall, xrt=audio_seconds / max(wall, 1e-9))


@dataclass
class MetricReport:
    """Per-item and aggregate objective metrics for one model/checkpoint."""

    model_id: str
    config_hash: str
    items: list = field(default_factory=list)  # list of per-item metric dicts
    extras: dict = field(default_factory=lambda: dict(UNAVAILABLE))

    def add_item(self, name: str, **metrics) -> None:
        self.items.append({"item": name, **metrics})

    def aggregate(self) -> dict:
        """Mean of each numeric metric over items; None values are skipped."""
        agg: dict[str, float] = {}
        for column in REPORT_COLUMNS:
            values = [
                it[column]
                for it in self.items
                if column in it and isinstance(it[column], (int, float)) and it[column] is not None
            ]
            if values:
                agg[column] = float(np.mean(values))
        return agg

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "config_hash": self.config_hash,
            "items": self.items,
            "aggregate": self.aggregate(),
            "extras": self.extras,
        }

    @classmethod
    def from_dict(cls, record: dict) -> "MetricReport":
        report = cls(
            model_id=record["model_id"],
            config_hash=record["config_hash"],
            items=list(record["items"]),
            extras=dict(record.get("extras", {})),
        )
        stored = record.get("aggregate")
        if stored and stored != report.aggregate():
            raise DataError("report aggregate does not match its per-item values")
        return report


def report_config_hash(mapping: dict) -> str:
    """Stable hash of a resolved config plus the frozen metric recipe."""
    record = {"config": {str(k): str(v) for k, v in mapping.items()},
              "mstft_resolutions": [list(r) for r in MSTFT_RESOLUTIONS]}
    return hashlib.sha256(json.dumps(record, sort_keys=True).encode()).hexdigest()[:16]


def _format_cell(value) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def emit_report(report: MetricReport, path, fmt: str = "json") -> None:
    """Serialize a report as json (lossless), csv, or a markdown table."""
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    elif fmt == "csv":
        lines = ["item," + ",".join(REPORT_COLUMNS)]
        for it in report.items:
            lines.append(
                it["item"] + "," + ",".join(_format_cell(it.get(c)) for c in REPORT_COLUMNS)
            )
        agg = report.aggregate()
        lines.append("aggregate," + ",".join(_format_cell(agg.get(c)) for c in REPORT_COLUMNS))
        path.write_text("\n".join(lines) + "\n")
    elif fmt == "markdown":
        lines = [MARKDOWN_HEADER, "|" + "---|" * 7]
        for it in report.items:
            cells = [it["item"]] + [_format_cell(it.get(c)) for c in REPORT_COLUMNS]
            lines.append("| " + " | ".join(cells) + " |")
        agg = report.aggregate()
        cells = ["**mean**"] + [_format_cell(agg.get(c)) for c in REPORT_COLUMNS]
        lines.append("| " + " | ".join(cells) + " |")
        lines.append("")
        for slot, reason in report.extras.items():
            lines.append(f"- {slot}: {reason}")
        path.write_text("\n".join(lines) + "\n")
    else:
        raise ConfigError(f"unknown report format {fmt!r}; use json, csv, or markdown")
