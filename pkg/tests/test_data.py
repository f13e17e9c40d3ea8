import hashlib

import numpy as np
import pytest
import torch
from scipy.io import wavfile

from turbowave.config import apply_overrides, format_flat, parse_flat, parse_scalar
from turbowave.data import (
    DatasetSpec,
    TrainingExample,
    load_audio,
    make_toy_corpus,
    sample_segment,
    save_audio,
)
from turbowave.errors import ConfigError, DataError
from turbowave.signal import AudioBuffer, MelConfig, StftConfig, mel_spectrogram

SR = 8000


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    return make_toy_corpus(root, n_items=8, duration=0.5, sample_rate=SR, seed=7)


def autocorr_pitch(samples: np.ndarray, sample_rate: int) -> float:
    """Crude autocorrelation pitch oracle for known-f0 synthetic signals."""
    ac = np.correlate(samples, samples, mode="full")[len(samples) - 1 :]
    lo, hi = sample_rate // 400, sample_rate // 50
    lag = lo + int(np.argmax(ac[lo : hi + 1]))
    return sample_rate / lag


# ---------------------------------------------------------------------------
# WAV I/O


def test_load_pcm16_fullscale_normalization(tmp_path):
    path = tmp_path / "full.wav"
    data = np.array([32767, -32768, 0], dtype=np.int16)
    wavfile.write(path, SR, data)
    buf = load_audio(path)
    assert buf.sample_rate == SR
    assert float(buf.samples[0]) == pytest.approx(32767 / 32768)
    assert float(buf.samples[1]) == pytest.approx(-1.0)


def test_load_rejects_empty_file(tmp_path):
    path = tmp_path / "empty.wav"
    path.write_bytes(b"")
    with pytest.raises(DataError):
        load_audio(path)


def test_roundtrip_float32_exact(tmp_path):
    g = torch.Generator().manual_seed(0)
    buf = AudioBuffer(torch.rand(1000, generator=g) * 1.8 - 0.9, SR)
    path = tmp_path / "rt.wav"
    save_audio(path, buf, fmt="float32")
    back = load_audio(path)
    assert torch.equal(back.samples, buf.samples)


def test_roundtrip_pcm16_within_one_lsb(tmp_path):
    g = torch.Generator().manual_seed(1)
    buf = AudioBuffer(torch.rand(1000, generator=g) * 1.8 - 0.9, SR)
    path = tmp_path / "rt16.wav"
    save_audio(path, buf, fmt="pcm16")
    back = load_audio(path)
    assert float((back.samples - buf.samples).abs().max()) <= 1.0 / 32768


def test_load_takes_first_channel(tmp_path):
    path = tmp_path / "stereo.wav"
    left = np.linspace(-0.5, 0.5, 64, dtype=np.float32)
    right = np.zeros(64, dtype=np.float32)
    wavfile.write(path, SR, np.stack([left, right], axis=1))
    buf = load_audio(path)
    assert np.allclose(buf.samples.numpy(), left)


def test_load_resamples_to_target_rate(tmp_path):
    t = np.arange(SR) / SR
    tone = (0.5 * np.sin(2 * np.pi * 220 * t)).astype(np.float32)
    path = tmp_path / "tone.wav"
    wavfile.write(path, SR, tone)
    buf = load_audio(path, sample_rate=4000)
    assert buf.sample_rate == 4000
    assert abs(len(buf) - 4000) <= 1
    assert autocorr_pitch(buf.samples.numpy(), 4000) == pytest.approx(220, abs=5)


# ---------------------------------------------------------------------------
# Toy corpus


def test_toy_corpus_layout(corpus):
    assert (corpus.root / "corpus.cfg").exists()
    for split in ("train", "dev", "test"):
        assert (corpus.root / f"{split}.txt").exists()
        assert corpus.splits[split]
    total = sum(len(v) for v in corpus.splits.values())
    assert total == 8
    assert not set(corpus.splits["train"]) & set(corpus.splits["dev"])


def test_toy_corpus_deterministic(tmp_path):
    a = make_toy_corpus(tmp_path / "a", n_items=3, duration=0.25, sample_rate=SR, seed=42)
    b = make_toy_corpus(tmp_path / "b", n_items=3, duration=0.25, sample_rate=SR, seed=42)
    for rel in a.splits["train"]:
        da = (a.root / rel).read_bytes()
        db = (b.root / rel).read_bytes()
        assert hashlib.sha256(da).hexdigest() == hashlib.sha256(db).hexdigest()


def test_toy_items_load_and_stay_in_range(corpus):
    for split in ("train", "dev", "test"):
        for buf in corpus.load_split(split):
            assert buf.sample_rate == SR
            assert float(buf.samples.abs().max()) <= 1.0


def test_toy_item_pitch_matches_construction(tmp_path):
    # a pure harmonic stack at a known f0 must be recoverable by autocorrelation
    f0 = 100.0
    t = np.arange(SR) / SR
    wave = sum(np.sin(2 * np.pi * k * f0 * t) / k for k in range(1, 5))
    wave = (0.8 * wave / np.max(np.abs(wave))).astype(np.float32)
    assert autocorr_pitch(wave, SR) == pytest.approx(f0, abs=3)


def test_dataset_spec_round_trip(corpus):
    loaded = DatasetSpec.load(corpus.root)
    assert loaded.sample_rate == corpus.sample_rate
    assert loaded.stft == corpus.stft
    assert loaded.mel == corpus.mel
    assert loaded.segment_length == corpus.segment_length
    assert loaded.splits == corpus.splits


def test_dataset_spec_missing_config(tmp_path):
    with pytest.raises(DataError):
        DatasetSpec.load(tmp_path)


def test_segment_length_must_align_with_hop(tmp_path):
    with pytest.raises(ConfigError):
        DatasetSpec(
            root=tmp_path,
            sample_rate=SR,
            stft=StftConfig(n_fft=512, hop_size=128, win_size=512),
            mel=MelConfig(n_mels=40),
            segment_length=1000,
        )


# ---------------------------------------------------------------------------
# Segment sampling


def test_sample_segment_shapes_and_consistency(corpus):
    audio = corpus.load_split("train")[0]
    rng = torch.Generator().manual_seed(0)
    ex = sample_segment(audio, corpus, rng)
    assert len(ex.segment) == corpus.segment_length
    assert ex.condition.frames * corpus.stft.hop_size == corpus.segment_length
    recomputed = mel_spectrogram(ex.segment, corpus.stft, corpus.mel)
    assert torch.equal(ex.condition.values, recomputed.values)


def test_sample_segment_pads_short_clips(corpus):
    short = AudioBuffer(torch.ones(300) * 0.5, SR)
    rng = torch.Generator().manual_seed(1)
    ex = sample_segment(short, corpus, rng)
    assert len(ex.segment) == corpus.segment_length
    assert torch.all(ex.segment.samples[300:] == 0)


def test_sample_segment_offsets_vary(corpus):
    audio = corpus.load_split("train")[0]
    segments = set()
    for seed in range(8):
        rng = torch.Generator().manual_seed(seed)
        ex = sample_segment(audio, corpus, rng)
        segments.add(hashlib.sha256(ex.segment.samples.numpy().tobytes()).hexdigest())
    assert len(segments) > 1


def test_training_example_validation(corpus):
    audio = corpus.load_split("train")[0]
    rng = torch.Generator().manual_seed(2)
    ex = sample_segment(audio, corpus, rng)
    with pytest.raises(DataError):
        TrainingExample(
            segment=AudioBuffer(torch.zeros(corpus.segment_length + 1), SR),
            condition=ex.condition,
        )
    with pytest.raises(DataError):
        TrainingExample(
            segment=AudioBuffer(torch.ones(corpus.segment_length) * 1.5, SR),
            condition=ex.condition,
        )


# ---------------------------------------------------------------------------
# Config helpers


def test_parse_and_format_flat_round_trip():
    text = "a = 1\nb.c = hello\n# comment\nflag = true\nempty = none\n"
    parsed = parse_flat(text)
    assert parsed == {"a": "1", "b.c": "hello", "flag": "true", "empty": "none"}
    again = parse_flat(format_flat(parsed))
    assert again == parsed


def test_parse_scalar_coercions():
    assert parse_scalar("3") == 3
    assert parse_scalar("2e-4") == pytest.approx(2e-4)
    assert parse_scalar("true") is True
    assert parse_scalar("none") is None
    assert parse_scalar("euler") == "euler"


def test_parse_flat_rejects_garbage():
    with pytest.raises(ConfigError):
        parse_flat("not a key value line\n")


def test_apply_overrides_last_writer_wins():
    base = {"loss.use_gan": "true", "lr": "2e-4"}
    merged = apply_overrides(base, ["loss.use_gan=false", "lr=1e-5", "lr=3e-5"])
    assert merged["loss.use_gan"] == "false"
    assert merged["lr"] == "3e-5"
    with pytest.raises(ConfigError):
        apply_overrides(base, ["no_equals_sign"])
