"""End-to-end command-line tests: verbs, exit codes, snapshots, overrides."""

import json

import numpy as np
import pytest
import torch

from turbowave.cli import main
from turbowave.config import parse_flat, parse_scalar
from turbowave.data import DatasetSpec, load_audio
from turbowave.train import load_checkpoint, read_log


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    code = main([
        "make-corpus",
        "--out", str(root),
        "--seed", "5",
        "--override", "corpus.n_items=6",
        "--override", "corpus.duration=0.5",
    ])
    assert code == 0
    return root


@pytest.fixture(scope="module")
def teacher_dir(tmp_path_factory, corpus):
    out = tmp_path_factory.mktemp("teacher")
    code = main([
        "pretrain",
        "--out", str(out),
        "--steps", "3",
        "--seed", "11",
        "--override", f"data.root={corpus}",
        "--override", "train.batch_size=2",
    ])
    assert code == 0
    return out


def read_snapshot(out_dir):
    return {k: parse_scalar(v) for k, v in parse_flat((out_dir / "resolved.cfg").read_text()).items()}


# ---------------------------------------------------------------------------
# Exit codes and error lines


def test_unknown_verb_is_usage_error():
    assert main(["frobnicate"]) == 2


def test_no_arguments_is_usage_error():
    assert main([]) == 2


def test_missing_required_flag_is_usage_error():
    assert main(["pretrain"]) == 2  # --out is required


def test_bad_solver_choice_is_usage_error(corpus):
    code = main([
        "synthesize", "--out", "/tmp/x", "--checkpoint", "nope.ckpt",
        "--solver", "rk4", "in.wav",
    ])
    assert code == 2


def test_runtime_failure_prints_machine_parsable_error(tmp_path, capsys):
    code = main([
        "pretrain", "--out", str(tmp_path), "--steps", "1",
        "--override", f"data.root={tmp_path / 'missing'}",
    ])
    assert code == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("error[DataError]:")
    assert "\n" not in err


def test_unknown_train_key_fails_cleanly(tmp_path, corpus, capsys):
    code = main([
        "pretrain", "--out", str(tmp_path), "--steps", "1",
        "--override", f"data.root={corpus}",
        "--override", "train.bogus=1",
    ])
    assert code == 1
    assert "error[ConfigError]:" in capsys.readouterr().err


def test_missing_corpus_location_fails_cleanly(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("TURBOWAVE_CACHE", raising=False)
    code = main(["pretrain", "--out", str(tmp_path), "--steps", "1"])
    assert code == 1
    assert "error[ConfigError]:" in capsys.readouterr().err


def test_version_flag_exits_zero():
    assert main(["--version"]) == 0


# ---------------------------------------------------------------------------
# make-corpus


def test_make_corpus_layout_and_snapshot(corpus):
    spec = DatasetSpec.load(corpus)
    assert sum(len(v) for v in spec.splits.values()) == 6
    snapshot = read_snapshot(corpus)
    assert snapshot["corpus.n_items"] == 6
    assert snapshot["corpus.seed"] == 5
    assert snapshot["corpus.sample_rate"] == 8000


def test_make_corpus_uses_cache_env(tmp_path, monkeypatch):
    monkeypatch.setenv("TURBOWAVE_CACHE", str(tmp_path))
    code = main([
        "make-corpus",
        "--override", "corpus.n_items=4",
        "--override", "corpus.duration=0.3",
    ])
    assert code == 0
    spec = DatasetSpec.load(tmp_path / "toy-corpus")
    assert sum(len(v) for v in spec.splits.values()) == 4


def test_training_resolves_corpus_from_cache_env(tmp_path, monkeypatch):
    monkeypatch.setenv("TURBOWAVE_CACHE", str(tmp_path))
    assert main([
        "make-corpus",
        "--override", "corpus.n_items=6",
        "--override", "corpus.duration=0.4",
    ]) == 0
    out = tmp_path / "run"
    code = main([
        "pretrain", "--out", str(out), "--steps", "1", "--seed", "0",
        "--override", "train.batch_size=2",
    ])
    assert code == 0
    assert (out / "fm_final.ckpt").exists()


def test_make_corpus_rejects_unknown_corpus_key(tmp_path, capsys):
    code = main([
        "make-corpus", "--out", str(tmp_path / "c"),
        "--override", "corpus.shape=weird",
    ])
    assert code == 1
    assert "error[ConfigError]:" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# pretrain / finetune


def test_pretrain_writes_checkpoint_log_snapshot(teacher_dir, corpus):
    assert (teacher_dir / "fm_final.ckpt").exists()
    log = read_log(teacher_dir)
    assert [r["step"] for r in log] == [1, 2, 3]
    snapshot = read_snapshot(teacher_dir)
    assert snapshot["train.steps"] == 3
    assert snapshot["train.seed"] == 11
    assert snapshot["train.stage"] == "fm"
    assert snapshot["data.root"] == str(corpus)
    # the snapshot must state every field, not just the overridden ones
    assert snapshot["train.lr"] == pytest.approx(2e-4)
    assert snapshot["loss.lambda_mel"] == pytest.approx(45.0)


def test_snapshot_reproduces_run(teacher_dir, corpus, tmp_path):
    """Feeding a snapshot back as --config replays the identical run."""
    out = tmp_path / "replay"
    code = main([
        "pretrain",
        "--config", str(teacher_dir / "resolved.cfg"),
        "--out", str(out),
    ])
    assert code == 0
    strip = lambda recs: [{k: v for k, v in r.items() if k != "wall_s"} for r in recs]
    assert strip(read_log(out)) == strip(read_log(teacher_dir))


def test_finetune_with_teacher_and_gan_off_override(teacher_dir, corpus, tmp_path):
    out = tmp_path / "turbo"
    code = main([
        "finetune",
        "--out", str(out),
        "--steps", "1",
        "--seed", "7",
        "--teacher", str(teacher_dir / "fm_final.ckpt"),
        "--override", f"data.root={corpus}",
        "--override", "train.batch_size=2",
        "--override", "loss.use_gan=false",
    ])
    assert code == 0
    ckpt = out / "turbo_final.ckpt"
    assert ckpt.exists()
    state = load_checkpoint(ckpt)
    assert state.config.use_gan is False
    snapshot = read_snapshot(out)
    assert snapshot["loss.use_gan"] is False
    assert snapshot["run.teacher"] == str(teacher_dir / "fm_final.ckpt")
    log = read_log(out)
    assert log[0]["adv_g"] == 0.0 and log[0]["d_loss"] == 0.0


def test_finetune_without_teacher_fails(corpus, tmp_path, capsys):
    code = main([
        "finetune", "--out", str(tmp_path / "x"), "--steps", "1",
        "--override", f"data.root={corpus}",
    ])
    assert code == 1
    assert "error[ConfigError]:" in capsys.readouterr().err


def test_pretrain_resume_via_checkpoint_flag(corpus, tmp_path):
    full = tmp_path / "full"
    code = main([
        "pretrain", "--out", str(full), "--steps", "4", "--seed", "3",
        "--override", f"data.root={corpus}",
        "--override", "train.batch_size=2",
        "--override", "train.checkpoint_every=2",
    ])
    assert code == 0
    resumed = tmp_path / "resumed"
    code = main([
        "pretrain", "--out", str(resumed),
        "--checkpoint", str(full / "fm_step000002.ckpt"),
        "--override", f"data.root={corpus}",
    ])
    assert code == 0
    strip = lambda recs: [{k: v for k, v in r.items() if k != "wall_s"} for r in recs]
    assert strip(read_log(resumed)) == strip(read_log(full))[2:]


# ---------------------------------------------------------------------------
# synthesize


def test_synthesize_from_wav_inputs(teacher_dir, corpus, tmp_path, capsys):
    spec = DatasetSpec.load(corpus)
    wavs = [str(p) for p in spec.split_paths("dev")]
    out = tmp_path / "wavs"
    code = main([
        "synthesize",
        "--out", str(out),
        "--checkpoint", str(teacher_dir / "fm_final.ckpt"),
        "--steps", "4",
        "--solver", "euler",
        "--seed", "2",
        *wavs,
    ])
    assert code == 0
    produced = sorted(out.glob("*_gen.wav"))
    assert len(produced) == len(wavs)
    first = load_audio(produced[0])
    assert first.sample_rate == spec.sample_rate
    assert torch.isfinite(first.samples).all()
    snapshot = read_snapshot(out)
    assert snapshot["synth.steps"] == 4
    assert snapshot["synth.solver"] == "euler"
    assert snapshot["synth.nfe"] == 4
    assert "nfe: 4" in capsys.readouterr().out


def test_synthesize_from_mel_array(teacher_dir, corpus, tmp_path):
    spec = DatasetSpec.load(corpus)
    from turbowave.signal import mel_spectrogram

    audio = load_audio(spec.split_paths("dev")[0], sample_rate=spec.sample_rate)
    usable = (len(audio) // spec.stft.hop_size) * spec.stft.hop_size
    from turbowave.signal import AudioBuffer

    condition = mel_spectrogram(AudioBuffer(audio.samples[:usable], spec.sample_rate), spec.stft, spec.mel)
    mel_path = tmp_path / "cond.npy"
    np.save(mel_path, condition.values.numpy())

    out = tmp_path / "gen"
    code = main([
        "synthesize",
        "--out", str(out),
        "--checkpoint", str(teacher_dir / "fm_final.ckpt"),
        str(mel_path),
    ])
    assert code == 0
    produced = load_audio(out / "cond_gen.wav")
    assert len(produced) == usable


def test_synthesize_rejects_wrong_mel_band_count(teacher_dir, tmp_path, capsys):
    bad = tmp_path / "bad.npy"
    np.save(bad, np.zeros((7, 10), dtype=np.float32))
    code = main([
        "synthesize", "--out", str(tmp_path / "o"),
        "--checkpoint", str(teacher_dir / "fm_final.ckpt"),
        str(bad),
    ])
    assert code == 1
    assert "error[DataError]:" in capsys.readouterr().err


def test_synthesize_determinism_across_runs(teacher_dir, corpus, tmp_path):
    spec = DatasetSpec.load(corpus)
    wav = str(spec.split_paths("dev")[0])
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main([
            "synthesize", "--out", str(out),
            "--checkpoint", str(teacher_dir / "fm_final.ckpt"),
            "--seed", "9", wav,
        ]) == 0
        outs.append(load_audio(next(iter(out.glob("*_gen.wav")))))
    assert torch.equal(outs[0].samples, outs[1].samples)


# ---------------------------------------------------------------------------
# evaluate


def test_evaluate_checkpoint_over_dev_split(teacher_dir, corpus, tmp_path, capsys):
    out = tmp_path / "eval"
    code = main([
        "evaluate",
        "--out", str(out),
        "--checkpoint", str(teacher_dir / "fm_final.ckpt"),
        "--steps", "2",
        "--override", f"data.root={corpus}",
    ])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    spec = DatasetSpec.load(corpus)
    assert len(report["items"]) == len(spec.split_paths("dev"))
    assert all(it["nfe"] == 2 for it in report["items"])
    assert "mstft" in report["aggregate"]
    assert report["extras"]["pesq"].startswith("n/a")
    assert report["extras"]["utmos"].startswith("n/a")
    assert (out / "report.csv").exists() and (out / "report.md").exists()
    assert (out / "resolved.cfg").exists()
    assert "aggregate:" in capsys.readouterr().out


def test_evaluate_manifest_pairs(corpus, tmp_path):
    spec = DatasetSpec.load(corpus)
    paths = spec.split_paths("dev")
    manifest = tmp_path / "pairs.txt"
    manifest.write_text(f"{paths[0]} {paths[0]}\n")
    out = tmp_path / "eval"
    code = main(["evaluate", "--out", str(out), "--override", f"eval.manifest={manifest}"])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    item = report["items"][0]
    assert item["mstft"] == pytest.approx(0.0, abs=1e-6)
    assert item["vuv_f1"] == pytest.approx(1.0)
    assert "nfe" not in item  # no generation happened


def test_evaluate_without_checkpoint_or_manifest_fails(corpus, tmp_path, capsys):
    code = main([
        "evaluate", "--out", str(tmp_path / "e"),
        "--override", f"data.root={corpus}",
    ])
    assert code == 1
    assert "error[ConfigError]:" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# bench


def test_bench_reports_nfe_and_xrt(teacher_dir, corpus, tmp_path, capsys):
    out = tmp_path / "bench"
    code = main([
        "bench",
        "--out", str(out),
        "--checkpoint", str(teacher_dir / "fm_final.ckpt"),
        "--steps", "2",
        "--solver", "midpoint",
        "--override", f"data.root={corpus}",
        "--override", "bench.items=2",
    ])
    assert code == 0
    text = capsys.readouterr().out
    assert "nfe: 4" in text  # midpoint doubles evaluations
    stats = {k: parse_scalar(v) for k, v in parse_flat((out / "bench.txt").read_text()).items()}
    assert stats["nfe"] == 4
    assert stats["solver"] == "midpoint"
    assert stats["xrt"] > 0
    assert (out / "resolved.cfg").exists()
