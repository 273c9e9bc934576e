from __future__ import annotations

import textwrap

import numpy as np
import pytest

from config import SAMPLE_RATE
from corpus import MANIFEST_NAME, load_manifest
from dsp import AudioBuffer
from io_wav import write_wav
from main import build_parser, dispatch


@pytest.fixture(autouse=True)
def _in_tmp(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)


def _glide(path, lo: float, hi: float) -> str:
    n = int(0.5 * SAMPLE_RATE)
    f = np.linspace(lo, hi, n)
    write_wav(path, AudioBuffer(0.2 * np.sin(2 * np.pi * np.cumsum(f) / SAMPLE_RATE)))
    return str(path)


def test_usage_errors_exit_2():
    assert dispatch([]) == 2
    assert dispatch(["no-such-command"]) == 2
    assert dispatch(["train-svc", "--variant", "bogus"]) == 2


def test_help_lists_defaults(capsys):
    assert dispatch(["sweep-snr", "--help"]) == 0
    out = capsys.readouterr().out
    assert "--snrs" in out
    assert "0,5,10,15" in out
    assert "artifact root" in out


def test_every_command_is_registered():
    parser = build_parser()
    for cmd in ("datagen", "train-content", "train-melody", "train-svc", "gta-gen", "convert", "eval-f0",
                "sweep-snr", "compare-melody-features", "ablate", "overall-eval", "grad-check"):
        assert parser.parse_args([cmd] + (["--in", "a", "--out", "b"] if cmd == "convert" else [])).command == cmd


def test_convert_without_checkpoints_fails_cleanly(tmp_path, capsys):
    src = _glide(tmp_path / "in.wav", 200.0, 300.0)
    rc = dispatch(["convert", "--in", src, "--out", str(tmp_path / "out.wav"), "--out-dir", str(tmp_path / "w")])
    assert rc == 1
    assert "content.rsvc" in capsys.readouterr().err
    assert (tmp_path / "run.log").exists()


def test_eval_f0_pair_mode(tmp_path, capsys):
    a = _glide(tmp_path / "a.wav", 180.0, 320.0)
    assert dispatch(["eval-f0", "--in", a, "--ref", a]) == 0
    assert capsys.readouterr().out.strip() == "f0_rmse=0.000000"


def test_eval_f0_pair_mode_needs_both(tmp_path):
    a = _glide(tmp_path / "a.wav", 180.0, 320.0)
    assert dispatch(["eval-f0", "--in", a]) == 1


def test_datagen_from_ini(tmp_path):
    ini = tmp_path / "toy.ini"
    ini.write_text(
        textwrap.dedent(
            """
            [run]
            seed = 5

            [corpus]
            external_singers = 2
            noise_tracks = 1
            utterances = 16
            target_fraction = 0.5
            dev_fraction = 0.125
            test_fraction = 0.25
            notes_per_utterance = 2
            note_duration_s = 0.15, 0.2
            vocab_size = 4
            noise_duration_s = 1.0
            """
        ),
        encoding="utf-8",
    )
    assert dispatch(["datagen", "--config", str(ini), "--out-dir", str(tmp_path / "w")]) == 0
    corpus_dir = tmp_path / "w" / "corpus"
    assert (corpus_dir / MANIFEST_NAME).exists()
    manifest = load_manifest(corpus_dir)
    assert len(manifest) == 16
    assert len(manifest.noise) == 1


def test_bad_config_exits_1(tmp_path):
    ini = tmp_path / "bad.ini"
    ini.write_text("[nonsense]\nx = 1\n", encoding="utf-8")
    assert dispatch(["datagen", "--config", str(ini)]) == 1


def test_grad_check_small_run(capsys):
    rc = dispatch(["grad-check", "--seeds", "0", "--shapes", "1", "--tolerance", "1e-2"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "generator_loss" in out
    assert out.strip().splitlines()[-1].endswith("0 failed")


@pytest.mark.parametrize(
    "argv,key",
    [
        (["train-content", "--steps", "0"], "content.steps"),
        (["train-melody", "--steps", "0"], "melody.total_steps"),
        (["train-svc", "--steps", "0"], "adversarial.total_steps"),
        (["train-melody", "--steps", "1"], "backbone_freeze_step"),
    ],
)
def test_bad_step_overrides_exit_1_before_training(argv, key, tmp_path, capsys):
    assert dispatch(argv + ["--out-dir", str(tmp_path / "w")]) == 1
    assert key in capsys.readouterr().err
    assert not (tmp_path / "w" / "checkpoints").exists()
