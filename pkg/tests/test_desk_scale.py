"""Desk-scale end-to-end runs on the default synthetic corpus. Minutes on CPU; run with --runslow."""
from __future__ import annotations

import numpy as np
import pytest

from adversarial import train_svc
from config import RunConfig
from content_ctc import extract_bnf, train_content_model
from corpus import Note, SongScore, generate_corpus, make_singers, render_utterance
from dsp import AudioBuffer, audio_to_mel
from evalkit import ablation_run, melody_feature_comparison, snr_sweep, train_variant
from gradcheck import run_grad_checks
from melody_extractor import extract_melody_features, noisy_copy, predict_targets, train_melody_extractor


pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)


def _majority(flags: list[bool]) -> bool:
    return sum(flags) * 2 > len(flags)


def _framewise_cosine(a: np.ndarray, b: np.ndarray) -> float:
    n = min(len(a), len(b))
    a, b = a[:n], b[:n]
    num = np.sum(a * b, axis=1)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1) + 1e-12
    return float(np.mean(num / den))


@pytest.fixture(scope="module")
def desk(tmp_path_factory, settings):
    cfg = RunConfig()
    manifest = generate_corpus(cfg.corpus, tmp_path_factory.mktemp("desk"), seed=cfg.seed, settings=settings)
    content = train_content_model(manifest, cfg)
    melody = train_melody_extractor(manifest, manifest.noise_audio(), cfg)
    return cfg, manifest, content, melody


def test_full_grad_check_at_64_bit():
    results = run_grad_checks()
    assert all(r.passed for r in results)


def test_training_losses_halve(desk):
    cfg, manifest, content, melody = desk
    assert np.mean(content.losses[-50:]) < 0.5 * content.losses[0]
    svc = train_svc(content.model, melody.model, manifest, cfg)
    l_rec = svc.curve("L_rec")
    assert np.mean(l_rec[-50:]) < 0.5 * l_rec[0]


def test_melody_feature_ordering(desk, settings):
    cfg, manifest, content, melody = desk
    flags = []
    for seed in SEEDS:
        rep = melody_feature_comparison(content.model, melody.model, manifest, cfg.with_seed(seed), settings=settings)
        none, raw, robust, pe = (rep.value("clean", v) for v in ("none", "backbone-raw", "proposed", "pitch-energy"))
        flags.append(none > raw > robust and robust <= 2.0 * pe)
    assert _majority(flags)


def test_snr_trend(desk, settings):
    cfg, manifest, content, melody = desk
    noises = manifest.noise_audio()
    flags = []
    for seed in SEEDS:
        c = cfg.with_seed(seed)
        pipelines = [train_variant(content.model, melody.model, manifest, c, v) for v in ("proposed", "pitch-energy")]
        rep = snr_sweep(pipelines, manifest, noises, c, snrs=(0.0, 5.0, 10.0, 15.0), include_clean=False, settings=settings)
        robust = [rep.value(f"snr{s}dB", "proposed") for s in (0, 5, 10, 15)]
        pe = [rep.value(f"snr{s}dB", "pitch-energy") for s in (0, 5, 10, 15)]
        monotone = all(later <= earlier + 0.02 for earlier, later in zip(robust, robust[1:]))
        flags.append(monotone and robust[0] - robust[-1] < pe[0] - pe[-1])
    assert _majority(flags)


def test_ablation_direction(desk, settings):
    cfg, manifest, content, melody = desk
    flags = []
    for seed in SEEDS:
        rep = ablation_run(content.model, melody.model, manifest, cfg.with_seed(seed), include_pitch_energy=False,
                           settings=settings)
        sims = {label: rep.value("clean", label, "cos_sim") for label in ("full", "w/o L_rf", "w/o CIN", "w/o L_sim")}
        flags.append(all(sims["full"] >= v for v in sims.values()) and min(sims, key=sims.get) == "w/o L_sim")
    assert _majority(flags)


def test_bnf_follows_lyrics_not_singer(desk):
    cfg, manifest, content, melody = desk
    target, externals = make_singers(cfg.corpus, seed=cfg.seed)
    vocab = cfg.corpus.vocab_size
    pitches = (57.0, 60.0, 62.0, 64.0, 60.0)

    def bnf(singer, tokens, seed):
        score = SongScore(tuple(Note(p, 0.3, t) for p, t in zip(pitches, tokens)), vocab_size=vocab)
        utt = render_utterance(singer, score, seed=seed)
        return extract_bnf(content.model, audio_to_mel(utt.audio)).frames

    same_lyrics, other_lyrics = [], []
    for k in range(3):
        tokens = tuple((k + 3 * i) % vocab for i in range(len(pitches)))
        swapped = tuple((t + vocab // 2) % vocab for t in tokens)
        ref = bnf(target, tokens, seed=k)
        same_lyrics.append(_framewise_cosine(ref, bnf(externals[k % len(externals)], tokens, seed=10 + k)))
        other_lyrics.append(_framewise_cosine(ref, bnf(target, swapped, seed=20 + k)))
    assert np.mean(same_lyrics) > np.mean(other_lyrics)


def test_trained_extractor_calls_silence_unvoiced(desk):
    _, _, _, melody = desk
    preds = predict_targets(melody.model, AudioBuffer(np.zeros(16000)))
    assert float(np.mean(preds[:, 2])) < 0.2


def test_melody_features_survive_noise(desk):
    _, manifest, _, melody = desk
    noise = manifest.noise_audio()[0]
    entries = [e for e in manifest.select("test") if e.role != "noise"][:4]
    assert len(entries) >= 2
    clean = [manifest.load_audio(e) for e in entries]
    feats = [extract_melody_features(melody.model, a).frames for a in clean]

    matched = [
        _framewise_cosine(f, extract_melody_features(melody.model, noisy_copy(a, noise, 10.0)).frames)
        for a, f in zip(clean, feats)
    ]
    unrelated = [_framewise_cosine(feats[i], feats[(i + 1) % len(feats)]) for i in range(len(feats))]
    assert np.mean(matched) > np.mean(unrelated)
