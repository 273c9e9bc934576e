from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from config import CorpusConfig
from corpus import (
    Manifest,
    ManifestEntry,
    Note,
    SongScore,
    describe,
    generate_corpus,
    load_manifest,
    make_singers,
    plan_corpus,
    render_utterance,
    validate_manifest,
)
from dsp import audio_to_mel, extract_melody_ground_truth
from errors import CorpusError


class TestRendering:
    def test_render_is_deterministic(self, tiny_cfg):
        target, _ = make_singers(tiny_cfg.corpus, seed=0)
        score = SongScore((Note(57.0, 0.2, 1), Note(60.0, 0.25, 2)), vocab_size=6)
        a = render_utterance(target, score, seed=9)
        b = render_utterance(target, score, seed=9)
        np.testing.assert_array_equal(a.audio.samples, b.audio.samples)
        assert a.tokens == (1, 2)

    def test_contour_follows_the_score(self, tiny_cfg):
        target, _ = make_singers(tiny_cfg.corpus, seed=0)
        score = SongScore((Note(57.0, 0.3, 0), Note(64.0, 0.3, 3)), vocab_size=6)
        utt = render_utterance(target, score, seed=1)
        assert len(utt.contour) == audio_to_mel(utt.audio).n_frames
        assert utt.contour.vuv[0] == 0 and utt.contour.vuv[-1] == 0

        voiced = utt.contour.f0_hz[utt.contour.vuv == 1]
        assert voiced.min() == pytest.approx(220.0, rel=0.05)
        assert voiced.max() == pytest.approx(329.6, rel=0.05)

        estimate = extract_melody_ground_truth(utt.audio)
        both = (estimate.vuv == 1) & (utt.contour.vuv == 1)
        ratio = estimate.f0_hz[both] / utt.contour.f0_hz[both]
        assert both.sum() > 20
        assert np.median(np.abs(ratio - 1.0)) < 0.03

    def test_bad_score(self):
        with pytest.raises(CorpusError):
            SongScore((Note(60.0, 0.2, 9),), vocab_size=6)


class TestGeneration:
    def test_split_and_role_counts(self, toy_corpus):
        d = describe(toy_corpus)
        assert d["utterances"] == 16
        assert d["noise_tracks"] == 2
        for role in ("target_corpus", "external_corpus"):
            assert d[f"{role}.train"] == 5
            assert d[f"{role}.dev"] == 1
            assert d[f"{role}.test"] == 2

    def test_single_target_singer(self, toy_corpus):
        assert toy_corpus.target_singer_id == "tgt00"
        ext = {e.singer_id for e in toy_corpus.select(role="external_corpus")}
        assert ext == {"ext00", "ext01"}

    def test_manifest_reloads(self, toy_corpus):
        again = load_manifest(toy_corpus.root)
        assert again.entries == toy_corpus.entries
        assert again.noise == toy_corpus.noise
        assert set(again.singers) == {"tgt00", "ext00", "ext01"}

    def test_stored_contours_match_audio(self, toy_corpus):
        e = toy_corpus.select("train", "target_corpus")[0]
        audio = toy_corpus.load_audio(e)
        contour = toy_corpus.load_contour(e)
        assert len(contour) == audio_to_mel(audio).n_frames
        assert contour.vuv.sum() > 0
        assert len(e.token_label_sequence) == 3

    def test_estimated_f0_tracks_analytic_contour(self, toy_corpus):
        checked = 0
        for e in toy_corpus.entries:
            if not e.contour_path:
                continue
            analytic = toy_corpus.load_contour(e)
            estimate = extract_melody_ground_truth(toy_corpus.load_audio(e))
            both = (estimate.vuv == 1) & (analytic.vuv == 1)
            assert both.any(), e.utterance_id
            ratio = estimate.f0_hz[both] / analytic.f0_hz[both]
            assert np.median(np.abs(ratio - 1.0)) < 0.02, e.utterance_id
            checked += 1
        assert checked > 0

    def test_noise_tracks_load(self, toy_corpus):
        noises = toy_corpus.noise_audio()
        assert len(noises) == 2
        assert all(n.rms() > 0 for n in noises)

    def test_same_seed_same_corpus(self, tmp_path):
        cfg = CorpusConfig(utterances=4, noise_tracks=1, notes_per_utterance=2, note_duration_s=(0.15, 0.2),
                           vocab_size=4, noise_duration_s=1.0, dev_fraction=0.0, test_fraction=0.0)
        a = generate_corpus(cfg, tmp_path / "a", seed=5)
        b = generate_corpus(cfg, tmp_path / "b", seed=5)
        assert a.entries == b.entries
        for ea, eb in zip(a.entries, b.entries):
            np.testing.assert_array_equal(a.load_audio(ea).samples, b.load_audio(eb).samples)


class TestErrors:
    def test_needs_two_externals(self):
        with pytest.raises(CorpusError, match="2 external"):
            plan_corpus(CorpusConfig(utterances=4, external_singers=1), seed=0)

    def test_unknown_role(self):
        with pytest.raises(CorpusError):
            ManifestEntry("u", "wavs/u.wav", "s", (), "train", "bystander")

    def test_missing_wav_fails_validation(self, toy_corpus):
        broken = Manifest(
            toy_corpus.root,
            [replace(toy_corpus.entries[0], wav_path="wavs/nope.wav")],
            [],
            toy_corpus.singers,
        )
        with pytest.raises(CorpusError, match="nope.wav"):
            validate_manifest(broken)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CorpusError):
            load_manifest(tmp_path)
