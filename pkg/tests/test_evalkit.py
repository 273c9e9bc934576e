from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from config import SAMPLE_RATE
from conversion_model import ConversionModel, ConversionPipeline, NoMelodySource, RobustMelodySource
from corpus import Manifest
from dsp import AudioBuffer
from errors import ContractError, NoVoicedFramesError
from evalkit import (
    CLEAN,
    EvalReport,
    EvalRow,
    align_tracks,
    condition_label,
    cosine_similarity,
    eval_utterances,
    f0_rmse,
    f0_track_rmse,
    normalized_rmse,
    over_seeds,
    overall_evaluation,
    snr_sweep,
    speaker_embedding,
    target_centroid,
)


def glide(f_start: float, f_stop: float, seconds: float = 0.6) -> AudioBuffer:
    n = int(seconds * SAMPLE_RATE)
    f = np.linspace(f_start, f_stop, n)
    return AudioBuffer(0.2 * np.sin(2 * np.pi * np.cumsum(f) / SAMPLE_RATE))


class TestF0Rmse:
    def test_normalized_rmse_example(self):
        assert normalized_rmse(np.array([0.0, 1.0]), np.array([0.0, 0.8])) == pytest.approx(math.sqrt(0.02))

    def test_identical_and_scaled_tracks(self):
        f0 = np.array([200.0, 220.0, 260.0, 240.0])
        assert f0_track_rmse(f0, f0) == 0.0
        assert f0_track_rmse(f0, 2.0 * f0) == pytest.approx(0.0, abs=1e-12)

    def test_opposite_tracks(self):
        assert f0_track_rmse(np.array([1.0, 3.0]), np.array([3.0, 1.0])) == pytest.approx(1.0)

    def test_align_stretches_shorter_track(self):
        a, b = align_tracks(np.array([0.0, 1.0]), np.array([0.0, 0.5, 1.0]))
        np.testing.assert_allclose(a, [0.0, 0.5, 1.0])
        np.testing.assert_allclose(b, [0.0, 0.5, 1.0])

    def test_normalizes_after_alignment(self):
        # stretching the 3-frame peak onto 4 frames caps it at 166.7 Hz
        a = np.array([100.0, 200.0, 100.0])
        b = np.array([100.0, 150.0, 150.0, 100.0])
        assert f0_track_rmse(a, b) == pytest.approx(0.0, abs=1e-12)

    def test_audio_against_itself(self):
        audio = glide(180.0, 320.0)
        assert f0_rmse(audio, audio) == pytest.approx(0.0, abs=1e-12)
        assert f0_rmse(glide(320.0, 180.0), audio) > 0.4

    def test_silent_input(self):
        with pytest.raises(NoVoicedFramesError, match="converted"):
            f0_rmse(AudioBuffer(np.zeros(SAMPLE_RATE // 2)), glide(200.0, 300.0))


class TestSpeakerEmbedding:
    def test_length_and_norm(self):
        emb = speaker_embedding(glide(200.0, 240.0))
        assert emb.shape == (160,)
        assert np.linalg.norm(emb) == pytest.approx(1.0)

    def test_cosine_reflexive_and_symmetric(self):
        a, b = glide(200.0, 240.0), glide(150.0, 400.0)
        assert cosine_similarity(a, a) == pytest.approx(1.0)
        assert cosine_similarity(a, b) == pytest.approx(cosine_similarity(b, a))
        assert -1.0 <= cosine_similarity(a, b) <= 1.0

    def test_silence_has_no_embedding(self):
        with pytest.raises(NoVoicedFramesError):
            speaker_embedding(AudioBuffer(np.zeros(4000)))


class TestReport:
    def test_value_lookup(self):
        rep = EvalReport("t", [EvalRow(CLEAN, "proposed", 0.2, seed=0), EvalRow(CLEAN, "proposed", 0.3, seed=1)])
        assert rep.value(CLEAN, "proposed") == 0.2
        assert rep.value(CLEAN, "proposed", seed=1) == 0.3
        assert rep.seeds() == [0, 1]
        with pytest.raises(KeyError):
            rep.value(CLEAN, "proposed", "cos_sim")
        with pytest.raises(KeyError):
            rep.value("snr0dB", "proposed")

    @pytest.mark.parametrize("snr,label", [(math.inf, "clean"), (0.0, "snr0dB"), (5.0, "snr5dB"), (2.5, "snr2.5dB")])
    def test_condition_labels(self, snr, label):
        assert condition_label(snr) == label

    def test_over_seeds_stacks_rows(self, tiny_cfg):
        def harness(cfg):
            return EvalReport("h", [EvalRow(CLEAN, "v", float(cfg.seed), seed=cfg.seed)], seed=cfg.seed)

        rep = over_seeds(harness, tiny_cfg, (3, 4))
        assert [r.seed for r in rep.rows] == [3, 4]
        assert rep.seed == 3

    def test_over_seeds_needs_seeds(self, tiny_cfg):
        with pytest.raises(ContractError):
            over_seeds(lambda c: EvalReport("h"), tiny_cfg, ())


class TestHarnesses:
    @pytest.fixture(scope="class")
    def pipelines(self, upstream, tiny_cfg):
        content, melody = upstream
        gl = tiny_cfg.eval.griffin_lim_iters
        robust = ConversionPipeline(
            content, RobustMelodySource(melody),
            ConversionModel(tiny_cfg.conversion, content.cfg.d_bnf, melody.cfg.d_mel_feat, 0), gl,
        )
        blind = ConversionPipeline(
            content, NoMelodySource(), ConversionModel(tiny_cfg.conversion, content.cfg.d_bnf, 1, 0), gl
        )
        return [robust, blind]

    def test_eval_utterances_are_capped_and_sorted(self, toy_corpus, tiny_cfg):
        utts = eval_utterances(toy_corpus, tiny_cfg)
        ids = [u.entry.utterance_id for u in utts]
        assert len(ids) == tiny_cfg.eval.max_utterances
        assert ids == sorted(ids)

    def test_eval_utterances_need_test_split(self, toy_corpus, tiny_cfg):
        train_only = Manifest(toy_corpus.root, toy_corpus.select("train"), toy_corpus.noise, toy_corpus.singers)
        with pytest.raises(ContractError):
            eval_utterances(train_only, tiny_cfg)

    def test_snr_sweep_rows_and_reproducibility(self, pipelines, toy_corpus, tiny_cfg, settings):
        noises = toy_corpus.noise_audio()
        rep = snr_sweep(pipelines, toy_corpus, noises, tiny_cfg, settings=settings)
        conditions = [r.condition for r in rep.rows]
        assert conditions == ["clean", "clean", "snr0dB", "snr0dB", "snr15dB", "snr15dB"]
        assert [r.variant for r in rep.rows[:2]] == ["proposed", "none"]
        assert all(0.0 <= r.f0_rmse <= 1.0 for r in rep.rows)
        assert all(r.n_utterances == tiny_cfg.eval.max_utterances for r in rep.rows)

        again = snr_sweep(pipelines, toy_corpus, noises, tiny_cfg, snrs=(0.0,), include_clean=False, settings=settings)
        assert again.value("snr0dB", "proposed") == rep.value("snr0dB", "proposed")

    def test_snr_sweep_needs_noise(self, pipelines, toy_corpus, tiny_cfg):
        with pytest.raises(ContractError):
            snr_sweep(pipelines, toy_corpus, [], tiny_cfg)

    def test_overall_evaluation_conditions(self, pipelines, toy_corpus, tiny_cfg, settings):
        cfg = replace(tiny_cfg, eval=replace(tiny_cfg.eval, max_utterances=1))
        rep = overall_evaluation(pipelines[:1], toy_corpus, toy_corpus.noise_audio(), cfg, settings=settings)
        assert [(r.condition, r.variant) for r in rep.rows] == [("noisy", "proposed"), ("clean", "proposed")]

    def test_target_centroid_is_unit(self, toy_corpus):
        assert np.linalg.norm(target_centroid(toy_corpus, limit=3)) == pytest.approx(1.0)


@pytest.mark.slow
class TestSpeakerSeparation:
    def test_target_utterances_sit_closer_to_target_centroid(self, toy_corpus):
        centre = target_centroid(toy_corpus)
        own = [speaker_embedding(toy_corpus.load_audio(e)) @ centre for e in toy_corpus.select("test", "target_corpus")]
        other = [speaker_embedding(toy_corpus.load_audio(e)) @ centre for e in toy_corpus.select("test", "external_corpus")]
        assert np.mean(own) > np.mean(other)
