from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

import tensor_core as tc
from config import MelodyConfig
from dsp import AudioBuffer, audio_to_mel, measure_snr_db
from errors import ContractError, ShapeError
from melody_extractor import (
    BACKBONE_PREFIX,
    MelodyExtractor,
    MelodyTargets,
    extract_melody_features,
    load_melody_extractor,
    melody_loss,
    melody_loss_terms,
    noisy_copy,
    predict_targets,
    save_melody_extractor,
    train_melody_extractor,
)

SMALL = MelodyConfig(d_model=8, n_heads=2, backbone_blocks=1, ffn_dim=8, d_mel_feat=4)


class TestLoss:
    def test_pitch_offset_only(self):
        target = np.column_stack([np.linspace(0, 1, 5), np.full(5, 0.5), np.array([0, 1, 1, 1, 0])])
        pred = tc.constant(target + np.array([0.1, 0.0, 0.0]))
        assert melody_loss(pred, target).item() == pytest.approx(0.1, abs=1e-6)
        terms = melody_loss_terms(pred, MelodyTargets.from_array(target))
        assert terms["energy"].item() == pytest.approx(0.0, abs=1e-7)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            melody_loss(tc.constant(np.zeros((4, 3))), np.zeros((5, 3)))


class TestModel:
    def test_feature_and_prediction_shapes(self):
        model = MelodyExtractor(SMALL, seed=0, n_mels=6)
        feats, preds = model(tc.constant(np.random.default_rng(0).normal(size=(9, 6))))
        assert feats.shape == (9, 4)
        assert preds.shape == (9, 3)
        assert np.all((preds.values[:, 2] > 0) & (preds.values[:, 2] < 1))

    def test_backbone_names_use_prefix(self):
        model = MelodyExtractor(SMALL, seed=0, n_mels=6)
        names = model.backbone_names()
        assert names and all(n.startswith(BACKBONE_PREFIX) for n in names)
        assert "out.weight" not in names

    def test_three_dim_features_rejected(self):
        with pytest.raises(ShapeError):
            MelodyExtractor(replace(SMALL, d_mel_feat=3), seed=0)

    def test_features_on_mel_grid(self):
        model = MelodyExtractor(replace(SMALL, d_model=8, d_mel_feat=6), seed=0)
        audio = AudioBuffer(0.1 * np.sin(np.arange(4000) * 2 * np.pi * 220 / 16000))
        assert extract_melody_features(model, audio).n_frames == audio_to_mel(audio).n_frames
        assert predict_targets(model, audio).shape == (audio_to_mel(audio).n_frames, 3)


class TestNoisyCopy:
    def test_offset_and_snr(self):
        rng = np.random.default_rng(0)
        vocal = AudioBuffer(0.05 * rng.normal(size=4000))
        noise = AudioBuffer(0.05 * rng.normal(size=1500))
        mixed = noisy_copy(vocal, noise, 5.0, offset=700)
        assert measure_snr_db(vocal.samples, mixed.samples - vocal.samples) == pytest.approx(5.0, abs=0.01)


class TestTraining:
    def test_backbone_frozen_after_switch(self, toy_corpus, tiny_cfg, tmp_path):
        res = train_melody_extractor(toy_corpus, toy_corpus.noise_audio(), tiny_cfg,
                                     metrics_path=tmp_path / "melody.log", max_dev=1)
        assert len(res.losses) == tiny_cfg.melody.total_steps
        assert res.backbone_hash_at_freeze == res.backbone_hash_final
        assert {"clean_pitch_l1", "snr0_pitch_l1", "snr0_dsp_pitch_l1"} <= set(res.dev_metrics)

        lines = (tmp_path / "melody.log").read_text().splitlines()
        frozen = [line for line in lines if "frozen=1" in line]
        assert len(frozen) == tiny_cfg.melody.total_steps - tiny_cfg.melody.backbone_freeze_step

        path = save_melody_extractor(res.model, tmp_path / "melody.rsvc", tiny_cfg, tiny_cfg.melody.total_steps)
        assert load_melody_extractor(path).parameter_hash() == res.model.parameter_hash()

    def test_head_still_moves_after_freeze(self, toy_corpus, tiny_cfg):
        cfg = replace(tiny_cfg, melody=replace(tiny_cfg.melody, backbone_freeze_step=0, total_steps=2))
        fresh = MelodyExtractor(cfg.melody, cfg.seed)
        res = train_melody_extractor(toy_corpus, toy_corpus.noise_audio(), cfg, max_dev=1)
        assert res.model.backbone_hash() == fresh.backbone_hash()
        assert res.model.parameter_hash() != fresh.parameter_hash()

    def test_needs_noise(self, toy_corpus, tiny_cfg):
        with pytest.raises(ContractError, match="noise"):
            train_melody_extractor(toy_corpus, [], tiny_cfg)
