from __future__ import annotations

from types import SimpleNamespace

import numpy as np
import pytest

import adversarial
import tensor_core as tc
from adversarial import (
    AdversarialSchedule,
    DiscriminatorGroup,
    discriminator_loss,
    generator_loss,
    save_discriminators,
    train_svc,
)
from checkpoint import load_checkpoint
from conversion_model import PitchEnergyMelodySource
from corpus import Manifest
from errors import ContractError, NonFiniteGradientError


def _fill(value: float, t: int = 5, d: int = 4) -> tc.Tensor:
    return tc.constant(np.full((t, d), value))


def _const(value: float):
    return lambda _x: tc.constant(np.asarray(value))


def _stub(rf, conv, emb) -> SimpleNamespace:
    return SimpleNamespace(d_rf=rf, d_conv=conv, d_emb=emb)


def _mean_score(x: tc.Tensor) -> tc.Tensor:
    return tc.mean(x)


class TestDiscriminatorLoss:
    def test_perfect_discriminator_scores_zero(self):
        group = _stub(_mean_score, _mean_score, _mean_score)
        res = discriminator_loss(group, [_fill(1.0)], [_fill(0.0)], [_fill(0.0)], [_fill(1.0)], [_fill(0.0)])
        assert res.total.item() == pytest.approx(0.0)
        assert not res.warnings

    def test_undecided_discriminator(self):
        group = _stub(_const(0.5), _const(0.5), _const(0.5))
        res = discriminator_loss(group, [_fill(1.0)], [_fill(0.0)], [_fill(0.0)], [_fill(1.0)], [_fill(0.0)])
        assert res.total.item() == pytest.approx(1.5)
        assert res.terms["rf_d"] == pytest.approx(0.5)
        assert res.terms["sim_d"] == pytest.approx(1.0)

    def test_empty_branch_skipped_with_warning(self):
        group = _stub(_const(0.5), _const(0.5), _const(0.5))
        res = discriminator_loss(group, [_fill(1.0)], [_fill(0.0)], [], [_fill(1.0)], [])
        assert res.total.item() == pytest.approx(0.5)
        assert len(res.warnings) == 2

    def test_all_branches_empty(self):
        group = _stub(_const(0.5), _const(0.5), _const(0.5))
        with pytest.raises(ContractError):
            discriminator_loss(group, [], [], [], [], [])

    def test_real_group_gradients_reach_every_discriminator(self):
        group = DiscriminatorGroup(d_model=4, hidden=3, seed=0, n_mels=6)
        rng = np.random.default_rng(0)
        mels = [tc.constant(rng.normal(size=(7, 6)) - 4.0) for _ in range(3)]
        embs = [tc.constant(rng.normal(size=(7, 4))) for _ in range(2)]
        with tc.Tape():
            res = discriminator_loss(group, mels[:1], mels[1:2], mels[2:], embs[:1], embs[1:])
            grads = tc.backward(res.total)
        for name, p in group.named_parameters().items():
            assert grads.of(p).shape == p.shape, name
        assert np.any(grads.of(group.d_emb.fc2.bias) != 0)


class TestGeneratorLoss:
    def test_warmup_gives_plain_reconstruction(self):
        l_rec = tc.constant(np.asarray(0.7))
        group = _stub(_const(0.0), _const(0.0), _const(0.0))
        schedule = AdversarialSchedule(warmup_steps=10)
        res = generator_loss(group, [_fill(0.0)], [_fill(0.0)], [_fill(0.0)], [_fill(0.0)], l_rec, schedule, 3)
        assert res.total is l_rec
        assert res.terms["w_sim"] == 0.0 and res.terms["w_rf"] == 0.0

    def test_fooled_discriminator_adds_nothing(self):
        l_rec = tc.constant(np.asarray(0.7))
        group = _stub(_const(1.0), _const(1.0), _const(1.0))
        res = generator_loss(group, [_fill(0.0)], [_fill(0.0)], [_fill(0.0)], [_fill(0.0)], l_rec,
                             AdversarialSchedule(warmup_steps=0), 0)
        assert res.total.item() == pytest.approx(0.7)

    def test_confident_discriminator_penalizes(self):
        l_rec = tc.constant(np.asarray(0.7))
        group = _stub(_const(0.0), _const(0.0), _const(0.0))
        schedule = AdversarialSchedule(warmup_steps=0, weight_sim=0.5, weight_rf=2.0)
        res = generator_loss(group, [_fill(0.0)], [_fill(0.0)], [_fill(0.0)], [_fill(0.0)], l_rec, schedule, 5)
        assert res.terms["rf_g"] == pytest.approx(1.0)
        assert res.terms["sim_g"] == pytest.approx(2.0)
        assert res.total.item() == pytest.approx(0.7 + 2.0 * 1.0 + 0.5 * 2.0)

    def test_negative_step(self):
        with pytest.raises(ValueError):
            generator_loss(_stub(None, None, None), [], [], [], [], tc.constant(np.asarray(0.0)),
                           AdversarialSchedule(), -1)

    def test_batch_size_mismatch(self):
        with pytest.raises(ContractError):
            generator_loss(_stub(None, None, None), [_fill(0.0)], [], [], [], tc.constant(np.asarray(0.0)),
                           AdversarialSchedule(), 0)


class TestSchedule:
    def test_switch_at_warmup(self):
        s = AdversarialSchedule(warmup_steps=500, weight_sim=1.0, weight_rf=1.0)
        assert s.weights(0) == (0.0, 0.0)
        assert s.weights(499) == (0.0, 0.0)
        assert s.weights(500) == (1.0, 1.0)


class TestTrainSvc:
    def test_training_run(self, upstream, toy_corpus, tiny_cfg, tmp_path):
        content, melody = upstream
        res = train_svc(content, melody, toy_corpus, tiny_cfg, metrics_path=tmp_path / "svc.log", check_separation=True)

        steps = tiny_cfg.adversarial.total_steps
        warm = tiny_cfg.adversarial.warmup_steps
        assert len(res.curves) == steps
        assert res.curve("w_sim") == [0.0] * warm + [1.0] * (steps - warm)
        assert all(v == 0.0 for v in res.curve("L_rf_G")[:warm])
        assert all(np.isfinite(res.curve("L_rec")))
        assert res.upstream_hashes_before == res.upstream_hashes_after
        assert res.conversion.trained_steps == steps
        assert len((tmp_path / "svc.log").read_text().splitlines()) == steps

        path = save_discriminators(res.discriminators, tmp_path / "disc.rsvc", tiny_cfg)
        assert load_checkpoint(path).meta["kind"] == "discriminators"

    def test_pitch_energy_variant(self, upstream, toy_corpus, tiny_cfg):
        content, melody = upstream
        res = train_svc(content, melody, toy_corpus, tiny_cfg, melody_source=PitchEnergyMelodySource())
        assert res.conversion.d_melody == 3

    def test_without_external_singers(self, upstream, toy_corpus, tiny_cfg):
        content, melody = upstream
        only_target = Manifest(
            toy_corpus.root, toy_corpus.select(role="target_corpus"), toy_corpus.noise, toy_corpus.singers
        )
        res = train_svc(content, melody, only_target, tiny_cfg)
        assert any("similarity branch disabled" in w for w in res.warnings)
        assert all(v == 0.0 for v in res.curve("L_sim_D"))

    def test_needs_target_corpus(self, upstream, toy_corpus, tiny_cfg):
        content, melody = upstream
        only_external = Manifest(toy_corpus.root, toy_corpus.select(role="external_corpus"), [], toy_corpus.singers)
        with pytest.raises(ContractError):
            train_svc(content, melody, only_external, tiny_cfg)

    def test_generator_retry_keeps_single_discriminator_update(self, upstream, toy_corpus, tiny_cfg, monkeypatch):
        content, melody = upstream
        calls = {"d": 0, "g": 0}
        real_d, real_g = adversarial.discriminator_loss, adversarial.generator_loss

        def counting_d(*args, **kwargs):
            calls["d"] += 1
            return real_d(*args, **kwargs)

        def flaky_g(*args, **kwargs):
            calls["g"] += 1
            if calls["g"] == 1:
                raise NonFiniteGradientError("decoder.out.weight")
            return real_g(*args, **kwargs)

        monkeypatch.setattr(adversarial, "discriminator_loss", counting_d)
        monkeypatch.setattr(adversarial, "generator_loss", flaky_g)
        res = train_svc(content, melody, toy_corpus, tiny_cfg)
        steps = tiny_cfg.adversarial.total_steps
        assert calls["d"] == steps
        assert calls["g"] == steps + 1
        assert len(res.curves) == steps
