from __future__ import annotations

import sys
from dataclasses import replace
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from config import (  # noqa: E402
    AdversarialConfig,
    ContentConfig,
    ConversionConfig,
    CorpusConfig,
    EvalConfig,
    MelodyConfig,
    RunConfig,
    Settings,
)


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale acceptance tests")


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


# -----------------------------
# Configs
# -----------------------------
TOY_CORPUS = CorpusConfig(
    external_singers=2,
    noise_tracks=2,
    utterances=16,
    target_fraction=0.5,
    dev_fraction=0.125,
    test_fraction=0.25,
    notes_per_utterance=3,
    note_duration_s=(0.15, 0.25),
    vocab_size=6,
    noise_duration_s=2.0,
)


@pytest.fixture(scope="session")
def tiny_cfg() -> RunConfig:
    return RunConfig(
        seed=0,
        corpus=TOY_CORPUS,
        content=ContentConfig(d_model=16, n_heads=2, n_blocks=1, ffn_dim=16, d_bnf=8, steps=3, batch_size=1, lr=1e-3),
        melody=MelodyConfig(
            d_model=16, n_heads=2, backbone_blocks=1, ffn_dim=16, d_mel_feat=16,
            total_steps=4, backbone_freeze_step=2, batch_size=1, segment_frames=32, lr=1e-3,
        ),
        conversion=ConversionConfig(d_model=16, n_heads=2, content_blocks=1, conv_hidden=16, segment_frames=32, lr=1e-3),
        adversarial=AdversarialConfig(warmup_steps=2, total_steps=4, batch_size=1, disc_hidden=8, augment_copies=1),
        eval=EvalConfig(snrs=(0.0, 15.0), seeds=(0,), griffin_lim_iters=4, max_utterances=2),
    )


@pytest.fixture(scope="session")
def settings() -> Settings:
    return replace(Settings(), max_threads=2)


# -----------------------------
# Toy corpus + upstream models
# -----------------------------
@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory: pytest.TempPathFactory, tiny_cfg: RunConfig, settings: Settings):
    from corpus import generate_corpus

    root = tmp_path_factory.mktemp("corpus")
    return generate_corpus(tiny_cfg.corpus, root, seed=tiny_cfg.seed, settings=settings)


@pytest.fixture(scope="session")
def upstream(toy_corpus, tiny_cfg: RunConfig):
    """Content model and melody extractor trained for a handful of steps on the toy corpus."""
    from content_ctc import train_content_model
    from melody_extractor import train_melody_extractor

    content = train_content_model(toy_corpus, tiny_cfg).model
    melody = train_melody_extractor(toy_corpus, toy_corpus.noise_audio(), tiny_cfg, max_dev=2).model
    return content, melody
