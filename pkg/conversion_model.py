from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

import tensor_core as tc
from checkpoint import load_checkpoint, save_checkpoint, save_module
from config import N_MELS, ConversionConfig, RunConfig, config_hash, section_from_dict
from content_ctc import ContentModel, FeatureSequence, extract_bnf, load_content_model
from corpus import Manifest
from dsp import (
    MEL_SCALE,
    MEL_SHIFT,
    AudioBuffer,
    MelSpectrogram,
    MelodyContour,
    audio_to_mel,
    contour_to_targets,
    extract_melody_ground_truth,
    griffin_lim,
    n_frames_for,
)
from errors import ContractError, ShapeError
from layers import FFTBlock, Linear, Module, add_positions, run_stack
from melody_extractor import MelodyExtractor, backbone_features, extract_melody_features, load_melody_extractor
from tensor_core import Tensor


log = logging.getLogger("conversion_model")

MELODY_BLOCKS = 3
DECODER_BLOCKS = 6

CONTENT_CKPT = "content.rsvc"
MELODY_CKPT = "melody.rsvc"
SVC_CKPT = "svc.rsvc"


# -----------------------------
# CIN
# -----------------------------
def cin_apply(embedding: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over time, then the target speaker's affine."""
    if embedding.ndim != 2 or embedding.shape[0] < 2:
        raise ShapeError(f"cin_apply needs T >= 2 frames, got {embedding.shape}")
    d = embedding.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"cin_apply: gamma {gamma.shape} / beta {beta.shape} vs channels {d}")
    return tc.instance_norm(embedding, eps=eps) * gamma + beta


# -----------------------------
# Model
# -----------------------------
@dataclass
class ConversionOutput:
    mel: Tensor
    melody_pre_cin: Tensor
    melody_post_cin: Tensor

    def mel_spectrogram(self) -> MelSpectrogram:
        return MelSpectrogram(np.array(self.mel.values, dtype=np.float64))


class ConversionModel(Module):
    """
    content: linear + FFT blocks over BNFs
    melody:  linear + 3 FFT blocks over melody features, then CIN
    decoder: channel concat -> linear -> 6 FFT blocks -> linear to mel
    """

    def __init__(self, cfg: ConversionConfig, d_bnf: int, d_melody: int, seed: int, n_mels: int = N_MELS) -> None:
        rng = np.random.default_rng([seed, 3])
        self.cfg = cfg
        self.d_bnf = d_bnf
        self.d_melody = d_melody
        self.n_mels = n_mels
        self.trained_steps = 0
        d = cfg.d_model
        self.content_in = Linear(d_bnf, d, rng)
        self.content_blocks = [FFTBlock(d, cfg.n_heads, cfg.conv_hidden, rng) for _ in range(cfg.content_blocks)]
        self.melody_in = Linear(d_melody, d, rng)
        self.melody_blocks = [FFTBlock(d, cfg.n_heads, cfg.conv_hidden, rng) for _ in range(MELODY_BLOCKS)]
        self.cin_gamma = tc.parameter(np.ones(d))
        self.cin_beta = tc.parameter(np.zeros(d))
        self.decoder_in = Linear(2 * d, d, rng)
        self.decoder = [FFTBlock(d, cfg.n_heads, cfg.conv_hidden, rng) for _ in range(DECODER_BLOCKS)]
        self.out = Linear(d, n_mels, rng)

    def forward(self, bnf: Tensor, melody: Tensor) -> ConversionOutput:
        if bnf.shape[0] != melody.shape[0]:
            raise ShapeError(f"frame counts differ: bnf T={bnf.shape[0]}, melody T={melody.shape[0]}")
        if bnf.shape[1] != self.d_bnf or melody.shape[1] != self.d_melody:
            raise ShapeError(
                f"feature dims: bnf {bnf.shape[1]} (model {self.d_bnf}), melody {melody.shape[1]} (model {self.d_melody})"
            )
        content = run_stack(self.content_blocks, add_positions(self.content_in(bnf)))
        pre = run_stack(self.melody_blocks, add_positions(self.melody_in(melody)))
        post = cin_apply(pre, self.cin_gamma, self.cin_beta) if self.cfg.use_cin else pre
        h = self.decoder_in(tc.concat([content, post], axis=1))
        h = run_stack(self.decoder, add_positions(h))
        mel = self.out(h) * MEL_SCALE + MEL_SHIFT
        return ConversionOutput(mel, pre, post)


def _as_input(fs: FeatureSequence) -> Tensor:
    return tc.constant(fs.frames.astype(tc.default_dtype()))


def forward_convert(model: ConversionModel, bnf: FeatureSequence, melody_feat: FeatureSequence) -> ConversionOutput:
    if bnf.n_frames != melody_feat.n_frames:
        raise ShapeError(f"forward_convert: bnf has {bnf.n_frames} frames, melody features {melody_feat.n_frames}")
    return model(_as_input(bnf), _as_input(melody_feat))


def reconstruction_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference between predicted and ground-truth mel."""
    if pred.shape != target.shape:
        raise ShapeError(f"reconstruction_loss: {pred.shape} vs {target.shape}")
    return tc.l1_distance(pred, target)


# -----------------------------
# Melody sources
# -----------------------------
class MelodySource(Protocol):
    name: str
    dim: int

    def __call__(self, audio: AudioBuffer, contour: MelodyContour | None = None) -> FeatureSequence: ...


class RobustMelodySource:
    """Penultimate features of the noise-trained extractor; never looks at a pitch track."""

    name = "proposed"

    def __init__(self, extractor: MelodyExtractor) -> None:
        self.extractor = extractor
        self.dim = extractor.cfg.d_mel_feat

    def __call__(self, audio: AudioBuffer, contour: MelodyContour | None = None) -> FeatureSequence:
        return extract_melody_features(self.extractor, audio)


class BackboneRawMelodySource:
    name = "backbone-raw"

    def __init__(self, extractor: MelodyExtractor) -> None:
        self.extractor = extractor
        self.dim = extractor.cfg.d_model

    def __call__(self, audio: AudioBuffer, contour: MelodyContour | None = None) -> FeatureSequence:
        return backbone_features(self.extractor, audio)


class PitchEnergyMelodySource:
    """Normalized P/E/V channels: from the given contour, else from the DSP estimator on the input."""

    name = "pitch-energy"
    dim = 3

    def __call__(self, audio: AudioBuffer, contour: MelodyContour | None = None) -> FeatureSequence:
        if contour is None:
            contour = extract_melody_ground_truth(audio)
        return FeatureSequence(contour_to_targets(contour))


class NoMelodySource:
    name = "none"
    dim = 1

    def __call__(self, audio: AudioBuffer, contour: MelodyContour | None = None) -> FeatureSequence:
        return FeatureSequence(np.zeros((n_frames_for(len(audio)), 1)))


VARIANTS = ("none", "backbone-raw", "proposed", "pitch-energy")


def melody_source_for(variant: str, melody: MelodyExtractor, seed: int) -> MelodySource:
    """backbone-raw reads an untrained extractor built with the same seed and config."""
    if variant == "proposed":
        return RobustMelodySource(melody)
    if variant == "backbone-raw":
        return BackboneRawMelodySource(MelodyExtractor(melody.cfg, seed, melody.n_mels))
    if variant == "pitch-energy":
        return PitchEnergyMelodySource()
    if variant == "none":
        return NoMelodySource()
    raise ContractError("conversion-model", f"unknown melody variant {variant!r}; known: {', '.join(VARIANTS)}")


# -----------------------------
# Pipelines
# -----------------------------
@dataclass
class SvcModels:
    content: ContentModel
    melody: MelodyExtractor
    conversion: ConversionModel


@dataclass
class ConversionResult:
    audio: AudioBuffer
    mel: MelSpectrogram


@dataclass
class ConversionPipeline:
    content: ContentModel
    melody_source: MelodySource
    conversion: ConversionModel
    griffin_lim_iters: int = 32

    @property
    def name(self) -> str:
        return self.melody_source.name

    def features(self, audio: AudioBuffer, contour: MelodyContour | None = None) -> tuple[FeatureSequence, FeatureSequence]:
        return extract_bnf(self.content, audio_to_mel(audio)), self.melody_source(audio, contour)

    def predict_mel(self, audio: AudioBuffer, contour: MelodyContour | None = None) -> MelSpectrogram:
        bnf, mfeat = self.features(audio, contour)
        with tc.no_grad():
            return forward_convert(self.conversion, bnf, mfeat).mel_spectrogram()

    def run(self, audio: AudioBuffer, contour: MelodyContour | None = None) -> ConversionResult:
        mel = self.predict_mel(audio, contour)
        return ConversionResult(griffin_lim(mel, self.griffin_lim_iters), mel)


def convert(models: SvcModels, source: AudioBuffer, griffin_lim_iters: int = 32) -> ConversionResult:
    """
    audio -> mel -> (BNF, robust melody features) -> conversion model -> Griffin-Lim.
    No pitch or energy is ever estimated from the source.
    """
    if models.conversion.d_melody != models.melody.cfg.d_mel_feat:
        raise ContractError(
            "conversion-model",
            f"conversion model expects {models.conversion.d_melody}-dim melody features, "
            f"extractor gives {models.melody.cfg.d_mel_feat}",
        )
    mel = audio_to_mel(source)
    bnf = extract_bnf(models.content, mel)
    mfeat = extract_melody_features(models.melody, source)
    with tc.no_grad():
        out = forward_convert(models.conversion, bnf, mfeat).mel_spectrogram()
    return ConversionResult(griffin_lim(out, griffin_lim_iters), out)


# -----------------------------
# GTA dataset
# -----------------------------
@dataclass
class GtaCache:
    index_path: Path
    entries: list[dict] = field(default_factory=list)
    weight_hash: str = ""
    warnings: list[str] = field(default_factory=list)


def load_gta_entry(cache_root: str | Path, entry: dict) -> tuple[np.ndarray, np.ndarray]:
    ckpt = load_checkpoint(Path(cache_root) / entry["path"])
    return ckpt.tensors["mel"], ckpt.tensors["audio"]


def generate_gta_dataset(models: SvcModels, manifest: Manifest, out_dir: str | Path) -> GtaCache:
    """
    Predicted mel (from clean inputs, conversion weights frozen) paired with the
    ground-truth audio for every target-corpus utterance.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    before = models.conversion.parameter_hash()
    cache = GtaCache(index_path=root / "gta_index.jsonl", weight_hash=before)
    if models.conversion.trained_steps <= 0:
        cache.warnings.append("conversion model is untrained (0 steps); GTA mels are not meaningful")
        log.warning(cache.warnings[-1])

    targets = manifest.select(role="target_corpus")
    with tc.no_grad():
        for e in targets:
            audio = manifest.load_audio(e)
            mel = audio_to_mel(audio)
            bnf = extract_bnf(models.content, mel)
            mfeat = extract_melody_features(models.melody, audio)
            pred = forward_convert(models.conversion, bnf, mfeat).mel.values
            rel = f"gta/{e.utterance_id}.rsvc"
            save_checkpoint(
                {"mel": pred, "audio": audio.samples.astype(np.float32)},
                {"utterance_id": e.utterance_id, "weight_hash": before},
                root / rel,
            )
            cache.entries.append(
                {"utterance_id": e.utterance_id, "path": rel, "n_frames": int(pred.shape[0]), "split": e.split}
            )

    after = models.conversion.parameter_hash()
    if after != before:
        raise ContractError("conversion-model", "conversion weights changed during GTA generation")

    with cache.index_path.open("w", encoding="utf-8") as fh:
        for row in cache.entries:
            fh.write(json.dumps(row) + "\n")
    meta = {"weight_hash": before, "entries": len(cache.entries), "warnings": cache.warnings}
    (root / "gta_meta.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    log.info("GTA cache: %d entries under %s", len(cache.entries), root)
    return cache


# -----------------------------
# Persistence
# -----------------------------
def save_conversion_model(model: ConversionModel, path: str | Path, cfg: RunConfig, variant: str = "proposed") -> Path:
    meta = {
        "kind": "conversion",
        "config": asdict(model.cfg),
        "d_bnf": model.d_bnf,
        "d_melody": model.d_melody,
        "n_mels": model.n_mels,
        "seed": cfg.seed,
        "steps": model.trained_steps,
        "variant": variant,
        "config_hash": config_hash(cfg),
    }
    return save_module(model, path, meta)


def load_conversion_model(path: str | Path) -> ConversionModel:
    ckpt = load_checkpoint(path)
    meta = ckpt.meta
    if meta.get("kind") != "conversion":
        raise ContractError("conversion-model", f"{path} is not a conversion model checkpoint")
    model = ConversionModel(
        section_from_dict(ConversionConfig, meta["config"]),
        int(meta["d_bnf"]),
        int(meta["d_melody"]),
        int(meta["seed"]),
        int(meta["n_mels"]),
    )
    model.load_state_dict(ckpt.tensors)
    model.trained_steps = int(meta.get("steps", 0))
    return model


def require_checkpoints(ckpt_dir: str | Path, names: tuple[str, ...], stage: str) -> None:
    root = Path(ckpt_dir)
    missing = [n for n in names if not (root / n).exists()]
    if missing:
        raise ContractError(stage, f"missing upstream checkpoints in {root}: {', '.join(missing)}")


def load_models(ckpt_dir: str | Path) -> SvcModels:
    root = Path(ckpt_dir)
    require_checkpoints(root, (CONTENT_CKPT, MELODY_CKPT, SVC_CKPT), "conversion-model")
    return SvcModels(
        content=load_content_model(root / CONTENT_CKPT),
        melody=load_melody_extractor(root / MELODY_CKPT),
        conversion=load_conversion_model(root / SVC_CKPT),
    )
