from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

import tensor_core as tc
from checkpoint import load_checkpoint, save_module
from config import N_MELS, MelodyConfig, RunConfig, config_hash, section_from_dict
from content_ctc import FeatureSequence, mel_input
from corpus import Manifest
from dsp import (
    AudioBuffer,
    MelSpectrogram,
    MelodyContour,
    audio_to_mel,
    contour_to_targets,
    extract_melody_ground_truth,
    fit_length,
    mix_at_snr,
)
from errors import ContractError, ShapeError
from layers import FFTBlock, Linear, Module, TransformerBlock, add_positions, retry_nonfinite, run_stack
from progress import MetricsWriter, RunStats, live_progress, refresh
from tensor_core import Tensor


log = logging.getLogger("melody_extractor")

BACKBONE_PREFIX = "backbone."
HEAD_BLOCKS = 3
TERMS = ("pitch", "energy", "vuv")


# -----------------------------
# Targets
# -----------------------------
@dataclass(frozen=True)
class MelodyTargets:
    pitch: np.ndarray
    energy: np.ndarray
    vuv: np.ndarray

    def __post_init__(self) -> None:
        if not (self.pitch.shape == self.energy.shape == self.vuv.shape):
            raise ShapeError(
                f"MelodyTargets lengths differ: {self.pitch.shape} {self.energy.shape} {self.vuv.shape}"
            )

    @classmethod
    def from_contour(cls, contour: MelodyContour) -> MelodyTargets:
        arr = contour_to_targets(contour)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2])

    @classmethod
    def from_array(cls, arr: np.ndarray) -> MelodyTargets:
        return cls(arr[:, 0], arr[:, 1], arr[:, 2])

    def __len__(self) -> int:
        return int(self.pitch.size)

    def as_array(self) -> np.ndarray:
        return np.stack([self.pitch, self.energy, self.vuv], axis=1)

    def crop(self, start: int, stop: int) -> MelodyTargets:
        return MelodyTargets(self.pitch[start:stop], self.energy[start:stop], self.vuv[start:stop])


# -----------------------------
# Model
# -----------------------------
class Backbone(Module):
    """Small trainable transformer over mel frames (stands in for a pretrained speech backbone)."""

    def __init__(self, cfg: MelodyConfig, rng: np.random.Generator, n_mels: int = N_MELS) -> None:
        self.inp = Linear(n_mels, cfg.d_model, rng)
        self.blocks = [TransformerBlock(cfg.d_model, cfg.n_heads, cfg.ffn_dim, rng) for _ in range(cfg.backbone_blocks)]

    def forward(self, mel: Tensor) -> Tensor:
        return run_stack(self.blocks, add_positions(self.inp(mel)))


class MelodyExtractor(Module):
    def __init__(self, cfg: MelodyConfig, seed: int, n_mels: int = N_MELS) -> None:
        rng = np.random.default_rng([seed, 2])
        if cfg.d_mel_feat == 3:
            raise ShapeError("d_mel_feat must differ from the 3 prediction channels")
        self.cfg = cfg
        self.n_mels = n_mels
        self.backbone = Backbone(cfg, rng, n_mels)
        self.head_in = Linear(cfg.d_model, cfg.d_mel_feat, rng)
        self.head = [FFTBlock(cfg.d_mel_feat, cfg.n_heads, cfg.ffn_dim, rng) for _ in range(HEAD_BLOCKS)]
        self.out = Linear(cfg.d_mel_feat, 3, rng)

    def forward(self, mel: Tensor) -> tuple[Tensor, Tensor]:
        if mel.ndim != 2 or mel.shape[1] != self.n_mels:
            raise ShapeError(f"MelodyExtractor expects T x {self.n_mels} mel, got {mel.shape}")
        feats = run_stack(self.head, self.head_in(self.backbone(mel)))
        raw = self.out(feats)
        preds = tc.concat([tc.slice_(raw, 0, 2, axis=1), tc.sigmoid(tc.slice_(raw, 2, 3, axis=1))], axis=1)
        return feats, preds

    def backbone_names(self) -> list[str]:
        return [n for n in self.named_parameters() if n.startswith(BACKBONE_PREFIX)]

    def backbone_hash(self) -> str:
        return self.backbone.parameter_hash()


def melody_forward(model: MelodyExtractor, mel: MelSpectrogram) -> tuple[FeatureSequence, Tensor]:
    """Penultimate features (T x d_mel_feat) and predictions (T x 3: P, E, sigmoid V)."""
    if not np.all(np.isfinite(mel.frames)):
        raise ShapeError("melody_forward: mel holds non-finite values")
    feats, preds = model(mel_input(mel))
    return FeatureSequence(np.array(feats.values)), preds


def extract_melody_features(model: MelodyExtractor, audio: AudioBuffer) -> FeatureSequence:
    with tc.no_grad():
        feats, _ = melody_forward(model, audio_to_mel(audio))
    return feats


def backbone_features(model: MelodyExtractor, audio: AudioBuffer) -> FeatureSequence:
    with tc.no_grad():
        h = model.backbone(mel_input(audio_to_mel(audio)))
    return FeatureSequence(np.array(h.values))


def predict_targets(model: MelodyExtractor, audio: AudioBuffer) -> np.ndarray:
    with tc.no_grad():
        _, preds = melody_forward(model, audio_to_mel(audio))
    return np.array(preds.values, dtype=np.float64)


# -----------------------------
# Loss
# -----------------------------
def melody_loss_terms(pred: Tensor, target: MelodyTargets | np.ndarray) -> dict[str, Tensor]:
    arr = target.as_array() if isinstance(target, MelodyTargets) else np.asarray(target)
    if pred.ndim != 2 or pred.shape[1] != 3 or arr.shape != pred.shape:
        raise ShapeError(f"melody_loss: prediction {pred.shape} vs target {arr.shape}")
    tgt = tc.constant(arr.astype(pred.values.dtype))
    return {
        name: tc.l1_distance(tc.slice_(pred, i, i + 1, axis=1), tc.slice_(tgt, i, i + 1, axis=1))
        for i, name in enumerate(TERMS)
    }


def melody_loss(pred: Tensor, target: MelodyTargets | np.ndarray) -> Tensor:
    """Sum of the pitch, energy and vuv mean-L1 terms."""
    terms = melody_loss_terms(pred, target)
    return terms["pitch"] + terms["energy"] + terms["vuv"]


# -----------------------------
# Training
# -----------------------------
@dataclass
class MelodyTrainResult:
    model: MelodyExtractor
    losses: list[float] = field(default_factory=list)
    dev_metrics: dict[str, float] = field(default_factory=dict)
    backbone_hash_at_freeze: str | None = None
    backbone_hash_final: str | None = None
    warnings: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class _Example:
    audio: AudioBuffer
    targets: MelodyTargets


def draw_snr(rng: np.random.Generator, snr_range: tuple[float, float]) -> float:
    lo, hi = snr_range
    if lo == hi:
        return float(lo)
    return float(rng.uniform(lo, hi))


def noisy_copy(audio: AudioBuffer, noise: AudioBuffer, snr_db: float, offset: int = 0) -> AudioBuffer:
    if math.isinf(snr_db):
        return mix_at_snr(audio, noise, snr_db)
    shifted = np.roll(fit_length(noise.samples, max(len(noise), len(audio))), -offset)
    return mix_at_snr(audio, AudioBuffer(shifted, noise.sample_rate), snr_db)


def _evaluate_dev(
    model: MelodyExtractor,
    dev: list[_Example],
    noises: list[AudioBuffer],
    seed: int,
) -> dict[str, float]:
    out: dict[str, float] = {}
    for label, snr in (("clean", math.inf), ("snr0", 0.0)):
        sums = dict.fromkeys(TERMS, 0.0)
        dsp_pitch = 0.0
        for i, ex in enumerate(dev):
            mixture = noisy_copy(ex.audio, noises[i % len(noises)], snr, offset=(seed + i) * 997)
            pred = predict_targets(model, mixture)
            tgt = ex.targets.as_array()
            for j, term in enumerate(TERMS):
                sums[term] += float(np.mean(np.abs(pred[:, j] - tgt[:, j])))
            est = contour_to_targets(extract_melody_ground_truth(mixture))
            dsp_pitch += float(np.mean(np.abs(est[:, 0] - tgt[:, 0])))
        for term in TERMS:
            out[f"{label}_{term}_l1"] = sums[term] / len(dev)
        out[f"{label}_dsp_pitch_l1"] = dsp_pitch / len(dev)
    return out


def _load_examples(manifest: Manifest, split: str) -> list[_Example]:
    out = []
    for e in manifest.select(split):
        if e.role == "noise":
            continue
        if not e.contour_path:
            raise ContractError("melody-extractor", f"{e.utterance_id} carries no analytic contour")
        out.append(_Example(manifest.load_audio(e), MelodyTargets.from_contour(manifest.load_contour(e))))
    return out


def train_melody_extractor(
    manifest: Manifest,
    noises: list[AudioBuffer],
    cfg: RunConfig,
    metrics_path: str | Path | None = None,
    show_progress: bool = False,
    max_dev: int | None = 8,
) -> MelodyTrainResult:
    """
    Each step mixes a random noise track at a random SNR onto a clean vocal,
    feeds the noisy mel, and regresses the clean analytic targets. Backbone
    parameters leave the optimizer once step >= backbone_freeze_step.
    """
    mcfg = cfg.melody
    if not noises:
        raise ContractError("melody-extractor", "training needs at least one noise track")
    if mcfg.backbone_freeze_step > mcfg.total_steps:
        raise ContractError("melody-extractor", "backbone_freeze_step exceeds total_steps")
    train = _load_examples(manifest, "train")
    if not train:
        raise ContractError("melody-extractor", "manifest has no training utterances")
    dev = _load_examples(manifest, "dev")[:max_dev] if max_dev else _load_examples(manifest, "dev")

    model = MelodyExtractor(mcfg, cfg.seed)
    params = model.named_parameters()
    frozen = frozenset(model.backbone_names())
    state = tc.AdamState(lr=mcfg.lr)
    rng = np.random.default_rng([cfg.seed, 202])
    seg = mcfg.segment_frames

    def make_item() -> tuple[Tensor, np.ndarray]:
        ex = train[int(rng.integers(0, len(train)))]
        noise = noises[int(rng.integers(0, len(noises)))]
        snr = draw_snr(rng, mcfg.noise_snr_range_db)
        mixture = noisy_copy(ex.audio, noise, snr, offset=int(rng.integers(0, max(1, len(noise)))))
        mel = audio_to_mel(mixture)
        tgt = ex.targets.as_array()
        start = int(rng.integers(0, mel.n_frames - seg + 1)) if mel.n_frames > seg else 0
        stop = min(mel.n_frames, start + seg)
        return mel_input(MelSpectrogram(mel.frames[start:stop])), tgt[start:stop]

    @retry_nonfinite
    def one_step(step: int) -> dict[str, float]:
        batch = [make_item() for _ in range(mcfg.batch_size)]
        with tc.Tape():
            total: Tensor | None = None
            parts = dict.fromkeys(TERMS, 0.0)
            for mel, tgt in batch:
                _, preds = model(mel)
                terms = melody_loss_terms(preds, tgt)
                for k, v in terms.items():
                    parts[k] += v.item() / len(batch)
                item = terms["pitch"] + terms["energy"] + terms["vuv"]
                total = item if total is None else total + item
            assert total is not None
            loss = total / float(len(batch))
            grads = tc.backward(loss)
        tc.adam_step(params, grads, state, frozen=frozen if step >= mcfg.backbone_freeze_step else ())
        return {"loss": loss.item(), **parts}

    result = MelodyTrainResult(model)
    stats = RunStats(task_name="MELODY", total_units=mcfg.total_steps)
    log.info(
        "melody-extractor: %d train / %d dev utterances, %d noise tracks, freeze at %d of %d steps",
        len(train), len(dev), len(noises), mcfg.backbone_freeze_step, mcfg.total_steps,
    )
    with MetricsWriter(metrics_path, "melody_extractor.metrics") as mw, live_progress(stats, enabled=show_progress) as live:
        for step in range(mcfg.total_steps):
            if step == mcfg.backbone_freeze_step:
                result.backbone_hash_at_freeze = model.backbone_hash()
                log.info("melody-extractor: backbone frozen at step %d", step)
            values = one_step(step)
            result.losses.append(values["loss"])
            mw.write(step, {**values, "frozen": int(step >= mcfg.backbone_freeze_step)})
            stats.record_metrics({"loss": values["loss"]})
            stats.record_unit_done()
            refresh(live, stats)

        if result.backbone_hash_at_freeze is None:
            result.backbone_hash_at_freeze = model.backbone_hash()
        result.backbone_hash_final = model.backbone_hash()

        if dev:
            result.dev_metrics = _evaluate_dev(model, dev, noises, cfg.seed)
            mw.write(mcfg.total_steps, result.dev_metrics)
        else:
            result.warnings.append("no dev utterances; dev metrics not computed")
            log.warning(result.warnings[-1])
    return result


# -----------------------------
# Persistence
# -----------------------------
def save_melody_extractor(model: MelodyExtractor, path: str | Path, cfg: RunConfig, steps: int) -> Path:
    meta = {
        "kind": "melody",
        "config": asdict(model.cfg),
        "n_mels": model.n_mels,
        "seed": cfg.seed,
        "steps": steps,
        "config_hash": config_hash(cfg),
    }
    return save_module(model, path, meta)


def load_melody_extractor(path: str | Path) -> MelodyExtractor:
    ckpt = load_checkpoint(path)
    meta = ckpt.meta
    if meta.get("kind") != "melody":
        raise ContractError("melody-extractor", f"{path} is not a melody extractor checkpoint")
    model = MelodyExtractor(section_from_dict(MelodyConfig, meta["config"]), int(meta["seed"]), int(meta["n_mels"]))
    model.load_state_dict(ckpt.tensors)
    return model
