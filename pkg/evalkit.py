from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from adversarial import train_svc
from config import RunConfig, Settings, config_hash
from content_ctc import ContentModel
from conversion_model import ConversionPipeline, melody_source_for
from corpus import Manifest, ManifestEntry
from dsp import AudioBuffer, MelodyContour, audio_to_mel, extract_melody_ground_truth, minmax_normalize
from errors import ContractError, NoVoicedFramesError
from melody_extractor import MelodyExtractor, noisy_copy
from progress import run_in_threads


log = logging.getLogger("evalkit")

CLEAN = "clean"


# -----------------------------
# Metrics
# -----------------------------
def voiced_f0(audio: AudioBuffer, what: str = "signal") -> np.ndarray:
    contour = extract_melody_ground_truth(audio)
    f0 = contour.f0_hz[contour.vuv == 1]
    if f0.size == 0:
        raise NoVoicedFramesError(what)
    return f0


def align_tracks(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Linearly interpolate the shorter track onto the longer one's frame count."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == b.size:
        return a, b
    short, long_ = (a, b) if a.size < b.size else (b, a)
    if short.size == 1:
        stretched = np.full(long_.size, short[0])
    else:
        stretched = np.interp(np.linspace(0.0, short.size - 1, long_.size), np.arange(short.size), short)
    return (stretched, long_) if a.size < b.size else (long_, stretched)


def normalized_rmse(a: np.ndarray, b: np.ndarray) -> float:
    """RMSE of two tracks already in [0, 1] (aligned first if lengths differ)."""
    x, y = align_tracks(a, b)
    return float(min(1.0, math.sqrt(float(np.mean((x - y) ** 2)))))


def f0_track_rmse(f0_a: np.ndarray, f0_b: np.ndarray) -> float:
    """Align the two tracks first, then min-max normalize each and take the RMSE."""
    a, b = align_tracks(f0_a, f0_b)
    return normalized_rmse(minmax_normalize(a), minmax_normalize(b))


def f0_rmse(converted: AudioBuffer, source: AudioBuffer) -> float:
    """Min-max normalized F0 RMSE over voiced frames; 0 means identical melody shape."""
    return f0_track_rmse(voiced_f0(converted, "converted audio"), voiced_f0(source, "source audio"))


def speaker_embedding(audio: AudioBuffer) -> np.ndarray:
    """Per-mel-channel mean and std over voiced frames, L2-normalized (length 2 * n_mels)."""
    mel = audio_to_mel(audio).frames
    contour = extract_melody_ground_truth(audio)
    n = min(mel.shape[0], len(contour))
    voiced = mel[:n][contour.vuv[:n] == 1]
    if voiced.shape[0] == 0:
        raise NoVoicedFramesError("speaker embedding input")
    emb = np.concatenate([voiced.mean(axis=0), voiced.std(axis=0)])
    norm = float(np.linalg.norm(emb))
    return emb / norm if norm > 0 else emb


def embedding_similarity(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.clip(np.dot(a, b), -1.0, 1.0))


def cosine_similarity(a: AudioBuffer, b: AudioBuffer) -> float:
    return embedding_similarity(speaker_embedding(a), speaker_embedding(b))


def centroid(embeddings: Sequence[np.ndarray]) -> np.ndarray:
    if not embeddings:
        raise ContractError("evalkit", "cannot build a speaker centroid from zero utterances")
    c = np.mean(np.stack(embeddings), axis=0)
    norm = float(np.linalg.norm(c))
    return c / norm if norm > 0 else c


# -----------------------------
# Report
# -----------------------------
@dataclass(frozen=True)
class EvalRow:
    condition: str
    variant: str
    f0_rmse: float
    cos_sim: float | None = None
    n_utterances: int = 0
    seed: int = 0


@dataclass
class EvalReport:
    title: str
    rows: list[EvalRow] = field(default_factory=list)
    config_hash: str = ""
    seed: int = 0
    warnings: list[str] = field(default_factory=list)

    def value(self, condition: str, variant: str, metric: str = "f0_rmse", seed: int | None = None) -> float:
        for row in self.rows:
            if row.condition == condition and row.variant == variant and (seed is None or row.seed == seed):
                v = getattr(row, metric)
                if v is None:
                    break
                return float(v)
        raise KeyError(f"{self.title}: no {metric} for ({condition!r}, {variant!r}, seed={seed})")

    def seeds(self) -> list[int]:
        return sorted({r.seed for r in self.rows})

    def extend(self, other: EvalReport) -> None:
        self.rows.extend(other.rows)
        self.warnings.extend(other.warnings)

    def records(self) -> list[dict]:
        return [
            {
                "title": self.title,
                "condition": r.condition,
                "variant": r.variant,
                "f0_rmse": r.f0_rmse,
                "cos_sim": r.cos_sim,
                "n_utterances": r.n_utterances,
                "seed": r.seed,
                "config_hash": self.config_hash,
            }
            for r in self.rows
        ]


def condition_label(snr_db: float) -> str:
    return CLEAN if math.isinf(snr_db) else f"snr{snr_db:g}dB"


# -----------------------------
# Shared plumbing
# -----------------------------
@dataclass(frozen=True)
class _Utterance:
    entry: ManifestEntry
    audio: AudioBuffer
    contour: MelodyContour | None


def eval_utterances(manifest: Manifest, cfg: RunConfig, roles: Sequence[str] | None = None) -> list[_Utterance]:
    entries = [e for e in manifest.select("test") if e.role != "noise" and (roles is None or e.role in roles)]
    entries = sorted(entries, key=lambda e: e.utterance_id)[: cfg.eval.max_utterances]
    if not entries:
        raise ContractError("evalkit", "manifest has no test utterances")
    return [
        _Utterance(e, manifest.load_audio(e), manifest.load_contour(e) if e.contour_path else None)
        for e in entries
    ]


def _noise_offset(seed: int, index: int, noise: AudioBuffer) -> int:
    return int(np.random.default_rng([seed, 505, index]).integers(0, max(1, len(noise))))


@dataclass(frozen=True)
class _Scored:
    f0_rmse: float
    cos_sim: float | None
    warning: str | None


def _score(
    pipeline: ConversionPipeline,
    utt: _Utterance,
    model_input: AudioBuffer,
    use_contour: bool,
    target_centroid: np.ndarray | None,
) -> _Scored:
    result = pipeline.run(model_input, utt.contour if use_contour else None)
    warning = None
    try:
        rmse = f0_rmse(result.audio, utt.audio)
    except NoVoicedFramesError:
        rmse = 1.0
        warning = f"{pipeline.name}/{utt.entry.utterance_id}: converted audio has no voiced frames; scored 1.0"
    sim = None
    if target_centroid is not None:
        try:
            sim = embedding_similarity(speaker_embedding(result.audio), target_centroid)
        except NoVoicedFramesError:
            sim = -1.0
    return _Scored(rmse, sim, warning)


def _aggregate(
    report: EvalReport,
    condition: str,
    variant: str,
    scored: Sequence[_Scored],
    seed: int,
) -> None:
    for s in scored:
        if s.warning:
            report.warnings.append(s.warning)
            log.warning(s.warning)
    sims = [s.cos_sim for s in scored if s.cos_sim is not None]
    report.rows.append(
        EvalRow(
            condition=condition,
            variant=variant,
            f0_rmse=float(np.mean([s.f0_rmse for s in scored])),
            cos_sim=float(np.mean(sims)) if sims else None,
            n_utterances=len(scored),
            seed=seed,
        )
    )


def _run_condition(
    pipeline: ConversionPipeline,
    utts: Sequence[_Utterance],
    inputs: Sequence[AudioBuffer],
    use_contour: bool,
    target_centroid: np.ndarray | None,
    label: str,
    settings: Settings,
    show_progress: bool,
) -> list[_Scored]:
    jobs: list[Callable[[], _Scored]] = [
        (lambda u=u, x=x: _score(pipeline, u, x, use_contour, target_centroid))
        for u, x in zip(utts, inputs)
    ]
    return run_in_threads(jobs, label, settings.max_threads, show_progress)


# -----------------------------
# Variant training
# -----------------------------
def train_variant(
    content: ContentModel,
    melody: MelodyExtractor,
    manifest: Manifest,
    cfg: RunConfig,
    variant: str = "proposed",
    *,
    use_cin: bool | None = None,
    weight_rf: float | None = None,
    weight_sim: float | None = None,
    show_progress: bool = False,
) -> ConversionPipeline:
    """Train a conversion model for one melody-source variant / ablation with the shared config."""
    conv_cfg = cfg.conversion if use_cin is None else replace(cfg.conversion, use_cin=use_cin)
    adv_cfg = cfg.adversarial
    if weight_rf is not None:
        adv_cfg = replace(adv_cfg, weight_rf=weight_rf)
    if weight_sim is not None:
        adv_cfg = replace(adv_cfg, weight_sim=weight_sim)
    run_cfg = replace(cfg, conversion=conv_cfg, adversarial=adv_cfg)

    source = melody_source_for(variant, melody, cfg.seed)
    log.info("training variant %s (cin=%s, w_rf=%s, w_sim=%s) seed=%d",
             variant, conv_cfg.use_cin, adv_cfg.weight_rf, adv_cfg.weight_sim, cfg.seed)
    trained = train_svc(content, melody, manifest, run_cfg, melody_source=source, show_progress=show_progress)
    return ConversionPipeline(content, source, trained.conversion, cfg.eval.griffin_lim_iters)


# -----------------------------
# Harnesses
# -----------------------------
def snr_sweep(
    pipelines: Sequence[ConversionPipeline],
    manifest: Manifest,
    noises: Sequence[AudioBuffer],
    cfg: RunConfig,
    snrs: Sequence[float] | None = None,
    include_clean: bool = True,
    settings: Settings | None = None,
    show_progress: bool = False,
) -> EvalReport:
    """
    Every pipeline converts the same test utterances mixed at each SNR; F0 RMSE
    is always taken against the clean source. No pipeline sees a contour.
    """
    settings = settings or Settings()
    levels = list(cfg.eval.snrs if snrs is None else snrs)
    if include_clean:
        levels = [math.inf] + [s for s in levels if not math.isinf(s)]
    if not noises and any(not math.isinf(s) for s in levels):
        raise ContractError("evalkit", "SNR sweep needs at least one noise track")
    utts = eval_utterances(manifest, cfg)
    report = EvalReport("snr-sweep", config_hash=config_hash(cfg), seed=cfg.seed)

    for snr in levels:
        inputs = [
            u.audio if math.isinf(snr)
            else noisy_copy(u.audio, noises[i % len(noises)], snr, _noise_offset(cfg.seed, i, noises[i % len(noises)]))
            for i, u in enumerate(utts)
        ]
        label = condition_label(snr)
        for p in pipelines:
            scored = _run_condition(p, utts, inputs, False, None, f"{p.name}@{label}", settings, show_progress)
            _aggregate(report, label, p.name, scored, cfg.seed)
    return report


def melody_feature_comparison(
    content: ContentModel,
    melody: MelodyExtractor,
    manifest: Manifest,
    cfg: RunConfig,
    variants: Sequence[str] = ("none", "backbone-raw", "proposed", "pitch-energy"),
    settings: Settings | None = None,
    show_progress: bool = False,
) -> EvalReport:
    """Clean test-set F0 RMSE per melody input; the pitch-energy variant reads the analytic contours."""
    settings = settings or Settings()
    utts = eval_utterances(manifest, cfg)
    report = EvalReport("melody-feature-comparison", config_hash=config_hash(cfg), seed=cfg.seed)
    for variant in variants:
        pipeline = train_variant(content, melody, manifest, cfg, variant, show_progress=show_progress)
        use_contour = variant == "pitch-energy"
        scored = _run_condition(
            pipeline, utts, [u.audio for u in utts], use_contour, None, variant, settings, show_progress
        )
        _aggregate(report, CLEAN, variant, scored, cfg.seed)
    return report


ABLATIONS: dict[str, dict] = {
    "full": {},
    "w/o L_rf": {"weight_rf": 0.0},
    "w/o CIN": {"use_cin": False},
    "w/o L_sim": {"weight_sim": 0.0},
}


def target_centroid(manifest: Manifest, limit: int = 16) -> np.ndarray:
    entries = sorted(manifest.select("train", "target_corpus"), key=lambda e: e.utterance_id)[:limit]
    return centroid([speaker_embedding(manifest.load_audio(e)) for e in entries])


def ablation_run(
    content: ContentModel,
    melody: MelodyExtractor,
    manifest: Manifest,
    cfg: RunConfig,
    include_pitch_energy: bool = True,
    settings: Settings | None = None,
    show_progress: bool = False,
) -> EvalReport:
    """
    COS-SIM of converted external-singer test utterances against the target
    singer's centroid embedding, plus F0 RMSE, for each ablation.
    """
    settings = settings or Settings()
    utts = eval_utterances(manifest, cfg, roles=("external_corpus",))
    centre = target_centroid(manifest)
    report = EvalReport("ablation", config_hash=config_hash(cfg), seed=cfg.seed)

    runs: list[tuple[str, ConversionPipeline]] = [
        (label, train_variant(content, melody, manifest, cfg, "proposed", show_progress=show_progress, **kw))
        for label, kw in ABLATIONS.items()
    ]
    if include_pitch_energy:
        runs.append(("pitch-energy", train_variant(content, melody, manifest, cfg, "pitch-energy", show_progress=show_progress)))

    for label, pipeline in runs:
        use_contour = pipeline.name == "pitch-energy"
        scored = _run_condition(
            pipeline, utts, [u.audio for u in utts], use_contour, centre, label, settings, show_progress
        )
        _aggregate(report, CLEAN, label, scored, cfg.seed)
    return report


def overall_evaluation(
    pipelines: Sequence[ConversionPipeline],
    manifest: Manifest,
    noises: Sequence[AudioBuffer],
    cfg: RunConfig,
    settings: Settings | None = None,
    show_progress: bool = False,
) -> EvalReport:
    """Clean inputs and inputs with random accompaniment at an SNR drawn per utterance."""
    settings = settings or Settings()
    if not noises:
        raise ContractError("evalkit", "overall evaluation needs at least one noise track")
    utts = eval_utterances(manifest, cfg)
    rng = np.random.default_rng([cfg.seed, 606])
    lo, hi = cfg.eval.overall_snr_range_db
    noisy: list[AudioBuffer] = []
    for i, u in enumerate(utts):
        noise = noises[int(rng.integers(0, len(noises)))]
        snr = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        noisy.append(noisy_copy(u.audio, noise, snr, _noise_offset(cfg.seed, i, noise)))

    report = EvalReport("overall", config_hash=config_hash(cfg), seed=cfg.seed)
    for label, inputs in (("noisy", noisy), (CLEAN, [u.audio for u in utts])):
        for p in pipelines:
            scored = _run_condition(p, utts, inputs, False, None, f"{p.name}@{label}", settings, show_progress)
            _aggregate(report, label, p.name, scored, cfg.seed)
    return report


def over_seeds(harness: Callable[[RunConfig], EvalReport], cfg: RunConfig, seeds: Sequence[int]) -> EvalReport:
    """Run a harness once per seed and stack the rows; the report keeps the base config hash."""
    if not seeds:
        raise ContractError("evalkit", "no seeds given")
    combined: EvalReport | None = None
    for s in seeds:
        rep = harness(cfg.with_seed(s))
        if combined is None:
            combined = EvalReport(rep.title, config_hash=config_hash(cfg), seed=int(seeds[0]))
        combined.extend(rep)
    assert combined is not None
    return combined
