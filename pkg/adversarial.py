from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

import tensor_core as tc
from checkpoint import save_module
from config import N_MELS, AdversarialConfig, RunConfig, config_hash
from content_ctc import ContentModel, FeatureSequence, extract_bnf
from conversion_model import ConversionModel, MelodySource, RobustMelodySource
from corpus import Manifest, ManifestEntry
from dsp import MEL_SCALE, MEL_SHIFT, AudioBuffer, audio_to_mel, speed_perturb
from errors import ContractError
from layers import Conv1d, Linear, Module, retry_nonfinite
from melody_extractor import MelodyExtractor
from progress import MetricsWriter, RunStats, live_progress, refresh
from tensor_core import Tensor


log = logging.getLogger("adversarial")


# -----------------------------
# Discriminators
# -----------------------------
class ConvDiscriminator(Module):
    """conv(3)-relu-conv(3)-relu over mel frames, per-frame linear score, mean over time."""

    def __init__(self, n_mels: int, hidden: int, rng: np.random.Generator) -> None:
        self.conv1 = Conv1d(n_mels, hidden, 3, rng)
        self.conv2 = Conv1d(hidden, hidden, 3, rng)
        self.out = Linear(hidden, 1, rng)

    def forward(self, mel: Tensor) -> Tensor:
        x = (mel - MEL_SHIFT) / MEL_SCALE
        h = tc.relu(self.conv2(tc.relu(self.conv1(x))))
        return tc.mean(self.out(h))


class EmbeddingDiscriminator(Module):
    """MLP over the time-mean of a melody embedding sequence."""

    def __init__(self, d_model: int, hidden: int, rng: np.random.Generator) -> None:
        self.fc1 = Linear(d_model, hidden, rng)
        self.fc2 = Linear(hidden, 1, rng)

    def forward(self, emb: Tensor) -> Tensor:
        t = emb.shape[0]
        pool = tc.constant(np.full((1, t), 1.0 / t, dtype=emb.values.dtype))
        return tc.mean(self.fc2(tc.relu(self.fc1(pool @ emb))))


class DiscriminatorGroup(Module):
    def __init__(self, d_model: int, hidden: int, seed: int, n_mels: int = N_MELS) -> None:
        rng = np.random.default_rng([seed, 4])
        self.d_rf = ConvDiscriminator(n_mels, hidden, rng)
        self.d_conv = ConvDiscriminator(n_mels, hidden, rng)
        self.d_emb = EmbeddingDiscriminator(d_model, hidden, rng)


@dataclass(frozen=True)
class AdversarialSchedule:
    warmup_steps: int = 500
    weight_sim: float = 1.0
    weight_rf: float = 1.0

    @classmethod
    def from_config(cls, cfg: AdversarialConfig) -> AdversarialSchedule:
        return cls(cfg.warmup_steps, cfg.weight_sim, cfg.weight_rf)

    def weights(self, step: int) -> tuple[float, float]:
        """(w_sim, w_rf); literally 0.0 before the warm-up threshold."""
        if step < self.warmup_steps:
            return 0.0, 0.0
        return float(self.weight_sim), float(self.weight_rf)


# -----------------------------
# Losses
# -----------------------------
@dataclass
class LossResult:
    total: Tensor
    terms: dict[str, float] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)


def _one() -> Tensor:
    return tc.constant(np.asarray(1.0, dtype=tc.default_dtype()))


def _sq_to(score: Tensor, target: float) -> Tensor:
    ref = tc.constant(np.full(score.shape, target, dtype=score.values.dtype))
    return tc.squared_distance(score, ref)


def _batch_mean(disc: Module, xs: Sequence[Tensor], target: float) -> Tensor:
    total: Tensor | None = None
    for x in xs:
        term = _sq_to(disc(x), target)
        total = term if total is None else total + term
    assert total is not None
    return total / float(len(xs))


def _sum(terms: Sequence[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def discriminator_loss(
    group: DiscriminatorGroup,
    real_mels: Sequence[Tensor],
    recon_mels: Sequence[Tensor],
    converted_mels: Sequence[Tensor],
    target_embs: Sequence[Tensor],
    external_embs: Sequence[Tensor],
) -> LossResult:
    """
    Least-squares D objective, L(D) = L_sim(D) + L_rf(D_r):
      rf:   (D_rf(real) - 1)^2 + D_rf(recon)^2
      conv: (D_conv(real) - 1)^2 + D_conv(converted)^2
      emb:  (D_emb(target emb) - 1)^2 + D_emb(external emb)^2
    Branches with an empty batch are skipped and reported in `warnings`.
    """
    branches = {
        "rf": (group.d_rf, real_mels, recon_mels),
        "conv": (group.d_conv, real_mels, converted_mels),
        "emb": (group.d_emb, target_embs, external_embs),
    }
    parts: list[Tensor] = []
    res_terms: dict[str, float] = {}
    warnings: list[str] = []
    for name, (disc, pos, neg) in branches.items():
        if not pos or not neg:
            msg = f"discriminator branch {name!r} skipped: empty batch"
            warnings.append(msg)
            log.warning(msg)
            continue
        term = _batch_mean(disc, pos, 1.0) + _batch_mean(disc, neg, 0.0)
        res_terms[name] = term.item()
        parts.append(term)
    if not parts:
        raise ContractError("adversarial", "every discriminator branch is empty")
    total = _sum(parts)
    res_terms["rf_d"] = res_terms.get("rf", 0.0)
    res_terms["sim_d"] = res_terms.get("conv", 0.0) + res_terms.get("emb", 0.0)
    return LossResult(total, res_terms, warnings)


def generator_loss(
    group: DiscriminatorGroup,
    recon_mels: Sequence[Tensor],
    target_mels: Sequence[Tensor],
    converted_mels: Sequence[Tensor],
    external_embs: Sequence[Tensor],
    l_rec: Tensor,
    schedule: AdversarialSchedule,
    step: int,
) -> LossResult:
    """
    L(G) = w_sim(step) * L_sim(G) + w_rf(step) * L_rf(G) + L_rec, with
      L_rf(G)  = (D_rf(recon) - 1)^2
      L_sim(G) = (D_conv(converted) - 1)^2 + (D_emb(external emb) - 1)^2
    A term whose weight is 0 is left out, so before warm-up L(G) is L_rec itself.
    """
    if step < 0:
        raise ValueError(f"generator_loss: step must be >= 0, got {step}")
    if len(recon_mels) != len(target_mels):
        raise ContractError("adversarial", "reconstructed and target batches differ in size")
    w_sim, w_rf = schedule.weights(step)
    total = l_rec
    terms: dict[str, float] = {"rec": l_rec.item(), "w_sim": w_sim, "w_rf": w_rf, "rf_g": 0.0, "sim_g": 0.0}
    warnings: list[str] = []

    if w_rf != 0.0 and recon_mels:
        l_rf = _batch_mean(group.d_rf, recon_mels, 1.0)
        terms["rf_g"] = l_rf.item()
        total = total + l_rf * w_rf

    if w_sim != 0.0:
        sims: list[Tensor] = []
        if converted_mels:
            sims.append(_batch_mean(group.d_conv, converted_mels, 1.0))
        if external_embs:
            sims.append(_batch_mean(group.d_emb, external_embs, 1.0))
        if sims:
            l_sim = _sum(sims)
            terms["sim_g"] = l_sim.item()
            total = total + l_sim * w_sim
        else:
            warnings.append("similarity branch has no external batch")
    return LossResult(total, terms, warnings)


# -----------------------------
# Training
# -----------------------------
@dataclass(frozen=True)
class _Prepared:
    bnf: np.ndarray
    melody: np.ndarray
    mel: np.ndarray


@dataclass
class SvcTrainResult:
    conversion: ConversionModel
    discriminators: DiscriminatorGroup
    curves: list[dict[str, float]] = field(default_factory=list)
    upstream_hashes_before: dict[str, str] = field(default_factory=dict)
    upstream_hashes_after: dict[str, str] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def curve(self, key: str) -> list[float]:
        return [row[key] for row in self.curves]


def _prepare(
    audio: AudioBuffer,
    content: ContentModel,
    source: MelodySource,
    contour=None,
) -> _Prepared:
    mel = audio_to_mel(audio)
    bnf = extract_bnf(content, mel)
    mfeat: FeatureSequence = source(audio, contour)
    return _Prepared(bnf.frames, mfeat.frames, mel.frames)


def prepare_utterances(
    manifest: Manifest,
    entries: Sequence[ManifestEntry],
    content: ContentModel,
    source: MelodySource,
    augment: tuple[int, tuple[float, float]] | None,
    rng: np.random.Generator,
) -> list[_Prepared]:
    """Upstream features are computed once, with gradients off; optional speed-perturbed copies."""
    out: list[_Prepared] = []
    with tc.no_grad():
        for e in entries:
            audio = manifest.load_audio(e)
            contour = manifest.load_contour(e) if e.contour_path else None
            out.append(_prepare(audio, content, source, contour))
            if augment is None:
                continue
            copies, (lo, hi) = augment
            for _ in range(copies):
                rate = round(float(rng.uniform(lo, hi)), 2)
                if rate == 1.0:
                    continue
                # the analytic contour no longer lines up; pitch-energy sources fall back to the estimator
                out.append(_prepare(speed_perturb(audio, rate), content, source, None))
    return out


def _crop(p: _Prepared, seg: int, rng: np.random.Generator) -> tuple[Tensor, Tensor, Tensor]:
    t = min(p.mel.shape[0], p.bnf.shape[0], p.melody.shape[0])
    start = int(rng.integers(0, t - seg + 1)) if t > seg else 0
    stop = min(t, start + seg)
    dt = tc.default_dtype()
    return (
        tc.constant(p.bnf[start:stop].astype(dt)),
        tc.constant(p.melody[start:stop].astype(dt)),
        tc.constant(p.mel[start:stop].astype(dt)),
    )


# (target segments, external segments) for one iteration
Batch = tuple[list, list]


def train_svc(
    content: ContentModel,
    melody: MelodyExtractor,
    manifest: Manifest,
    cfg: RunConfig,
    melody_source: MelodySource | None = None,
    metrics_path: str | Path | None = None,
    show_progress: bool = False,
    check_separation: bool = False,
) -> SvcTrainResult:
    """
    One discriminator step then one generator step per iteration. Target-corpus
    segments drive L_rec and D_rf; external-corpus segments are converted and
    drive D_conv and D_emb. Upstream models stay frozen.
    """
    acfg = cfg.adversarial
    ccfg = cfg.conversion
    source = melody_source or RobustMelodySource(melody)
    schedule = AdversarialSchedule.from_config(acfg)
    rng = np.random.default_rng([cfg.seed, 303])

    hashes_before = {"content": content.parameter_hash(), "melody": melody.parameter_hash()}

    target_entries = manifest.select("train", "target_corpus")
    external_entries = manifest.select("train", "external_corpus")
    if not target_entries:
        raise ContractError("adversarial", "manifest has no target-corpus training utterances")

    result_warnings: list[str] = []
    if not external_entries:
        msg = "no external_corpus entries: similarity branch disabled (degenerate mode)"
        result_warnings.append(msg)
        log.warning(msg)

    augment = (acfg.augment_copies, acfg.speed_range) if acfg.augment_copies > 0 else None
    targets = prepare_utterances(manifest, target_entries, content, source, augment, rng)
    externals = prepare_utterances(manifest, external_entries, content, source, None, rng)
    log.info(
        "train-svc: %d target utterances (%d with augmentation), %d external, variant=%s",
        len(target_entries), len(targets), len(externals), getattr(source, "name", "?"),
    )

    conv = ConversionModel(ccfg, content.cfg.d_bnf, source.dim, cfg.seed)
    group = DiscriminatorGroup(ccfg.d_model, acfg.disc_hidden, cfg.seed)
    g_params = conv.named_parameters()
    d_params = group.named_parameters()
    g_state = tc.AdamState(lr=ccfg.lr)
    d_state = tc.AdamState(lr=ccfg.lr)
    seg = ccfg.segment_frames

    def draw_batch() -> Batch:
        tgt = [_crop(targets[int(i)], seg, rng) for i in rng.integers(0, len(targets), size=acfg.batch_size)]
        ext = (
            [_crop(externals[int(i)], seg, rng) for i in rng.integers(0, len(externals), size=acfg.batch_size)]
            if externals else []
        )
        return tgt, ext

    @retry_nonfinite
    def d_step(step: int) -> tuple[LossResult, Batch]:
        """D step on detached generator outputs."""
        tgt, ext = draw_batch()
        with tc.no_grad():
            recon_out = [conv(b, m) for b, m, _ in tgt]
            conv_out = [conv(b, m) for b, m, _ in ext]
        with tc.Tape():
            d_res = discriminator_loss(
                group,
                real_mels=[mel for _, _, mel in tgt],
                recon_mels=[tc.detach(o.mel) for o in recon_out],
                converted_mels=[tc.detach(o.mel) for o in conv_out],
                target_embs=[tc.detach(o.melody_post_cin) for o in recon_out],
                external_embs=[tc.detach(o.melody_post_cin) for o in conv_out],
            )
            d_grads = tc.backward(d_res.total)
        g_hash = conv.parameter_hash() if check_separation else ""
        tc.adam_step(d_params, d_grads, d_state)
        if check_separation and conv.parameter_hash() != g_hash:
            raise ContractError("adversarial", f"D update changed generator parameters at step {step}")
        return d_res, (tgt, ext)

    @retry_nonfinite
    def g_step(step: int, pending: list[Batch]) -> LossResult:
        # the first attempt reuses the D batch; a retry draws a fresh one
        tgt, ext = pending.pop() if pending else draw_batch()
        with tc.Tape():
            recon = [conv(b, m) for b, m, _ in tgt]
            rec_terms = [tc.l1_distance(o.mel, mel) for o, (_, _, mel) in zip(recon, tgt)]
            l_rec = _sum(rec_terms) / float(len(rec_terms))
            w_sim, _ = schedule.weights(step)
            converted = [conv(b, m) for b, m, _ in ext] if (ext and w_sim != 0.0) else []
            g_res = generator_loss(
                group,
                recon_mels=[o.mel for o in recon],
                target_mels=[mel for _, _, mel in tgt],
                converted_mels=[o.mel for o in converted],
                external_embs=[o.melody_post_cin for o in converted],
                l_rec=l_rec,
                schedule=schedule,
                step=step,
            )
            g_grads = tc.backward(g_res.total)
        d_hash = group.parameter_hash() if check_separation else ""
        tc.adam_step(g_params, g_grads, g_state)
        if check_separation and group.parameter_hash() != d_hash:
            raise ContractError("adversarial", f"G update changed discriminator parameters at step {step}")
        return g_res

    def one_iteration(step: int) -> dict[str, float]:
        d_res, batch = d_step(step)
        g_res = g_step(step, [batch])
        t = g_res.terms
        return {
            "L_rec": t["rec"],
            "L_rf_D": d_res.terms.get("rf_d", 0.0),
            "L_rf_G": t["rf_g"],
            "L_sim_D": d_res.terms.get("sim_d", 0.0),
            "L_sim_G": t["sim_g"],
            "w_sim": t["w_sim"],
            "w_rf": t["w_rf"],
        }

    result = SvcTrainResult(conv, group, upstream_hashes_before=hashes_before, warnings=result_warnings)
    stats = RunStats(task_name="TRAIN-SVC", total_units=acfg.total_steps)
    with MetricsWriter(metrics_path, "adversarial.metrics") as mw, live_progress(stats, enabled=show_progress) as live:
        for step in range(acfg.total_steps):
            row = one_iteration(step)
            result.curves.append(row)
            mw.write(step, row)
            stats.record_metrics({"L_rec": row["L_rec"], "w_sim": row["w_sim"]})
            stats.record_unit_done()
            refresh(live, stats)

    conv.trained_steps = acfg.total_steps
    result.upstream_hashes_after = {"content": content.parameter_hash(), "melody": melody.parameter_hash()}
    if result.upstream_hashes_after != hashes_before:
        raise ContractError("adversarial", "upstream content/melody parameters changed during train_svc")
    if result.curves:
        log.info("train-svc: L_rec %.4f -> %.4f", result.curves[0]["L_rec"], result.curves[-1]["L_rec"])
    return result


def save_discriminators(group: DiscriminatorGroup, path: str | Path, cfg: RunConfig) -> Path:
    return save_module(group, path, {"kind": "discriminators", "seed": cfg.seed, "config_hash": config_hash(cfg)})
