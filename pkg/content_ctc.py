from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

import tensor_core as tc
from checkpoint import load_checkpoint, save_module
from config import HOP_SIZE, N_MELS, SAMPLE_RATE, ContentConfig, RunConfig, config_hash, section_from_dict
from corpus import Manifest
from dsp import MelSpectrogram, audio_to_mel, scale_mel
from errors import ContractError, LabelTooLongError, ShapeError
from layers import Linear, Module, TransformerBlock, add_positions, retry_nonfinite, run_stack
from progress import MetricsWriter, RunStats, live_progress, refresh
from tensor_core import Tensor


log = logging.getLogger("content_ctc")


# -----------------------------
# Features
# -----------------------------
@dataclass(frozen=True)
class FeatureSequence:
    frames: np.ndarray
    frame_hop_s: float = HOP_SIZE / SAMPLE_RATE

    def __post_init__(self) -> None:
        if self.frames.ndim != 2:
            raise ShapeError(f"FeatureSequence expects T x d frames, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ShapeError("FeatureSequence holds non-finite values")

    @property
    def d(self) -> int:
        return int(self.frames.shape[1])

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    def crop(self, start: int, stop: int) -> FeatureSequence:
        return FeatureSequence(self.frames[start:stop], self.frame_hop_s)


# -----------------------------
# CTC primitive
# -----------------------------
def required_frames(labels: Sequence[int]) -> int:
    """Shortest T that can emit `labels`: one frame per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return max(1, len(labels) + repeats)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _ctc_fwd(logits: np.ndarray, labels: tuple[int, ...], blank: int):
    t_len, n_sym = logits.shape
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    s_len = ext.size

    # skip transition s-2 -> s allowed onto a non-blank that differs from ext[s-2]
    skip = np.zeros(s_len, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    logp = _log_softmax(logits.astype(np.float64))
    emit = logp[:, ext]  # T x S
    neg = -np.inf

    alpha = np.full((t_len, s_len), neg)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    # beta excludes the emission at t itself
    beta = np.full((t_len, s_len), neg)
    beta[-1, -1] = 0.0
    if s_len > 1:
        beta[-1, -2] = 0.0
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc

    tail = alpha[-1, -1] if s_len == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    loss = -tail
    return np.asarray(loss, dtype=logits.dtype), (logp, alpha, beta, ext, float(tail), n_sym)


def _ctc_bwd(saved, g):
    logp, alpha, beta, ext, log_total, n_sym = saved
    occupancy = np.exp(alpha + beta - log_total)  # T x S, posterior of being at s at t
    per_symbol = np.zeros((logp.shape[0], n_sym))
    np.add.at(per_symbol, (slice(None), ext), occupancy)
    grad = np.exp(logp) - per_symbol
    return ((grad * float(g)).astype(g.dtype),)


def _ctc_forward_checked(logits: np.ndarray, labels: tuple[int, ...], blank: int):
    if logits.ndim != 2 or logits.shape[1] != blank + 1:
        raise ShapeError(f"ctc: logits must be T x (V+1) with blank={blank}, got {logits.shape}")
    if any(not 0 <= lab < blank for lab in labels):
        raise ShapeError(f"ctc: labels must lie in [0, {blank}), got {list(labels)}")
    need = required_frames(labels)
    if logits.shape[0] < need:
        raise LabelTooLongError(logits.shape[0], need)
    return _ctc_fwd(logits, labels, blank)


tc.register_primitive(
    "ctc",
    _ctc_forward_checked,
    _ctc_bwd,
    "(T, V+1) logits, attrs labels/blank -> scalar -log P(labels); blank is the last column",
)


def ctc_loss(logits: Tensor, labels: Sequence[int]) -> Tensor:
    blank = logits.shape[1] - 1
    return tc.apply_primitive("ctc", [logits], labels=tuple(int(x) for x in labels), blank=blank)


def greedy_decode(logits: np.ndarray) -> list[int]:
    blank = logits.shape[1] - 1
    best = np.argmax(logits, axis=1)
    out: list[int] = []
    prev = -1
    for k in best:
        k = int(k)
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    row = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        prev, row[0] = row[0], i
        for j, y in enumerate(b, 1):
            cur = min(row[j] + 1, row[j - 1] + 1, prev + (x != y))
            prev, row[j] = row[j], cur
    return row[-1]


def token_error_rate(hyps: Sequence[Sequence[int]], refs: Sequence[Sequence[int]]) -> float:
    errors = sum(edit_distance(h, r) for h, r in zip(hyps, refs))
    total = sum(len(r) for r in refs)
    return errors / total if total else 0.0


# -----------------------------
# Model
# -----------------------------
class ContentModel(Module):
    """mel -> transformer encoder -> bottleneck (BNF) -> classifier over vocab + blank."""

    def __init__(self, cfg: ContentConfig, vocab_size: int, seed: int, n_mels: int = N_MELS) -> None:
        rng = np.random.default_rng([seed, 1])
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.n_mels = n_mels
        self.inp = Linear(n_mels, cfg.d_model, rng)
        self.blocks = [TransformerBlock(cfg.d_model, cfg.n_heads, cfg.ffn_dim, rng) for _ in range(cfg.n_blocks)]
        self.bottleneck = Linear(cfg.d_model, cfg.d_bnf, rng)
        self.classifier = Linear(cfg.d_bnf, vocab_size + 1, rng)

    def forward(self, mel: Tensor) -> tuple[Tensor, Tensor]:
        if mel.ndim != 2 or mel.shape[1] != self.n_mels:
            raise ShapeError(f"ContentModel expects T x {self.n_mels} mel, got {mel.shape}")
        h = run_stack(self.blocks, add_positions(self.inp(mel)))
        bnf = self.bottleneck(h)
        return bnf, self.classifier(bnf)


def mel_input(mel: MelSpectrogram) -> Tensor:
    return tc.constant(scale_mel(mel.frames).astype(tc.default_dtype()))


def extract_bnf(model: ContentModel, mel: MelSpectrogram) -> FeatureSequence:
    if mel.n_mels != model.n_mels:
        raise ShapeError(f"extract_bnf: model expects {model.n_mels} mel channels, got {mel.n_mels}")
    with tc.no_grad():
        bnf, _ = model(mel_input(mel))
    return FeatureSequence(np.asarray(bnf.values))


def decode(model: ContentModel, mel: MelSpectrogram) -> list[int]:
    with tc.no_grad():
        _, logits = model(mel_input(mel))
    return greedy_decode(logits.values)


# -----------------------------
# Training
# -----------------------------
@dataclass
class ContentTrainResult:
    model: ContentModel
    losses: list[float] = field(default_factory=list)
    dev_token_error_rate: float | None = None
    warnings: list[str] = field(default_factory=list)


def _batch_loss(model: ContentModel, batch: Sequence[tuple[Tensor, tuple[int, ...]]]) -> Tensor:
    total: Tensor | None = None
    for mel, labels in batch:
        _, logits = model(mel)
        term = ctc_loss(logits, labels)
        total = term if total is None else total + term
    assert total is not None
    return total / float(len(batch))


def train_content_model(
    manifest: Manifest,
    cfg: RunConfig,
    metrics_path: str | Path | None = None,
    show_progress: bool = False,
    steps: int | None = None,
) -> ContentTrainResult:
    ccfg = cfg.content
    n_steps = ccfg.steps if steps is None else steps
    train = [e for e in manifest.select("train") if e.role != "noise"]
    if not train:
        raise ContractError("content-ctc", "manifest has no training utterances")
    if any(not e.token_label_sequence for e in train):
        raise ContractError("content-ctc", "every training utterance needs a token label sequence")

    vocab = max(max(e.token_label_sequence) for e in train) + 1
    vocab = max(vocab, cfg.corpus.vocab_size)
    model = ContentModel(ccfg, vocab, cfg.seed)
    params = model.named_parameters()
    state = tc.AdamState(lr=ccfg.lr)
    rng = np.random.default_rng([cfg.seed, 101])

    data = [(mel_input(audio_to_mel(manifest.load_audio(e))), e.token_label_sequence) for e in train]
    log.info("content-ctc: %d training utterances, vocab=%d, %d steps", len(data), vocab, n_steps)

    @retry_nonfinite
    def one_step() -> float:
        idx = rng.integers(0, len(data), size=min(ccfg.batch_size, len(data)))
        with tc.Tape():
            loss = _batch_loss(model, [data[int(i)] for i in idx])
            grads = tc.backward(loss)
        tc.adam_step(params, grads, state)
        return loss.item()

    result = ContentTrainResult(model)
    stats = RunStats(task_name="CONTENT-CTC", total_units=n_steps)
    with MetricsWriter(metrics_path, "content_ctc.metrics") as mw, live_progress(stats, enabled=show_progress) as live:
        for step in range(n_steps):
            value = one_step()
            result.losses.append(value)
            mw.write(step, {"ctc": value})
            stats.record_metrics({"ctc": value})
            stats.record_unit_done()
            refresh(live, stats)

        dev = [e for e in manifest.select("dev") if e.role != "noise"]
        if dev:
            hyps = [decode(model, audio_to_mel(manifest.load_audio(e))) for e in dev]
            result.dev_token_error_rate = token_error_rate(hyps, [e.token_label_sequence for e in dev])
            mw.write(n_steps, {"dev_ter": result.dev_token_error_rate})
        else:
            result.warnings.append("no dev utterances; token error rate not computed")
            log.warning(result.warnings[-1])

    if result.losses:
        log.info("content-ctc: loss %.4f -> %.4f, dev TER %s", result.losses[0], result.losses[-1], result.dev_token_error_rate)
    return result


# -----------------------------
# Persistence
# -----------------------------
def save_content_model(model: ContentModel, path: str | Path, cfg: RunConfig, steps: int) -> Path:
    meta = {
        "kind": "content",
        "config": asdict(model.cfg),
        "vocab_size": model.vocab_size,
        "n_mels": model.n_mels,
        "seed": cfg.seed,
        "steps": steps,
        "config_hash": config_hash(cfg),
    }
    return save_module(model, path, meta)


def load_content_model(path: str | Path) -> ContentModel:
    ckpt = load_checkpoint(path)
    meta = ckpt.meta
    if meta.get("kind") != "content":
        raise ContractError("content-ctc", f"{path} is not a content model checkpoint")
    model = ContentModel(section_from_dict(ContentConfig, meta["config"]), int(meta["vocab_size"]), int(meta["seed"]), int(meta["n_mels"]))
    model.load_state_dict(ckpt.tensors)
    return model
