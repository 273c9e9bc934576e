"""
Finite-difference audit of every registered primitive and of the full model
losses (CTC, melody regression, reconstruction, adversarial D and G). Runs in
the 64-bit build unless `dtype` says otherwise.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

import tensor_core as tc
from adversarial import AdversarialSchedule, DiscriminatorGroup, discriminator_loss, generator_loss
from config import ContentConfig, ConversionConfig, MelodyConfig
from content_ctc import ContentModel, ctc_loss
from conversion_model import ConversionModel, reconstruction_loss
from melody_extractor import MelodyExtractor, melody_loss
from tensor_core import Tensor


log = logging.getLogger("gradcheck")

Case = tuple[Callable[..., Tensor], list[Tensor]]


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    shape: tuple[int, ...]
    seed: int
    max_rel_error: float
    passed: bool


def _reduce(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Scalarize with a fixed random projection so every output coordinate matters."""
    w = tc.constant(rng.normal(size=out.shape))
    return tc.mean(out * w)


def _away_from_zero(x: np.ndarray, margin: float = 0.1) -> np.ndarray:
    return np.sign(x) * (np.abs(x) + margin) + (x == 0) * margin


PRIMITIVE_CASES = (
    "add", "sub", "mul", "scale", "matmul", "transpose", "conv1d", "layer_norm", "instance_norm",
    "softmax", "gelu", "relu", "sigmoid", "concat", "slice", "mean", "l1_distance", "squared_distance", "ctc",
)


def primitive_case(kind: str, rng: np.random.Generator) -> Case:
    n, m, k = (int(v) for v in rng.integers(2, 5, size=3))

    def p(*shape: int) -> Tensor:
        return tc.parameter(rng.normal(size=shape))

    proj_seed = int(rng.integers(0, 2**31))

    def unary(f: Callable[[Tensor], Tensor], x: Tensor) -> Case:
        return (lambda a: _reduce(f(a), np.random.default_rng(proj_seed)), [x])

    def binary(f: Callable[[Tensor, Tensor], Tensor], a: Tensor, b: Tensor) -> Case:
        return (lambda x, y: _reduce(f(x, y), np.random.default_rng(proj_seed)), [a, b])

    if kind == "add":
        return binary(lambda a, b: a + b, p(n, m), p(m))
    if kind == "sub":
        return binary(lambda a, b: a - b, p(n, m), p(n, m))
    if kind == "mul":
        return binary(lambda a, b: a * b, p(n, m), p(n, m))
    if kind == "scale":
        return unary(lambda a: a * 1.7, p(n, m))
    if kind == "matmul":
        return binary(tc.matmul, p(n, k), p(k, m))
    if kind == "transpose":
        return unary(lambda a: a.T, p(n, m))
    if kind == "conv1d":
        return binary(tc.conv1d, p(n + 2, k), p(3, k, m))
    if kind == "layer_norm":
        return unary(tc.layer_norm, p(n, m + 1))
    if kind == "instance_norm":
        return unary(tc.instance_norm, p(n + 1, m))
    if kind == "softmax":
        return unary(tc.softmax, p(n, m))
    if kind == "gelu":
        return unary(tc.gelu, p(n, m))
    if kind == "relu":
        return unary(tc.relu, tc.parameter(_away_from_zero(rng.normal(size=(n, m)))))
    if kind == "sigmoid":
        return unary(tc.sigmoid, p(n, m))
    if kind == "concat":
        return binary(lambda a, b: tc.concat([a, b], axis=1), p(n, m), p(n, k))
    if kind == "slice":
        return unary(lambda a: tc.slice_(a, 1, m + 1, axis=1), p(n, m + 2))
    if kind == "mean":
        return unary(lambda a: tc.mean(a, axis=0), p(n, m))
    if kind == "l1_distance":
        a = rng.normal(size=(n, m))
        b = a + _away_from_zero(rng.normal(size=(n, m)))
        return (tc.l1_distance, [tc.parameter(a), tc.parameter(b)])
    if kind == "squared_distance":
        return (tc.squared_distance, [p(n, m), p(n, m)])
    if kind == "ctc":
        t = int(rng.integers(3, 7))
        v = int(rng.integers(1, 4))
        labels = [int(x) for x in rng.integers(0, v, size=int(rng.integers(1, 3)))]
        return (lambda lg: ctc_loss(lg, labels), [p(t, v + 1)])
    raise KeyError(kind)


# -----------------------------
# Model losses
# -----------------------------
TINY_MELS = 6


def _tiny_content(seed: int) -> ContentModel:
    return ContentModel(ContentConfig(d_model=8, n_heads=2, n_blocks=1, ffn_dim=8, d_bnf=4), 3, seed, TINY_MELS)


def _tiny_melody(seed: int) -> MelodyExtractor:
    return MelodyExtractor(MelodyConfig(d_model=8, n_heads=2, backbone_blocks=1, ffn_dim=8, d_mel_feat=4), seed, TINY_MELS)


def _tiny_conversion(seed: int, use_cin: bool = True) -> ConversionModel:
    cfg = ConversionConfig(d_model=8, n_heads=2, content_blocks=1, conv_hidden=8, use_cin=use_cin)
    return ConversionModel(cfg, 4, 4, seed, TINY_MELS)


def model_cases(seed: int, frames: int = 4) -> dict[str, Case]:
    rng = np.random.default_rng([seed, 77])

    def x(*shape: int) -> Tensor:
        return tc.parameter(rng.normal(size=shape))

    content = _tiny_content(seed)
    melody = _tiny_melody(seed)
    conv = _tiny_conversion(seed)
    group = DiscriminatorGroup(8, 4, seed, TINY_MELS)
    target_pev = np.column_stack([rng.uniform(size=frames), rng.uniform(size=frames), rng.integers(0, 2, size=frames)])
    target_mel = tc.constant(rng.normal(size=(frames, TINY_MELS)) - 4.0)
    labels = [int(rng.integers(0, 3))]
    schedule = AdversarialSchedule(warmup_steps=0, weight_sim=1.0, weight_rf=1.0)

    def ctc_of_mel(mel: Tensor) -> Tensor:
        _, logits = content(mel)
        return ctc_loss(logits, labels)

    def melody_of_mel(mel: Tensor) -> Tensor:
        _, preds = melody(mel)
        return melody_loss(preds, target_pev)

    def rec_of_bnf(bnf: Tensor, mfeat: Tensor) -> Tensor:
        return reconstruction_loss(conv(bnf, mfeat).mel, target_mel)

    with tc.no_grad():
        fake = conv(tc.constant(rng.normal(size=(frames, 4))), tc.constant(rng.normal(size=(frames, 4))))
    fake_mel = tc.detach(fake.mel)
    fake_emb = tc.detach(fake.melody_post_cin)

    def d_of_real(real: Tensor) -> Tensor:
        return discriminator_loss(group, [real], [fake_mel], [fake_mel], [fake_emb], [fake_emb]).total

    def g_of_bnf(bnf: Tensor) -> Tensor:
        out = conv(bnf, mfeat_const)
        l_rec = reconstruction_loss(out.mel, target_mel)
        return generator_loss(group, [out.mel], [target_mel], [out.mel], [out.melody_post_cin], l_rec, schedule, 1).total

    mfeat_const = tc.constant(rng.normal(size=(frames, 4)))
    return {
        "ctc(content model)": (ctc_of_mel, [x(frames, TINY_MELS)]),
        "melody_loss(extractor)": (melody_of_mel, [x(frames, TINY_MELS)]),
        "reconstruction_loss(conversion)": (rec_of_bnf, [x(frames, 4), x(frames, 4)]),
        "discriminator_loss": (d_of_real, [x(frames, TINY_MELS)]),
        "generator_loss": (g_of_bnf, [x(frames, 4)]),
    }


# -----------------------------
# Runner
# -----------------------------
def run_grad_checks(
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    shapes_per_seed: int = 20,
    tolerance: float = 1e-5,
    eps: float = 1e-6,
    include_models: bool = True,
    model_tolerance: float | None = None,
    dtype: type = np.float64,
) -> list[GradCheckResult]:
    results: list[GradCheckResult] = []
    model_tol = tolerance if model_tolerance is None else model_tolerance
    with tc.precision(dtype):
        for seed in seeds:
            rng = np.random.default_rng([seed, 11])
            for kind in tc.primitive_kinds():
                if kind not in PRIMITIVE_CASES:
                    log.warning("grad-check: no probe for primitive %r", kind)
                    continue
                for _ in range(shapes_per_seed):
                    fn, inputs = primitive_case(kind, rng)
                    err = tc.grad_check(fn, inputs, eps=eps)
                    results.append(GradCheckResult(kind, inputs[0].shape, seed, err, err < tolerance))
            if include_models:
                for name, (fn, inputs) in model_cases(seed).items():
                    err = tc.grad_check(fn, inputs, eps=eps)
                    results.append(GradCheckResult(name, inputs[0].shape, seed, err, err < model_tol))
    failed = [r for r in results if not r.passed]
    log.info("grad-check: %d checks, %d failed", len(results), len(failed))
    for r in failed:
        log.error("grad-check failed: %s shape=%s seed=%d err=%.3g", r.name, r.shape, r.seed, r.max_rel_error)
    return results


def summarize(results: Sequence[GradCheckResult]) -> dict[str, float]:
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.max_rel_error)
    return worst
