from __future__ import annotations

import hashlib
import logging
import math
from typing import Any, Iterator, Mapping

import numpy as np
from tenacity import RetryCallState, retry, retry_if_exception, stop_after_attempt

import tensor_core as tc
from errors import NonFiniteGradientError, ShapeError
from tensor_core import Tensor


# -----------------------------
# Module base
# -----------------------------
class Module:
    """
    Parameters are the attributes holding requires-grad Tensors; child modules
    (attributes, or lists of modules) are walked recursively in attribute order.
    """

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, Any]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            yield key, val

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in self._children():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(prefix=f"{name}."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(prefix=f"{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.values.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        if strict:
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            if missing or extra:
                raise ShapeError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.values.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} vs model {p.values.shape}")
            p.values = arr.astype(p.values.dtype, copy=True)

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters().items()):
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(p.values).tobytes())
        return h.hexdigest()


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape: tuple[int, ...]) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def sinusoidal_positions(n_frames: int, d_model: int) -> np.ndarray:
    pos = np.arange(n_frames)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def add_positions(x: Tensor) -> Tensor:
    t, d = x.shape
    return x + tc.constant(sinusoidal_positions(t, d).astype(x.values.dtype))


# -----------------------------
# Layers
# -----------------------------
class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True) -> None:
        self.weight = tc.parameter(glorot(rng, d_in, d_out, (d_in, d_out)))
        self.bias = tc.parameter(np.zeros(d_out)) if bias else None
        self.d_in = d_in
        self.d_out = d_out

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"Linear expects last dim {self.d_in}, got {x.shape}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator) -> None:
        self.weight = tc.parameter(glorot(rng, c_in * kernel, c_out * kernel, (kernel, c_in, c_out)))
        self.bias = tc.parameter(np.zeros(c_out))

    def forward(self, x: Tensor) -> Tensor:
        return tc.conv1d(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, d: int) -> None:
        self.gamma = tc.parameter(np.ones(d))
        self.beta = tc.parameter(np.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x) * self.gamma + self.beta


class MultiHeadSelfAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator) -> None:
        if d_model % n_heads:
            raise ShapeError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)

    def forward(self, x: Tensor) -> Tensor:
        q, k, v = self.wq(x), self.wk(x), self.wv(x)
        scale = 1.0 / math.sqrt(self.d_head)
        heads = []
        for h in range(self.n_heads):
            lo, hi = h * self.d_head, (h + 1) * self.d_head
            qh = tc.slice_(q, lo, hi, axis=1)
            kh = tc.slice_(k, lo, hi, axis=1)
            vh = tc.slice_(v, lo, hi, axis=1)
            attn = tc.softmax((qh @ kh.T) * scale)
            heads.append(attn @ vh)
        merged = heads[0] if len(heads) == 1 else tc.concat(heads, axis=1)
        return self.wo(merged)


class FFTBlock(Module):
    """Self-attention + conv(k)-relu-conv(k) feed-forward, each residual then layer-normed."""

    def __init__(self, d_model: int, n_heads: int, conv_hidden: int, rng: np.random.Generator, kernel: int = 3) -> None:
        self.attn = MultiHeadSelfAttention(d_model, n_heads, rng)
        self.norm1 = LayerNorm(d_model)
        self.conv1 = Conv1d(d_model, conv_hidden, kernel, rng)
        self.conv2 = Conv1d(conv_hidden, d_model, kernel, rng)
        self.norm2 = LayerNorm(d_model)

    def forward(self, x: Tensor) -> Tensor:
        x = self.norm1(x + self.attn(x))
        return self.norm2(x + self.conv2(tc.relu(self.conv1(x))))


class TransformerBlock(Module):
    def __init__(self, d_model: int, n_heads: int, ffn_dim: int, rng: np.random.Generator) -> None:
        self.attn = MultiHeadSelfAttention(d_model, n_heads, rng)
        self.norm1 = LayerNorm(d_model)
        self.ff1 = Linear(d_model, ffn_dim, rng)
        self.ff2 = Linear(ffn_dim, d_model, rng)
        self.norm2 = LayerNorm(d_model)

    def forward(self, x: Tensor) -> Tensor:
        x = self.norm1(x + self.attn(x))
        return self.norm2(x + self.ff2(tc.gelu(self.ff1(x))))


def run_stack(blocks: list[Module], x: Tensor) -> Tensor:
    for block in blocks:
        x = block(x)
    return x


# -----------------------------
# Training helpers
# -----------------------------
def _is_bad_gradient(exc: BaseException) -> bool:
    return isinstance(exc, NonFiniteGradientError)


def _log_retry(state: RetryCallState) -> None:
    exc = state.outcome.exception() if state.outcome else None
    logging.getLogger("train").warning("attempt %d rejected (%s); redrawing batch", state.attempt_number, exc)


# a step whose gradient is non-finite is redrawn with a fresh batch, at most 3 attempts
retry_nonfinite = retry(
    reraise=True,
    stop=stop_after_attempt(3),
    retry=retry_if_exception(_is_bad_gradient),
    before_sleep=_log_retry,
)
