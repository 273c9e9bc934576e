from __future__ import annotations

import configparser
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Final

from errors import ConfigError


# -----------------------------
# Runtime Settings
# -----------------------------
@dataclass(frozen=True)
class Settings:
    # Caps worker parallelism (corpus rendering, evaluation conversions)
    max_threads: int = field(default_factory=lambda: int(os.getenv("ROBUSTSVC_THREADS", "4")))

    log_path: str = field(default_factory=lambda: os.getenv("LOG_PATH", "run.log"))
    log_level: str = field(default_factory=lambda: os.getenv("LOG_LEVEL", "INFO"))


# -----------------------------
# Signal constants
# -----------------------------
SAMPLE_RATE: Final[int] = 16000
FRAME_SIZE: Final[int] = 800      # 50 ms
HOP_SIZE: Final[int] = 160        # 10 ms
N_FFT: Final[int] = 1024          # next power of two >= FRAME_SIZE
N_MELS: Final[int] = 80
MEL_FMAX: Final[float] = 8000.0
LOG_FLOOR: Final[float] = 1e-5

F0_MIN_HZ: Final[float] = 50.0
F0_MAX_HZ: Final[float] = 1000.0
YIN_THRESHOLD: Final[float] = 0.3

SPEED_RATE_BAND: Final[tuple[float, float]] = (0.9, 1.5)
CLEAN_SNR: Final[float] = math.inf  # "no noise" sentinel for mix_at_snr and sweeps


# -----------------------------
# Run config sections
# -----------------------------
@dataclass(frozen=True)
class CorpusConfig:
    target_singers: int = 1
    external_singers: int = 2
    noise_tracks: int = 4
    utterances: int = 200
    target_fraction: float = 0.5
    dev_fraction: float = 0.1
    test_fraction: float = 0.1
    notes_per_utterance: int = 6
    note_duration_s: tuple[float, float] = (0.18, 0.4)
    vocab_size: int = 16
    noise_duration_s: float = 6.0


@dataclass(frozen=True)
class ContentConfig:
    d_model: int = 128
    n_heads: int = 4
    n_blocks: int = 4
    ffn_dim: int = 256
    d_bnf: int = 64               # full scale: 256
    steps: int = 2000
    batch_size: int = 2
    lr: float = 2e-4


@dataclass(frozen=True)
class MelodyConfig:
    d_model: int = 128
    n_heads: int = 4
    backbone_blocks: int = 4
    ffn_dim: int = 256
    d_mel_feat: int = 128
    total_steps: int = 3000
    backbone_freeze_step: int = 500   # full scale: 5000
    noise_snr_range_db: tuple[float, float] = (0.0, 20.0)
    batch_size: int = 2
    segment_frames: int = 128
    lr: float = 2e-4


@dataclass(frozen=True)
class ConversionConfig:
    d_model: int = 128
    n_heads: int = 4
    content_blocks: int = 2
    conv_hidden: int = 256
    use_cin: bool = True
    segment_frames: int = 128
    lr: float = 2e-4


@dataclass(frozen=True)
class AdversarialConfig:
    warmup_steps: int = 500       # full scale: 50000
    weight_sim: float = 1.0
    weight_rf: float = 1.0
    total_steps: int = 1500
    batch_size: int = 2
    disc_hidden: int = 64
    augment_copies: int = 1
    speed_range: tuple[float, float] = SPEED_RATE_BAND


@dataclass(frozen=True)
class EvalConfig:
    snrs: tuple[float, ...] = (0.0, 5.0, 10.0, 15.0)
    seeds: tuple[int, ...] = (0, 1, 2)
    griffin_lim_iters: int = 32
    max_utterances: int = 8
    overall_snr_range_db: tuple[float, float] = (0.0, 10.0)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    content: ContentConfig = field(default_factory=ContentConfig)
    melody: MelodyConfig = field(default_factory=MelodyConfig)
    conversion: ConversionConfig = field(default_factory=ConversionConfig)
    adversarial: AdversarialConfig = field(default_factory=AdversarialConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def with_seed(self, seed: int) -> RunConfig:
        return replace(self, seed=int(seed))


SECTIONS: Final[dict[str, type]] = {
    "corpus": CorpusConfig,
    "content": ContentConfig,
    "melody": MelodyConfig,
    "conversion": ConversionConfig,
    "adversarial": AdversarialConfig,
    "eval": EvalConfig,
}


def _coerce(raw: str, default: Any, where: str) -> Any:
    s = raw.strip()
    try:
        if isinstance(default, bool):
            low = s.lower()
            if low in {"1", "true", "yes", "on"}:
                return True
            if low in {"0", "false", "no", "off"}:
                return False
            raise ValueError(s)
        if isinstance(default, int):
            return int(s)
        if isinstance(default, float):
            return float(s)  # accepts "inf"
        if isinstance(default, tuple):
            elem = default[0] if default else 0.0
            parts = [p for p in (x.strip() for x in s.split(",")) if p]
            return tuple(_coerce(p, elem, where) for p in parts)
    except ValueError as e:
        raise ConfigError(f"bad value for {where}: {raw!r}") from e
    return s


def validate_run_config(cfg: RunConfig) -> None:
    for name, steps in (
        ("content.steps", cfg.content.steps),
        ("melody.total_steps", cfg.melody.total_steps),
        ("adversarial.total_steps", cfg.adversarial.total_steps),
    ):
        if steps < 1:
            raise ConfigError(f"{name} must be >= 1, got {steps}")
    m = cfg.melody
    if m.backbone_freeze_step > m.total_steps:
        raise ConfigError(
            f"melody.backbone_freeze_step ({m.backbone_freeze_step}) exceeds total_steps ({m.total_steps})"
        )
    lo, hi = m.noise_snr_range_db
    if lo > hi:
        raise ConfigError(f"melody.noise_snr_range_db is decreasing: {m.noise_snr_range_db}")
    c = cfg.corpus
    if c.dev_fraction + c.test_fraction >= 1.0:
        raise ConfigError("corpus dev_fraction + test_fraction must leave a train split")
    if not 0.0 <= c.target_fraction <= 1.0:
        raise ConfigError(f"corpus.target_fraction out of [0,1]: {c.target_fraction}")
    if cfg.adversarial.warmup_steps < 0:
        raise ConfigError("adversarial.warmup_steps must be >= 0")


def parse_run_config(text: str, source: str = "<string>") -> RunConfig:
    """
    INI-style run config:

        [run]
        seed = 3

        [melody]
        total_steps = 1000
        noise_snr_range_db = 0, 20

    Unknown sections or keys are rejected.
    """
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {source}: {e}") from e

    seed = 0
    sections: dict[str, Any] = {}
    for name in cp.sections():
        if name == "run":
            for key, raw in cp.items(name):
                if key != "seed":
                    raise ConfigError(f"unknown key [run].{key} in {source}")
                seed = _coerce(raw, 0, "run.seed")
            continue
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}] in {source}")
        cls = SECTIONS[name]
        defaults = cls()
        known = {f.name for f in fields(cls)}
        kwargs: dict[str, Any] = {}
        for key, raw in cp.items(name):
            if key not in known:
                raise ConfigError(f"unknown key [{name}].{key} in {source}")
            kwargs[key] = _coerce(raw, getattr(defaults, key), f"{name}.{key}")
        sections[name] = cls(**kwargs)

    cfg = RunConfig(seed=seed, **sections)
    validate_run_config(cfg)
    return cfg


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_run_config(p.read_text(encoding="utf-8"), source=str(p))


def dump_run_config(cfg: RunConfig) -> str:
    lines = ["[run]", f"seed = {cfg.seed}", ""]
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for key, val in asdict(getattr(cfg, name)).items():
            if isinstance(val, (tuple, list)):
                val = ", ".join(str(v) for v in val)
            lines.append(f"{key} = {val}")
        lines.append("")
    return "\n".join(lines)


def _canonical(val: Any) -> Any:
    if isinstance(val, float):
        return repr(val)  # keeps inf and exact digits stable
    if isinstance(val, (list, tuple)):
        return [_canonical(v) for v in val]
    if isinstance(val, dict):
        return {k: _canonical(v) for k, v in val.items()}
    return val


def config_hash(cfg: RunConfig) -> str:
    payload = json.dumps(_canonical(asdict(cfg)), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def section_from_dict(cls: type, data: dict[str, Any]) -> Any:
    """Rebuild a section dataclass from JSON-decoded metadata (lists back to tuples)."""
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys in metadata: {unknown}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})
