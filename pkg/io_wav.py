from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import soundfile as sf

from config import SAMPLE_RATE
from dsp import AudioBuffer, resample
from errors import AudioError


log = logging.getLogger("io_wav")


def read_wav(path: str | Path) -> AudioBuffer:
    """Mono float audio at SAMPLE_RATE; multi-channel input is averaged, other rates are resampled."""
    p = Path(path)
    try:
        data, rate = sf.read(str(p), dtype="float64", always_2d=True)
    except (RuntimeError, sf.LibsndfileError) as e:
        raise AudioError(f"cannot read {p}: {e}") from e
    samples = data.mean(axis=1)
    if rate != SAMPLE_RATE:
        log.debug("%s: resampling %d Hz -> %d Hz", p.name, rate, SAMPLE_RATE)
        samples = resample(samples, rate, SAMPLE_RATE)
    return AudioBuffer(np.clip(samples, -1.0, 1.0), SAMPLE_RATE)


def write_wav(path: str | Path, audio: AudioBuffer) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(p), np.clip(audio.samples, -1.0, 1.0), audio.sample_rate, subtype="PCM_16", format="WAV")
    return p
