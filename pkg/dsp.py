from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import librosa
import numpy as np
from scipy.optimize import nnls
from scipy.signal import get_window, resample_poly

from config import (
    F0_MAX_HZ,
    F0_MIN_HZ,
    FRAME_SIZE,
    HOP_SIZE,
    LOG_FLOOR,
    MEL_FMAX,
    N_FFT,
    N_MELS,
    SAMPLE_RATE,
    SPEED_RATE_BAND,
    YIN_THRESHOLD,
)
from errors import AudioError


log = logging.getLogger("dsp")


# -----------------------------
# Types
# -----------------------------
@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        if self.sample_rate <= 0:
            raise AudioError(f"sample_rate must be > 0, got {self.sample_rate}")
        arr = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(arr)):
            raise AudioError("audio contains non-finite samples")
        object.__setattr__(self, "samples", arr)

    def __len__(self) -> int:
        return int(self.samples.size)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.samples ** 2))) if self.samples.size else 0.0


@dataclass(frozen=True)
class MelSpectrogram:
    frames: np.ndarray                      # T x n_mels, natural-log magnitudes
    frame_hop_s: float = HOP_SIZE / SAMPLE_RATE
    frame_size_s: float = FRAME_SIZE / SAMPLE_RATE

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def n_mels(self) -> int:
        return int(self.frames.shape[1])


@dataclass(frozen=True)
class MelodyContour:
    f0_hz: np.ndarray
    energy: np.ndarray
    vuv: np.ndarray

    def __post_init__(self) -> None:
        f0 = np.asarray(self.f0_hz, dtype=np.float64)
        energy = np.asarray(self.energy, dtype=np.float64)
        vuv = np.asarray(self.vuv, dtype=np.int8)
        if not (f0.shape == energy.shape == vuv.shape):
            raise AudioError(f"contour lengths differ: f0={f0.shape} energy={energy.shape} vuv={vuv.shape}")
        if np.any((f0 > 0) != (vuv == 1)):
            raise AudioError("contour invariant broken: f0 > 0 must coincide with vuv == 1")
        object.__setattr__(self, "f0_hz", f0)
        object.__setattr__(self, "energy", energy)
        object.__setattr__(self, "vuv", vuv)

    def __len__(self) -> int:
        return int(self.f0_hz.size)

    def crop(self, start: int, stop: int) -> MelodyContour:
        return MelodyContour(self.f0_hz[start:stop], self.energy[start:stop], self.vuv[start:stop])


def n_frames_for(n_samples: int) -> int:
    return 1 + n_samples // HOP_SIZE


def _require_rate(audio: AudioBuffer, what: str) -> None:
    if audio.sample_rate != SAMPLE_RATE:
        raise AudioError(f"{what}: expected {SAMPLE_RATE} Hz audio, got {audio.sample_rate} Hz")


# -----------------------------
# STFT / mel
# -----------------------------
def stft(audio: AudioBuffer) -> np.ndarray:
    """Complex spectrogram, T x (1 + N_FFT/2); 800-sample Hann frames centred on every 160th sample."""
    _require_rate(audio, "stft")
    if len(audio) == 0:
        raise AudioError("stft: empty audio")
    pad_mode = "reflect" if len(audio) > N_FFT // 2 else "constant"
    spec = librosa.stft(
        audio.samples,
        n_fft=N_FFT,
        hop_length=HOP_SIZE,
        win_length=FRAME_SIZE,
        window="hann",
        center=True,
        pad_mode=pad_mode,
    )
    return spec.T


@lru_cache(maxsize=1)
def mel_filterbank() -> np.ndarray:
    """N_MELS x (1 + N_FFT/2) triangular filters over 0..8000 Hz."""
    fb = librosa.filters.mel(sr=SAMPLE_RATE, n_fft=N_FFT, n_mels=N_MELS, fmin=0.0, fmax=MEL_FMAX)
    fb.setflags(write=False)
    return fb


def mel_spectrogram(spec: np.ndarray) -> MelSpectrogram:
    n_bins = 1 + N_FFT // 2
    if spec.ndim != 2 or spec.shape[1] != n_bins:
        raise AudioError(f"mel_spectrogram expects T x {n_bins}, got {spec.shape}")
    mel = np.abs(spec) @ mel_filterbank().T
    return MelSpectrogram(np.log(np.maximum(mel, LOG_FLOOR)))


def audio_to_mel(audio: AudioBuffer) -> MelSpectrogram:
    return mel_spectrogram(stft(audio))


# fixed affine used on log-mel frames before they enter any network
MEL_SHIFT = -4.0
MEL_SCALE = 4.0


def scale_mel(frames: np.ndarray) -> np.ndarray:
    return (np.asarray(frames, dtype=np.float64) - MEL_SHIFT) / MEL_SCALE


# -----------------------------
# Framing / melody ground truth
# -----------------------------
def _frames(audio: AudioBuffer) -> np.ndarray:
    """T x FRAME_SIZE frames centred on multiples of HOP_SIZE (same grid as stft)."""
    pad = FRAME_SIZE // 2
    x = audio.samples
    mode = "reflect" if x.size > pad else "constant"
    xp = np.pad(x, (pad, pad), mode=mode)
    return np.lib.stride_tricks.sliding_window_view(xp, FRAME_SIZE)[::HOP_SIZE]


@lru_cache(maxsize=1)
def _hann() -> np.ndarray:
    return get_window("hann", FRAME_SIZE, fftbins=True)


def frame_rms(audio: AudioBuffer) -> np.ndarray:
    frames = _frames(audio)
    return np.sqrt(np.mean((frames * _hann()) ** 2, axis=1))


def _cmnd(frames: np.ndarray, tau_max: int) -> np.ndarray:
    """Cumulative-mean-normalized difference, frames x (tau_max + 1)."""
    w = frames.shape[1] - tau_max
    head = frames[:, :w]
    d = np.zeros((frames.shape[0], tau_max + 1))
    for tau in range(1, tau_max + 1):
        diff = head - frames[:, tau:tau + w]
        d[:, tau] = np.einsum("ij,ij->i", diff, diff)
    cum = np.cumsum(d[:, 1:], axis=1)
    taus = np.arange(1, tau_max + 1)
    out = np.ones_like(d)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = d[:, 1:] * taus / cum
    out[:, 1:] = np.where(cum > 1e-12, ratio, 1.0)
    return out


def _pick_period(cmnd: np.ndarray, tau_min: int, threshold: float) -> float:
    tau_max = cmnd.size - 1
    below = np.nonzero(cmnd[tau_min:tau_max] < threshold)[0]
    if below.size == 0:
        return 0.0
    tau = tau_min + int(below[0])
    while tau + 1 < tau_max and cmnd[tau + 1] < cmnd[tau]:
        tau += 1
    # parabolic refinement around the trough
    if 1 <= tau < tau_max:
        a, b, c = cmnd[tau - 1], cmnd[tau], cmnd[tau + 1]
        den = a - 2 * b + c
        if abs(den) > 1e-12:
            return tau + 0.5 * (a - c) / den
    return float(tau)


def extract_melody_ground_truth(audio: AudioBuffer) -> MelodyContour:
    """
    YIN-style F0 on 50 ms frames at the 10 ms hop:
    - voiced when the normalized-difference trough is below YIN_THRESHOLD
    - F0 restricted to [F0_MIN_HZ, F0_MAX_HZ]
    - energy = RMS of the Hann-windowed frame
    """
    _require_rate(audio, "extract_melody_ground_truth")
    frames = _frames(audio)
    energy = frame_rms(audio)

    tau_max = int(math.ceil(SAMPLE_RATE / F0_MIN_HZ))
    tau_min = max(2, int(math.floor(SAMPLE_RATE / F0_MAX_HZ)))
    cmnd = _cmnd(frames, tau_max)

    f0 = np.zeros(frames.shape[0])
    for i in range(frames.shape[0]):
        if energy[i] <= 0.0:
            continue
        period = _pick_period(cmnd[i], tau_min, YIN_THRESHOLD)
        if period <= 0.0:
            continue
        hz = SAMPLE_RATE / period
        if F0_MIN_HZ <= hz <= F0_MAX_HZ:
            f0[i] = hz
    vuv = (f0 > 0).astype(np.int8)
    return MelodyContour(f0, energy, vuv)


# -----------------------------
# Normalization
# -----------------------------
def minmax_normalize(seq: np.ndarray) -> np.ndarray:
    x = np.asarray(seq, dtype=np.float64)
    if x.size == 0:
        raise ValueError("minmax_normalize: empty sequence")
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        return np.zeros_like(x)
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def contour_to_targets(contour: MelodyContour) -> np.ndarray:
    """
    T x 3 [P, E, V]: pitch min-max normalized over voiced frames (0 where
    unvoiced), energy min-max normalized over all frames, vuv flag.
    """
    t = len(contour)
    out = np.zeros((t, 3))
    voiced = contour.vuv == 1
    if voiced.any():
        out[voiced, 0] = minmax_normalize(contour.f0_hz[voiced])
    if t:
        out[:, 1] = minmax_normalize(contour.energy)
    out[:, 2] = contour.vuv
    return out


# -----------------------------
# Noise mixing / augmentation
# -----------------------------
@dataclass(frozen=True)
class Mixture:
    audio: AudioBuffer
    noise_scale: float
    peak_gain: float = 1.0


def power(x: np.ndarray) -> float:
    return float(np.mean(np.asarray(x, dtype=np.float64) ** 2)) if np.size(x) else 0.0


def fit_length(noise: np.ndarray, n: int) -> np.ndarray:
    """Loop or truncate to n samples."""
    return np.resize(np.asarray(noise, dtype=np.float64), n)


def mix_at_snr_detailed(vocal: AudioBuffer, noise: AudioBuffer, snr_db: float) -> Mixture:
    if vocal.sample_rate != noise.sample_rate:
        raise AudioError(f"mix_at_snr: sample rates differ ({vocal.sample_rate} vs {noise.sample_rate})")
    if math.isinf(snr_db) and snr_db > 0:
        return Mixture(AudioBuffer(vocal.samples.copy(), vocal.sample_rate), 0.0, 1.0)

    p_vocal = power(vocal.samples)
    if p_vocal <= 0.0:
        raise AudioError("mix_at_snr: vocal has zero power")
    n = fit_length(noise.samples, len(vocal))
    p_noise = power(n)
    if p_noise <= 0.0:
        raise AudioError("mix_at_snr: noise has zero power")

    scale = math.sqrt(p_vocal / (p_noise * 10.0 ** (snr_db / 10.0)))
    mix = vocal.samples + scale * n

    gain = 1.0
    peak = float(np.max(np.abs(mix)))
    if peak > 0.99:
        gain = 0.99 / peak
        mix = mix * gain
        log.debug("mix_at_snr: anti-clipping gain %.4f (peak %.3f)", gain, peak)
    return Mixture(AudioBuffer(mix, vocal.sample_rate), scale, gain)


def mix_at_snr(vocal: AudioBuffer, noise: AudioBuffer, snr_db: float) -> AudioBuffer:
    return mix_at_snr_detailed(vocal, noise, snr_db).audio


def measure_snr_db(vocal: np.ndarray, noise_component: np.ndarray) -> float:
    pn = power(noise_component)
    if pn <= 0.0:
        return math.inf
    return 10.0 * math.log10(power(vocal) / pn)


def speed_perturb(audio: AudioBuffer, rate: float) -> AudioBuffer:
    """Plain resampling: duration scales by 1/rate, pitch by rate."""
    lo, hi = SPEED_RATE_BAND
    if not lo <= rate <= hi:
        raise AudioError(f"speed_perturb: rate {rate} outside [{lo}, {hi}]")
    if rate == 1.0:
        return AudioBuffer(audio.samples.copy(), audio.sample_rate)

    frac = Fraction(rate).limit_denominator(100)
    out = resample_poly(audio.samples, up=frac.denominator, down=frac.numerator)
    n_out = int(round(len(audio) / rate))
    if out.size >= n_out:
        out = out[:n_out]
    else:
        out = np.pad(out, (0, n_out - out.size))
    return AudioBuffer(np.clip(out, -1.0, 1.0), audio.sample_rate)


def resample(samples: np.ndarray, from_rate: int, to_rate: int = SAMPLE_RATE) -> np.ndarray:
    if from_rate == to_rate:
        return np.asarray(samples, dtype=np.float64)
    g = math.gcd(int(from_rate), int(to_rate))
    return resample_poly(samples, up=to_rate // g, down=from_rate // g)


# -----------------------------
# Griffin-Lim
# -----------------------------
@dataclass
class GriffinLimResult:
    audio: AudioBuffer
    spectral_errors: list[float] = field(default_factory=list)
    mel_errors: list[float] = field(default_factory=list)


def mel_to_linear(mel: MelSpectrogram) -> np.ndarray:
    """Per-frame non-negative least squares against the filterbank; T x (1 + N_FFT/2)."""
    fb = mel_filterbank()
    target = np.exp(mel.frames)
    out = np.zeros((mel.n_frames, fb.shape[1]))
    solved: dict[bytes, np.ndarray] = {}
    for i, row in enumerate(target):
        key = row.tobytes()
        if key not in solved:
            solved[key], _ = nnls(fb, row)
        out[i] = solved[key]
    return out


def _istft(spec: np.ndarray, length: int) -> np.ndarray:
    return librosa.istft(
        spec.T,
        hop_length=HOP_SIZE,
        win_length=FRAME_SIZE,
        n_fft=N_FFT,
        window="hann",
        center=True,
        length=length,
    )


def griffin_lim_reconstruct(mel: MelSpectrogram, iterations: int = 32, seed: int = 0) -> GriffinLimResult:
    """
    Classic (momentum-free) Griffin-Lim. `spectral_errors[k]` is the relative
    magnitude inconsistency after k projections. `mel_errors[k]` is the mean
    absolute log-mel error of the best iterate up to k; the best iterate is
    the one returned.
    """
    mag = mel_to_linear(mel)
    n_out = HOP_SIZE * max(mel.n_frames - 1, 1)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    norm = float(np.linalg.norm(mag)) or 1.0

    result = GriffinLimResult(AudioBuffer(np.zeros(n_out)))
    best = math.inf
    spec = mag * phase
    y = _istft(spec, n_out)
    for k in range(iterations + 1):
        rebuilt = stft(AudioBuffer(y))[: mag.shape[0]]
        result.spectral_errors.append(float(np.linalg.norm(np.abs(rebuilt) - mag[: rebuilt.shape[0]])) / norm)

        out = np.clip(y, -1.0, 1.0)
        analysed = mel_spectrogram(rebuilt if np.array_equal(out, y) else stft(AudioBuffer(out))[: mag.shape[0]])
        n = min(analysed.n_frames, mel.n_frames)
        mae = float(np.mean(np.abs(analysed.frames[:n] - mel.frames[:n])))
        if mae <= best:
            best = mae
            result.audio = AudioBuffer(out)
        result.mel_errors.append(best)

        if k == iterations:
            break
        angles = np.exp(1j * np.angle(rebuilt))
        spec = mag[: rebuilt.shape[0]] * angles
        y = _istft(spec, n_out)
    return result


def griffin_lim(mel: MelSpectrogram, iterations: int = 32) -> AudioBuffer:
    return griffin_lim_reconstruct(mel, iterations).audio
