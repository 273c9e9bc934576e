from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Iterable

import numpy as np
from scipy.signal import butter, sosfilt

from checkpoint import load_checkpoint, save_checkpoint
from config import HOP_SIZE, SAMPLE_RATE, CorpusConfig, Settings
from dsp import AudioBuffer, MelodyContour, frame_rms, n_frames_for
from errors import CorpusError
from io_wav import read_wav, write_wav
from progress import run_in_threads


log = logging.getLogger("corpus")

ROLES = ("target_corpus", "external_corpus", "noise")
SPLITS = ("train", "dev", "test")

MANIFEST_NAME = "manifest.jsonl"
NOISE_MANIFEST_NAME = "noise.jsonl"
SINGERS_NAME = "singers.json"

GAP_S = 0.06          # breath gap between notes
LEAD_S = 0.08         # unvoiced lead-in / tail
RAMP_S = 0.02         # note attack / release
PEAK = 0.7


# -----------------------------
# Singers / scores
# -----------------------------
@dataclass(frozen=True)
class SingerSpec:
    singer_id: str
    f0_base_hz: float
    formant_freqs: tuple[float, float, float]
    vibrato_rate_hz: float = 5.5
    vibrato_depth_cents: float = 40.0
    breathiness: float = 0.1

    def __post_init__(self) -> None:
        f = tuple(float(x) for x in self.formant_freqs)
        if len(f) != 3 or not (f[0] < f[1] < f[2] < SAMPLE_RATE / 2):
            raise CorpusError(f"{self.singer_id}: formants must be 3 increasing values below 8000 Hz, got {f}")
        if not 80.0 <= self.f0_base_hz <= 600.0:
            raise CorpusError(f"{self.singer_id}: f0_base_hz {self.f0_base_hz} outside 80-600 Hz")
        if not 0.0 <= self.breathiness <= 1.0:
            raise CorpusError(f"{self.singer_id}: breathiness {self.breathiness} outside [0, 1]")
        object.__setattr__(self, "formant_freqs", f)


@dataclass(frozen=True)
class Note:
    midi_pitch: float
    duration_s: float
    phoneme_token: int


@dataclass(frozen=True)
class SongScore:
    notes: tuple[Note, ...]
    tempo_scale: float = 1.0
    vocab_size: int = 16

    def __post_init__(self) -> None:
        object.__setattr__(self, "notes", tuple(self.notes))
        if self.tempo_scale <= 0:
            raise CorpusError(f"tempo_scale must be > 0, got {self.tempo_scale}")
        for n in self.notes:
            if n.duration_s <= 0:
                raise CorpusError(f"note duration must be > 0, got {n.duration_s}")
            if not 0 <= n.phoneme_token < self.vocab_size:
                raise CorpusError(f"token {n.phoneme_token} outside vocabulary of {self.vocab_size}")

    @property
    def tokens(self) -> tuple[int, ...]:
        return tuple(n.phoneme_token for n in self.notes)


def midi_to_hz(midi: float) -> float:
    return 440.0 * 2.0 ** ((midi - 69.0) / 12.0)


def hz_to_midi(hz: float) -> float:
    return 69.0 + 12.0 * math.log2(hz / 440.0)


@lru_cache(maxsize=8)
def token_formant_scales(vocab_size: int) -> np.ndarray:
    """vocab_size x 3 multipliers on a singer's formants; the per-token vowel colour."""
    rng = np.random.default_rng(20_240_917)
    lo = np.array([0.55, 0.65, 0.85])
    hi = np.array([1.6, 1.45, 1.15])
    return lo + (hi - lo) * rng.random((vocab_size, 3))


def make_singers(cfg: CorpusConfig, seed: int) -> tuple[SingerSpec, list[SingerSpec]]:
    """One target singer plus `external_singers` others, all drawn from the run seed."""
    rng = np.random.default_rng([seed, 7])

    def draw(singer_id: str) -> SingerSpec:
        f1 = rng.uniform(450.0, 800.0)
        f2 = rng.uniform(1150.0, 1900.0)
        f3 = rng.uniform(2400.0, 3300.0)
        return SingerSpec(
            singer_id=singer_id,
            f0_base_hz=float(rng.uniform(130.0, 380.0)),
            formant_freqs=(f1, f2, f3),
            vibrato_rate_hz=float(rng.uniform(4.5, 6.5)),
            vibrato_depth_cents=float(rng.uniform(15.0, 70.0)),
            breathiness=float(rng.uniform(0.03, 0.3)),
        )

    if cfg.target_singers != 1:
        raise CorpusError(f"any-to-one corpus needs exactly one target singer, got {cfg.target_singers}")
    target = draw("tgt00")
    externals = [draw(f"ext{i:02d}") for i in range(cfg.external_singers)]
    return target, externals


def random_score(singer: SingerSpec, cfg: CorpusConfig, rng: np.random.Generator) -> SongScore:
    base = hz_to_midi(singer.f0_base_hz)
    lo_midi, hi_midi = hz_to_midi(80.0), hz_to_midi(900.0)
    lo_d, hi_d = cfg.note_duration_s
    notes = []
    offset = 0
    for _ in range(cfg.notes_per_utterance):
        offset = int(np.clip(offset + rng.integers(-4, 5), -7, 7))
        pitch = float(np.clip(base + offset, lo_midi, hi_midi))
        notes.append(Note(pitch, float(rng.uniform(lo_d, hi_d)), int(rng.integers(0, cfg.vocab_size))))
    return SongScore(tuple(notes), tempo_scale=1.0, vocab_size=cfg.vocab_size)


# -----------------------------
# Rendering
# -----------------------------
@dataclass(frozen=True)
class RenderedUtterance:
    audio: AudioBuffer
    contour: MelodyContour
    tokens: tuple[int, ...]


def _envelope(freqs: np.ndarray, formants: np.ndarray) -> np.ndarray:
    """Sum of resonance peaks, bandwidth growing with centre frequency."""
    env = np.zeros_like(freqs)
    for j, fc in enumerate(formants):
        bw = 60.0 + 0.08 * fc
        env += (1.0 / (j + 1)) / (1.0 + ((freqs - fc) / bw) ** 2)
    return env


def _ramp(n: int) -> np.ndarray:
    r = min(int(RAMP_S * SAMPLE_RATE), n // 2)
    env = np.ones(n)
    if r > 0:
        w = 0.5 - 0.5 * np.cos(np.linspace(0.0, np.pi, r))
        env[:r] = w
        env[n - r:] = w[::-1]
    return env


@lru_cache(maxsize=1)
def _breath_sos() -> np.ndarray:
    return butter(4, [1000.0, 6000.0], btype="bandpass", fs=SAMPLE_RATE, output="sos")


def render_utterance(singer: SingerSpec, score: SongScore, seed: int) -> RenderedUtterance:
    """
    Source-filter synthesis: a harmonic source at the (vibrato-modulated) note
    F0, shaped by the singer's formants re-tuned per phoneme token, plus band
    limited breath noise. Notes are separated by short unvoiced breath gaps.
    The returned contour is the synthesis F0 sampled at frame centres.
    """
    rng = np.random.default_rng([seed, 11])
    scales = token_formant_scales(score.vocab_size)
    formants = np.asarray(singer.formant_freqs)

    lead = int(LEAD_S * SAMPLE_RATE)
    gap = int(GAP_S * SAMPLE_RATE)
    spans: list[tuple[int, int, Note]] = []
    pos = lead
    for i, note in enumerate(score.notes):
        n = max(1, int(round(note.duration_s * score.tempo_scale * SAMPLE_RATE)))
        spans.append((pos, pos + n, note))
        pos += n + (gap if i < len(score.notes) - 1 else 0)
    total = pos + lead

    voiced = np.zeros(total)
    f0_track = np.zeros(total)
    vib_phase = rng.uniform(0.0, 2 * np.pi)
    for start, stop, note in spans:
        n = stop - start
        t = np.arange(n) / SAMPLE_RATE
        f_note = midi_to_hz(note.midi_pitch)
        cents = singer.vibrato_depth_cents * np.sin(2 * np.pi * singer.vibrato_rate_hz * t + vib_phase)
        f_inst = f_note * 2.0 ** (cents / 1200.0)
        phase = 2 * np.pi * np.cumsum(f_inst) / SAMPLE_RATE + rng.uniform(0.0, 2 * np.pi)

        k_max = int((0.47 * SAMPLE_RATE) // (f_note * 2.0 ** (abs(singer.vibrato_depth_cents) / 1200.0)))
        ks = np.arange(1, max(k_max, 1) + 1)
        amps = (0.3 + _envelope(ks * f_note, formants * scales[note.phoneme_token])) / ks
        src = np.sin(np.outer(phase, ks)) @ amps
        loudness = rng.uniform(0.6, 1.0)
        voiced[start:stop] = loudness * src / (np.max(np.abs(src)) + 1e-12) * _ramp(n)
        f0_track[start:stop] = f_inst

    breath = sosfilt(_breath_sos(), rng.standard_normal(total))
    breath /= np.max(np.abs(breath)) + 1e-12
    signal = voiced + (0.02 + 0.12 * singer.breathiness) * breath

    peak = float(np.max(np.abs(signal)))
    samples = signal * (PEAK / peak) if peak > 0 else signal
    audio = AudioBuffer(samples)

    n_frames = n_frames_for(total)
    centres = np.minimum(np.arange(n_frames) * HOP_SIZE, total - 1)
    f0 = f0_track[centres]
    vuv = (f0 > 0).astype(np.int8)
    contour = MelodyContour(f0, frame_rms(audio), vuv)
    return RenderedUtterance(audio, contour, score.tokens)


def render_noise_track(seed: int, duration_s: float) -> AudioBuffer:
    """Synthetic BGM: slowly changing chord pads plus band-passed noise bursts."""
    rng = np.random.default_rng([seed, 23])
    n = int(duration_s * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE
    out = np.zeros(n)

    seg = int(rng.uniform(1.0, 2.0) * SAMPLE_RATE)
    for start in range(0, n, seg):
        stop = min(n, start + seg)
        root = rng.uniform(45.0, 64.0)
        chord = (0.0, 4.0, 7.0) if rng.random() < 0.5 else (0.0, 3.0, 7.0)
        env = _ramp(stop - start)
        for interval in chord:
            f = midi_to_hz(root + interval)
            tt = t[start:stop]
            for h in (1, 2, 3):
                out[start:stop] += env * (0.5 / h) * np.sin(2 * np.pi * h * f * tt + rng.uniform(0, 2 * np.pi))

    n_bursts = max(1, int(duration_s * 2))
    for _ in range(n_bursts):
        lo = rng.uniform(200.0, 2000.0)
        sos = butter(2, [lo, min(lo * rng.uniform(1.5, 3.0), 7500.0)], btype="bandpass", fs=SAMPLE_RATE, output="sos")
        length = int(rng.uniform(0.1, 0.4) * SAMPLE_RATE)
        start = int(rng.integers(0, max(1, n - length)))
        burst = sosfilt(sos, rng.standard_normal(length)) * np.exp(-np.arange(length) / (0.3 * length))
        out[start:start + length] += 1.5 * burst[: n - start]

    peak = float(np.max(np.abs(out)))
    return AudioBuffer(out * (PEAK / peak) if peak > 0 else out)


# -----------------------------
# Manifest
# -----------------------------
@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    wav_path: str
    singer_id: str
    token_label_sequence: tuple[int, ...]
    split: str
    role: str
    contour_path: str | None = None

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise CorpusError(f"{self.utterance_id}: unknown role {self.role!r}")
        if self.split not in SPLITS:
            raise CorpusError(f"{self.utterance_id}: unknown split {self.split!r}")
        object.__setattr__(self, "token_label_sequence", tuple(int(x) for x in self.token_label_sequence))

    def to_json(self) -> str:
        d = asdict(self)
        d["token_label_sequence"] = list(self.token_label_sequence)
        return json.dumps(d, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> ManifestEntry:
        try:
            return cls(**json.loads(line))
        except (TypeError, ValueError) as e:
            raise CorpusError(f"bad manifest line: {line[:80]!r} ({e})") from e


@dataclass
class Manifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)
    noise: list[ManifestEntry] = field(default_factory=list)
    singers: dict[str, SingerSpec] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def select(self, split: str | None = None, role: str | None = None) -> list[ManifestEntry]:
        return [
            e for e in self.entries
            if (split is None or e.split == split) and (role is None or e.role == role)
        ]

    @property
    def target_singer_id(self) -> str | None:
        ids = {e.singer_id for e in self.entries if e.role == "target_corpus"}
        return next(iter(ids)) if len(ids) == 1 else None

    def path_of(self, rel: str) -> Path:
        return self.root / rel

    def load_audio(self, entry: ManifestEntry) -> AudioBuffer:
        return read_wav(self.path_of(entry.wav_path))

    def load_contour(self, entry: ManifestEntry) -> MelodyContour:
        if not entry.contour_path:
            raise CorpusError(f"{entry.utterance_id}: no analytic contour stored")
        ckpt = load_checkpoint(self.path_of(entry.contour_path))
        t = ckpt.tensors
        f0 = t["f0_hz"].astype(np.float64)
        vuv = t["vuv"].astype(np.int8)
        return MelodyContour(np.where(vuv == 1, f0, 0.0), t["energy"].astype(np.float64), vuv)

    def noise_audio(self) -> list[AudioBuffer]:
        return [read_wav(self.path_of(e.wav_path)) for e in self.noise]


def _write_jsonl(path: Path, entries: Iterable[ManifestEntry]) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(e.to_json() + "\n")


def _read_jsonl(path: Path) -> list[ManifestEntry]:
    if not path.exists():
        return []
    with path.open("r", encoding="utf-8") as fh:
        return [ManifestEntry.from_json(line) for line in fh if line.strip()]


def write_manifest(manifest: Manifest) -> Path:
    manifest.root.mkdir(parents=True, exist_ok=True)
    _write_jsonl(manifest.root / MANIFEST_NAME, manifest.entries)
    _write_jsonl(manifest.root / NOISE_MANIFEST_NAME, manifest.noise)
    singers = {sid: asdict(s) for sid, s in sorted(manifest.singers.items())}
    (manifest.root / SINGERS_NAME).write_text(json.dumps(singers, indent=2, sort_keys=True), encoding="utf-8")
    return manifest.root / MANIFEST_NAME


def validate_manifest(manifest: Manifest) -> None:
    problems: list[str] = []
    for e in manifest.entries + manifest.noise:
        if not manifest.path_of(e.wav_path).exists():
            problems.append(f"{e.utterance_id}: missing {e.wav_path}")
        if e.contour_path and not manifest.path_of(e.contour_path).exists():
            problems.append(f"{e.utterance_id}: missing {e.contour_path}")
        if e.role != "noise" and manifest.singers and e.singer_id not in manifest.singers:
            problems.append(f"{e.utterance_id}: undeclared singer {e.singer_id!r}")
    targets = {e.singer_id for e in manifest.entries if e.role == "target_corpus"}
    if len(targets) > 1:
        problems.append(f"target corpus spans several singers: {sorted(targets)}")
    if problems:
        raise CorpusError("manifest integrity: " + "; ".join(problems[:5]))


def load_manifest(root: str | Path) -> Manifest:
    r = Path(root)
    if r.is_file():
        r = r.parent
    if not (r / MANIFEST_NAME).exists():
        raise CorpusError(f"no {MANIFEST_NAME} under {r}")
    singers: dict[str, SingerSpec] = {}
    sp = r / SINGERS_NAME
    if sp.exists():
        for sid, d in json.loads(sp.read_text(encoding="utf-8")).items():
            d["formant_freqs"] = tuple(d["formant_freqs"])
            singers[sid] = SingerSpec(**d)
    m = Manifest(r, _read_jsonl(r / MANIFEST_NAME), _read_jsonl(r / NOISE_MANIFEST_NAME), singers)
    validate_manifest(m)
    log.info("Loaded manifest %s: %d utterances, %d noise tracks", r, len(m.entries), len(m.noise))
    return m


# -----------------------------
# Corpus generation
# -----------------------------
def _assign_splits(n: int, cfg: CorpusConfig, rng: np.random.Generator) -> list[str]:
    n_test = int(round(n * cfg.test_fraction))
    n_dev = int(round(n * cfg.dev_fraction))
    labels = ["test"] * n_test + ["dev"] * n_dev + ["train"] * (n - n_test - n_dev)
    order = rng.permutation(n)
    return [labels[int(i)] for i in np.argsort(order)]


@dataclass(frozen=True)
class _UtteranceJob:
    utterance_id: str
    singer: SingerSpec
    score: SongScore
    seed: int
    split: str
    role: str


def _render_and_write(job: _UtteranceJob, root: Path) -> ManifestEntry:
    utt = render_utterance(job.singer, job.score, job.seed)
    wav_rel = f"wavs/{job.utterance_id}.wav"
    contour_rel = f"contours/{job.utterance_id}.rsvc"
    write_wav(root / wav_rel, utt.audio)
    c = utt.contour
    save_checkpoint(
        {"f0_hz": c.f0_hz, "energy": c.energy, "vuv": c.vuv.astype(np.float32)},
        {"utterance_id": job.utterance_id, "singer_id": job.singer.singer_id},
        root / contour_rel,
    )
    return ManifestEntry(
        utterance_id=job.utterance_id,
        wav_path=wav_rel,
        singer_id=job.singer.singer_id,
        token_label_sequence=utt.tokens,
        split=job.split,
        role=job.role,
        contour_path=contour_rel,
    )


def _write_noise(idx: int, seed: int, cfg: CorpusConfig, root: Path) -> ManifestEntry:
    noise_id = f"bgm{idx:03d}"
    rel = f"noise/{noise_id}.wav"
    write_wav(root / rel, render_noise_track(seed * 1000 + idx, cfg.noise_duration_s))
    return ManifestEntry(noise_id, rel, "bgm", (), "train", "noise")


def plan_corpus(cfg: CorpusConfig, seed: int) -> tuple[SingerSpec, list[SingerSpec], list[_UtteranceJob]]:
    target, externals = make_singers(cfg, seed)
    if cfg.utterances > 0 and cfg.target_fraction < 1.0 and cfg.external_singers < 2:
        raise CorpusError(f"need at least 2 external singers, got {cfg.external_singers}")
    n_target = int(round(cfg.utterances * cfg.target_fraction))
    n_external = cfg.utterances - n_target
    rng = np.random.default_rng([seed, 3])
    target_splits = _assign_splits(n_target, cfg, rng)
    external_splits = _assign_splits(n_external, cfg, rng)

    jobs: list[_UtteranceJob] = []
    for i in range(cfg.utterances):
        if i < n_target:
            singer, role, split = target, "target_corpus", target_splits[i]
        else:
            j = i - n_target
            singer, role, split = externals[j % len(externals)], "external_corpus", external_splits[j]
        score = random_score(singer, cfg, np.random.default_rng([seed, 5, i]))
        jobs.append(_UtteranceJob(f"utt{i:05d}", singer, score, seed * 100_003 + i, split, role))
    return target, externals, jobs


def generate_corpus(
    cfg: CorpusConfig,
    out_dir: str | Path,
    seed: int = 0,
    settings: Settings | None = None,
    show_progress: bool = False,
) -> Manifest:
    settings = settings or Settings()
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
        (root / "wavs").mkdir(exist_ok=True)
        (root / "contours").mkdir(exist_ok=True)
        (root / "noise").mkdir(exist_ok=True)
    except OSError as e:
        raise CorpusError(f"cannot write corpus to {root}: {e}") from e

    target, externals, jobs = plan_corpus(cfg, seed)
    log.info(
        "Rendering %d utterances (target=%s, externals=%d) and %d noise tracks into %s",
        len(jobs), target.singer_id, len(externals), cfg.noise_tracks, root,
    )

    units = [lambda job=job: _render_and_write(job, root) for job in jobs]
    units += [lambda i=i: _write_noise(i, seed, cfg, root) for i in range(cfg.noise_tracks)]
    try:
        results = run_in_threads(units, "CORPUS", settings.max_threads, show_progress=show_progress)
    except OSError as e:
        raise CorpusError(f"cannot write corpus to {root}: {e}") from e

    manifest = Manifest(
        root=root,
        entries=results[: len(jobs)],
        noise=results[len(jobs):],
        singers={s.singer_id: s for s in [target, *externals]},
    )
    write_manifest(manifest)
    log.info("Corpus written: %s", root / MANIFEST_NAME)
    return manifest


def describe(manifest: Manifest) -> dict[str, Any]:
    out: dict[str, Any] = {"utterances": len(manifest.entries), "noise_tracks": len(manifest.noise)}
    for role in ROLES[:2]:
        for split in SPLITS:
            out[f"{role}.{split}"] = len(manifest.select(split, role))
    return out
