"""Audio ingestion: 16-bit PCM WAV I/O, resampling to 8 kHz, CSV manifests and
a seeded synthetic breath/cough corpus."""

from __future__ import annotations

import csv
import io
import wave
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import signal

TARGET_RATE = 8000
SUPPORTED_RATES = (8000, 16000, 44100, 48000)

CONDITIONS = ("COVID", "Asthma", "Healthy")
PLATFORMS = ("Android", "Web")
MODALITIES = ("breath", "cough")
MANIFEST_COLUMNS = (
    "path",
    "subject_id",
    "condition",
    "has_cough_symptom",
    "platform",
    "modality",
    "augmented",
)


class WavFormatError(ValueError):
    """The byte stream is not a readable RIFF/WAVE container."""


class UnsupportedFormatError(WavFormatError):
    """A valid WAV file that is not 16-bit PCM mono."""


class ManifestError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("AudioClip samples must be one-dimensional")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if samples.size and not np.isfinite(samples).all():
            raise ValueError("AudioClip samples must be finite")
        if samples.size and np.abs(samples).max() > 1.0:
            raise ValueError("AudioClip samples must lie in [-1, 1]")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


# --------------------------------------------------------------------- WAV I/O


def decode_wav(data: bytes) -> AudioClip:
    """Decode a 16-bit PCM mono RIFF/WAVE byte string.

    Samples are scaled as ``int / 32768`` so they lie in [-1, 1).
    """
    try:
        with wave.open(io.BytesIO(data), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        if "unknown format" in str(exc):
            raise UnsupportedFormatError(f"unsupported WAV encoding: {exc}") from exc
        raise WavFormatError(f"malformed WAV data: {exc}") from exc
    except (EOFError, ValueError) as exc:
        raise WavFormatError(f"malformed WAV data: {exc}") from exc
    if channels != 1:
        raise UnsupportedFormatError(f"expected mono audio, got {channels} channels")
    if width != 2:
        raise UnsupportedFormatError(f"expected 16-bit samples, got {8 * width}-bit")
    if len(raw) % 2:
        raise WavFormatError("truncated sample data")
    ints = np.frombuffer(raw, dtype="<i2")
    return AudioClip(ints.astype(np.float64) / 32768.0, rate)


def encode_wav(clip: AudioClip) -> bytes:
    ints = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(clip.sample_rate))
        wf.writeframes(ints.tobytes())
    return buf.getvalue()


def read_wav(path) -> AudioClip:
    return decode_wav(Path(path).read_bytes())


def write_wav(path, clip: AudioClip) -> None:
    Path(path).write_bytes(encode_wav(clip))


# ------------------------------------------------------------------ resampling


def _lowpass_taps(down: int, half_width: int = 16, beta: float = 8.6) -> np.ndarray:
    # cutoff at 0.45 of the output rate, relative to the Nyquist of the upsampled stream
    return signal.firwin(2 * half_width * down + 1, 0.9 / down, window=("kaiser", beta))


def resample_to_8k(clip: AudioClip) -> AudioClip:
    """Polyphase windowed-sinc resampling to 8 kHz.

    The anti-alias low-pass sits at 3.6 kHz; output length is
    ``round(len * 8000 / rate)``.
    """
    rate = int(clip.sample_rate)
    if rate not in SUPPORTED_RATES:
        raise ValueError(f"unsupported sample rate {rate}; expected one of {SUPPORTED_RATES}")
    if rate == TARGET_RATE:
        return clip
    n_out = int(round(len(clip) * TARGET_RATE / rate))
    if len(clip) == 0:
        return AudioClip(np.zeros(0), TARGET_RATE)
    ratio = Fraction(TARGET_RATE, rate)
    up, down = ratio.numerator, ratio.denominator
    taps = _lowpass_taps(down)
    out = signal.resample_poly(clip.samples, up, down, window=taps, padtype="edge")
    if out.size < n_out:
        out = np.concatenate([out, np.full(n_out - out.size, out[-1] if out.size else 0.0)])
    out = np.clip(out[:n_out], -1.0, 1.0)
    return AudioClip(out, TARGET_RATE)


# ------------------------------------------------------------------- manifests


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    subject_id: str
    condition: str
    has_cough_symptom: bool
    platform: str
    modality: str
    augmented: bool = False

    @property
    def label(self) -> int:
        """1 for COVID-positive, 0 for every other condition."""
        return int(self.condition == "COVID")


@dataclass(frozen=True)
class Corpus:
    entries: tuple[ManifestEntry, ...] = field(default_factory=tuple)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def label(self, entry: ManifestEntry) -> int:
        return entry.label

    def usable(self) -> "Corpus":
        """Non-augmented entries only; augmented copies never enter training or evaluation."""
        return Corpus(tuple(e for e in self.entries if not e.augmented))

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=int)

    @property
    def subjects(self) -> list[str]:
        return sorted({e.subject_id for e in self.entries})


_TRUE = {"1", "true", "yes", "y", "t"}
_FALSE = {"0", "false", "no", "n", "f", ""}


def _parse_bool(value: str, column: str, row: int) -> bool:
    v = value.strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ManifestError(f"row {row}: cannot parse {column}={value!r} as boolean")


def _parse_enum(value: str, choices, column: str, row: int) -> str:
    v = value.strip()
    for choice in choices:
        if v.lower() == choice.lower():
            return choice
    raise ManifestError(f"row {row}: unknown {column} {value!r}; expected one of {choices}")


def parse_manifest(text: str) -> Corpus:
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    missing = [c for c in MANIFEST_COLUMNS if c not in header]
    if missing:
        raise ManifestError(f"manifest is missing columns: {', '.join(missing)}")
    entries = []
    seen = set()
    # row numbers count the header as row 1
    for row_no, row in enumerate(reader, start=2):
        path = (row["path"] or "").strip()
        subject = (row["subject_id"] or "").strip()
        if not path:
            raise ManifestError(f"row {row_no}: empty path")
        if not subject:
            raise ManifestError(f"row {row_no}: empty subject_id")
        if path in seen:
            raise ManifestError(f"row {row_no}: duplicate path {path!r}")
        seen.add(path)
        entries.append(
            ManifestEntry(
                path=path,
                subject_id=subject,
                condition=_parse_enum(row["condition"] or "", CONDITIONS, "condition", row_no),
                has_cough_symptom=_parse_bool(row["has_cough_symptom"] or "", "has_cough_symptom", row_no),
                platform=_parse_enum(row["platform"] or "", PLATFORMS, "platform", row_no),
                modality=_parse_enum(row["modality"] or "", MODALITIES, "modality", row_no),
                augmented=_parse_bool(row["augmented"] or "", "augmented", row_no),
            )
        )
    return Corpus(tuple(entries))


def load_manifest(path) -> Corpus:
    return parse_manifest(Path(path).read_text(encoding="utf-8"))


def format_manifest(corpus: Corpus | Iterable[ManifestEntry]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for e in corpus:
        writer.writerow(
            [
                e.path,
                e.subject_id,
                e.condition,
                str(e.has_cough_symptom).lower(),
                e.platform,
                e.modality,
                str(e.augmented).lower(),
            ]
        )
    return buf.getvalue()


def write_manifest(path, corpus: Corpus | Iterable[ManifestEntry]) -> None:
    Path(path).write_text(format_manifest(corpus), encoding="utf-8")


def load_clip(entry: ManifestEntry, root=None) -> AudioClip:
    """Read an entry's audio and bring it to 8 kHz."""
    path = Path(entry.path)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    return resample_to_8k(read_wav(path))


# ----------------------------------------------------------- synthetic corpus

SYNTH_RATE = 16000
SIGNATURE_HZ = 400.0
SIGNATURE_DB = -10.0
DURATION_MEAN = 9.96
DURATION_STD = 6.02
DURATION_RANGE = (1.0, 30.0)


def draw_durations(rng: np.random.Generator, n: int, mean=DURATION_MEAN, std=DURATION_STD) -> np.ndarray:
    """Gamma-distributed clip lengths matched to the given mean and std, clamped."""
    shape = (mean / std) ** 2
    scale = std**2 / mean
    return np.clip(rng.gamma(shape, scale, size=n), *DURATION_RANGE)


def _coloured_noise(rng, n, rate, low, high):
    sos = signal.butter(4, [low, high], btype="bandpass", fs=rate, output="sos")
    return signal.sosfilt(sos, rng.standard_normal(n))


def synth_breath(rng: np.random.Generator, n: int, rate: int = SYNTH_RATE) -> np.ndarray:
    """Band-limited noise under a slow breathing envelope."""
    low = rng.uniform(800.0, 1100.0)
    high = rng.uniform(2000.0, 3400.0)
    x = _coloured_noise(rng, n, rate, low, high)
    t = np.arange(n) / rate
    period = rng.uniform(2.5, 5.0)
    phase = rng.uniform(0, 2 * np.pi)
    env = 0.15 + 0.85 * (0.5 - 0.5 * np.cos(2 * np.pi * t / period + phase)) ** 2
    return x * env


def synth_cough(rng: np.random.Generator, n: int, rate: int = SYNTH_RATE) -> np.ndarray:
    """Low-level background with sparse broadband bursts (fast attack, exponential decay)."""
    x = 0.05 * _coloured_noise(rng, n, rate, 900.0, 3000.0)
    duration = n / rate
    n_bursts = max(1, int(rng.poisson(max(duration / 2.0, 1.0))))
    for _ in range(n_bursts):
        start = int(rng.uniform(0, max(n - 1, 1)))
        length = int(rate * rng.uniform(0.15, 0.45))
        length = min(length, n - start)
        if length <= 0:
            continue
        tau = rng.uniform(0.04, 0.12) * rate
        k = np.arange(length)
        env = (1 - np.exp(-k / (0.004 * rate))) * np.exp(-k / tau)
        low = rng.uniform(800.0, 1100.0)
        burst = _coloured_noise(rng, length, rate, low, rng.uniform(2000.0, 3800.0))
        x[start : start + length] += rng.uniform(0.6, 1.4) * env * burst
    return x


def _normalise(x: np.ndarray, rng) -> np.ndarray:
    peak = np.abs(x).max()
    if peak == 0:
        return x
    return x / peak * rng.uniform(0.3, 0.8)


def add_signature(x: np.ndarray, rate: int, level_db: float = SIGNATURE_DB, freq: float = SIGNATURE_HZ) -> np.ndarray:
    """Add a steady tone whose power sits ``level_db`` below the signal's power."""
    power = np.mean(x**2) if x.size else 0.0
    amp = np.sqrt(2 * power * 10 ** (level_db / 10))
    t = np.arange(x.size) / rate
    return x + amp * np.sin(2 * np.pi * freq * t)


def synthetic_entries(
    n_subjects: int,
    positive_rate: float,
    clips_per_subject: int,
    seed: int,
) -> list[ManifestEntry]:
    """Manifest rows of a synthetic corpus, without audio."""
    if n_subjects < 4:
        raise ValueError("n_subjects must be at least 4")
    if not 0 < positive_rate < 1:
        raise ValueError("positive_rate must lie strictly between 0 and 1")
    if clips_per_subject < 1:
        raise ValueError("clips_per_subject must be at least 1")
    rng = np.random.default_rng([seed, 0])
    n_pos = min(max(int(round(n_subjects * positive_rate)), 1), n_subjects - 1)
    is_pos = np.zeros(n_subjects, dtype=bool)
    is_pos[rng.permutation(n_subjects)[:n_pos]] = True
    entries = []
    for s in range(n_subjects):
        if is_pos[s]:
            condition = "COVID"
        else:
            condition = "Asthma" if rng.random() < 0.1 else "Healthy"
        symptom = bool(rng.random() < (0.45 if is_pos[s] else 0.2))
        platform = PLATFORMS[int(rng.random() < 0.45)]
        sid = f"S{s:04d}"
        for j in range(clips_per_subject):
            modality = MODALITIES[(s + j) % 2]
            entries.append(
                ManifestEntry(
                    path=f"audio/{sid}_{j:02d}_{modality}.wav",
                    subject_id=sid,
                    condition=condition,
                    has_cough_symptom=symptom,
                    platform=platform,
                    modality=modality,
                    augmented=False,
                )
            )
    return entries


def synthesize_clip(entry_index: int, entry: ManifestEntry, seed: int, duration: float, rate: int = SYNTH_RATE) -> AudioClip:
    rng = np.random.default_rng([seed, 1, entry_index])
    n = max(int(round(duration * rate)), 1)
    base = synth_breath(rng, n, rate) if entry.modality == "breath" else synth_cough(rng, n, rate)
    if entry.label:
        base = add_signature(base, rate)
    return AudioClip(_normalise(base, rng), rate)


def generate_synthetic_corpus(
    out_dir,
    n_subjects: int = 120,
    positive_rate: float = 0.27,
    clips_per_subject: int = 2,
    seed: int = 0,
    duration_mean: float = DURATION_MEAN,
    duration_std: float = DURATION_STD,
) -> Corpus:
    """Write a reproducible synthetic corpus (16 kHz WAVs plus ``manifest.csv``).

    Positive subjects carry a steady 400 Hz tone 10 dB below the clip power.
    Manifest paths are relative to ``out_dir``.
    """
    entries = synthetic_entries(n_subjects, positive_rate, clips_per_subject, seed)
    out = Path(out_dir)
    try:
        (out / "audio").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    durations = draw_durations(np.random.default_rng([seed, 2]), len(entries), duration_mean, duration_std)
    for i, (entry, dur) in enumerate(zip(entries, durations)):
        write_wav(out / entry.path, synthesize_clip(i, entry, seed, float(dur)))
    corpus = Corpus(tuple(entries))
    write_manifest(out / "manifest.csv", corpus)
    return corpus
