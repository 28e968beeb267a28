"""Log-power spectrogram variants and the three-stream model input.

Eight variants exist: hop 64 or 128 samples, window of two or four hops, and
a linear or mel frequency axis. Every variant is projected onto 64 bins so the
four variants sharing a hop can be stacked as channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .corpus import TARGET_RATE, AudioClip

N_BINS = 64
LOG_FLOOR = 1e-10
HOPS = (64, 128)
SCALES = ("linear", "mel")


@dataclass(frozen=True, order=True)
class SpectrogramVariant:
    hop: int
    window: int
    scale: str

    def __post_init__(self):
        if self.hop not in HOPS:
            raise ValueError(f"hop must be one of {HOPS}")
        if self.window not in (2 * self.hop, 4 * self.hop):
            raise ValueError("window must be two or four hops long")
        if self.scale not in SCALES:
            raise ValueError(f"scale must be one of {SCALES}")


def variants_for_hop(hop: int) -> tuple[SpectrogramVariant, ...]:
    """The four variants of one hop group in channel order: window ascending, linear before mel."""
    return tuple(SpectrogramVariant(hop, m * hop, scale) for m in (2, 4) for scale in SCALES)


ALL_VARIANTS = tuple(v for hop in HOPS for v in variants_for_hop(hop))


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("frequency must be non-negative")
    out = 2595.0 * np.log10(1.0 + f / 700.0)
    return float(out) if out.ndim == 0 else out


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def n_frames(length: int, hop: int) -> int:
    return (length - 1) // hop + 1


def _as_samples(clip) -> np.ndarray:
    if isinstance(clip, AudioClip):
        if clip.sample_rate != TARGET_RATE:
            raise ValueError(f"expected {TARGET_RATE} Hz audio, got {clip.sample_rate} Hz")
        return clip.samples
    return np.asarray(clip, dtype=np.float64)


@lru_cache(maxsize=None)
def hann(n: int) -> np.ndarray:
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)
    w.setflags(write=False)
    return w


def frame_signal(clip, variant: SpectrogramVariant) -> np.ndarray:
    """Hann-windowed frames, frame k centred on sample ``k * hop``.

    Returns an array of shape ``(floor((len - 1) / hop) + 1, window)``; the
    signal is zero-padded on both sides so the frame count does not depend on
    the window length.
    """
    x = _as_samples(clip)
    if x.size == 0:
        raise ValueError("cannot frame an empty clip")
    hop, win = variant.hop, variant.window
    count = n_frames(x.size, hop)
    half = win // 2
    padded = np.zeros(half + (count - 1) * hop + win)
    padded[half : half + x.size] = x[: padded.size - half]
    frames = np.lib.stride_tricks.sliding_window_view(padded, win)[::hop][:count]
    return frames * hann(win)


@lru_cache(maxsize=None)
def one_sided_weights(window: int) -> np.ndarray:
    """Per-bin factors turning ``|rfft|^2`` into a one-sided power that sums to the frame energy."""
    w = np.full(window // 2 + 1, 2.0 / window)
    w[0] = 1.0 / window
    w[-1] = 1.0 / window
    w.setflags(write=False)
    return w


@lru_cache(maxsize=None)
def linear_band_matrix(window: int, rate: int = TARGET_RATE, n_bands: int = N_BINS) -> np.ndarray:
    """Averaging matrix (bins x bands) for equal-width bands over 0..rate/2."""
    freqs = np.arange(window // 2 + 1) * rate / window
    width = rate / 2 / n_bands
    band = np.minimum((freqs // width).astype(int), n_bands - 1)
    m = np.zeros((freqs.size, n_bands))
    m[np.arange(freqs.size), band] = 1.0
    counts = m.sum(axis=0)
    if np.any(counts == 0):
        raise ValueError(f"window {window} is too short for {n_bands} linear bands")
    m /= counts
    m.setflags(write=False)
    return m


@lru_cache(maxsize=None)
def mel_filterbank(window: int, rate: int = TARGET_RATE, n_mels: int = N_BINS, fmax: float | None = None) -> np.ndarray:
    """Triangular mel filters (bins x filters) with unit peaks over 0..fmax."""
    fmax = rate / 2 if fmax is None else fmax
    freqs = np.arange(window // 2 + 1) * rate / window
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2], edges[1:-1], edges[2:]
    f = freqs[:, None]
    rising = (f - lo) / (mid - lo)
    falling = (hi - f) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def power_spectrum(frames: np.ndarray) -> np.ndarray:
    """One-sided power per DFT bin; each row sums to that frame's energy."""
    spec = np.fft.rfft(frames, axis=-1)
    return (spec.real**2 + spec.imag**2) * one_sided_weights(frames.shape[-1])


def band_power(clip, variant: SpectrogramVariant) -> np.ndarray:
    power = power_spectrum(frame_signal(clip, variant))
    if variant.scale == "linear":
        return power @ linear_band_matrix(variant.window)
    return power @ mel_filterbank(variant.window)


def compute_log_spectrogram(clip, variant: SpectrogramVariant) -> np.ndarray:
    """``log(max(power, 1e-10))`` on 64 bins, shape ``(frames, 64)``."""
    return np.log(np.maximum(band_power(clip, variant), LOG_FLOOR))


@dataclass(frozen=True, eq=False)
class InputBundle:
    """Raw waveform ``(T, 1)`` and the two hop groups ``(T_hop, 64, 4)``."""

    raw: np.ndarray
    group64: np.ndarray
    group128: np.ndarray

    def __post_init__(self):
        if self.raw.ndim != 2 or self.raw.shape[1] != 1:
            raise ValueError("raw stream must have shape (T, 1)")
        for name in ("group64", "group128"):
            g = getattr(self, name)
            if g.ndim != 3 or g.shape[1:] != (N_BINS, 4):
                raise ValueError(f"{name} must have shape (T, {N_BINS}, 4)")
        if self.group64.shape[0] < self.group128.shape[0]:
            raise ValueError("hop-64 group cannot be shorter than the hop-128 group")

    @property
    def lengths(self) -> tuple[int, int, int]:
        return self.raw.shape[0], self.group64.shape[0], self.group128.shape[0]


def build_input_bundle(clip) -> InputBundle:
    x = _as_samples(clip)
    if x.size == 0:
        raise ValueError("cannot build features for an empty clip")
    groups = [
        np.stack([compute_log_spectrogram(x, v) for v in variants_for_hop(hop)], axis=-1)
        for hop in HOPS
    ]
    return InputBundle(raw=x.reshape(-1, 1).copy(), group64=groups[0], group128=groups[1])


class BundleTransformer(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping 8 kHz clips to :class:`InputBundle` objects."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return [build_input_bundle(clip) for clip in X]


def dump_feature_map(path, values: np.ndarray) -> None:
    """Write a (frames x bins) map as CSV for inspection."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError("expected a 2-D feature map")
    np.savetxt(Path(path), values, delimiter=",", fmt="%.10g")
