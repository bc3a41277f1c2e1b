"""Per-frame feature extraction: log-spectral, log-mel, MFCC, and pitch blocks.

The pipeline is the classic one: preemphasis -> framing -> windowing -> power
spectrum -> mel filterbank -> log -> DCT. Pitch is a two-dimensional block
(voicing probability, log-f0) from normalized autocorrelation. Blocks are
concatenated into a single per-utterance :class:`FeatureMatrix`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import AudioClip

LOG_FLOOR = 1e-10

PITCH_FMIN_HZ = 60.0
PITCH_FMAX_HZ = 400.0
VOICING_THRESHOLD = 0.5


@dataclass(frozen=True)
class FrameConfig:
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    preemphasis: float = 0.97
    window: str = "hamming"
    nfft: int = 512

    def __post_init__(self):
        if self.frame_shift_ms > self.frame_length_ms:
            raise ValueError("frame shift must not exceed frame length")
        if not 0.0 <= self.preemphasis < 1.0:
            raise ValueError(f"preemphasis must be in [0, 1), got {self.preemphasis}")
        if self.window not in ("hamming", "hann", "rect"):
            raise ValueError(f"unknown window {self.window!r}")
        if self.nfft < 2 or self.nfft & (self.nfft - 1):
            raise ValueError(f"nfft must be a power of two >= 2, got {self.nfft}")

    def frame_samples(self, sample_rate: int) -> int:
        return int(round(self.frame_length_ms * sample_rate / 1000.0))

    def shift_samples(self, sample_rate: int) -> int:
        return int(round(self.frame_shift_ms * sample_rate / 1000.0))


@dataclass(frozen=True)
class MelConfig:
    n_filters: int = 40
    fmin_hz: float = 20.0
    fmax_hz: float | None = None  # None -> sample_rate / 2
    n_ceps: int = 13

    def __post_init__(self):
        if self.n_filters < 1:
            raise ValueError(f"need at least one mel filter, got {self.n_filters}")
        if not 1 <= self.n_ceps <= self.n_filters:
            raise ValueError(f"n_ceps must be in [1, n_filters], got {self.n_ceps}")


@dataclass
class FeatureMatrix:
    """T x D per-frame embedding with its block layout and frame shift."""

    data: np.ndarray
    frame_shift_ms: float = 10.0
    block_layout: tuple = ()

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ValueError(f"feature matrix must be 2-D, got shape {self.data.shape}")
        if not self.block_layout:
            self.block_layout = (("data", self.data.shape[1]),)
        self.block_layout = tuple((str(n), int(w)) for n, w in self.block_layout)
        width = sum(w for _, w in self.block_layout)
        if width != self.data.shape[1]:
            raise ValueError(f"block layout widths sum to {width}, data has {self.data.shape[1]} columns")
        if self.data.size and not np.all(np.isfinite(self.data)):
            raise ValueError("feature matrix contains non-finite entries")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def frame_count(n_samples: int, frame: int, shift: int) -> int:
    """Number of whole frames; edge samples that do not fill a frame are snipped."""
    if n_samples < frame:
        return 0
    return 1 + (n_samples - frame) // shift


def _window_vector(kind: str, n: int) -> np.ndarray:
    if kind == "hamming":
        return np.hamming(n)
    if kind == "hann":
        return np.hanning(n)
    return np.ones(n)


def preemphasize_and_frame(clip: AudioClip, cfg: FrameConfig) -> np.ndarray:
    """Preemphasized, windowed analysis frames, shape (T, frame_samples)."""
    x = clip.samples
    if x.size == 0:
        raise ValueError("cannot frame an empty clip")
    frame = cfg.frame_samples(clip.sample_rate)
    shift = cfg.shift_samples(clip.sample_rate)
    if cfg.nfft < frame:
        raise ValueError(f"nfft={cfg.nfft} is smaller than the {frame}-sample frame")
    y = np.empty_like(x)
    y[0] = x[0] * (1.0 - cfg.preemphasis)
    y[1:] = x[1:] - cfg.preemphasis * x[:-1]
    t = frame_count(x.size, frame, shift)
    if t == 0:
        return np.empty((0, frame))
    frames = np.lib.stride_tricks.sliding_window_view(y, frame)[::shift][:t]
    return frames * _window_vector(cfg.window, frame)


def power_spectrum(frames: np.ndarray, nfft: int) -> np.ndarray:
    """|DFT|^2 of zero-padded frames, one-sided, shape (T, nfft/2 + 1)."""
    if nfft < 2 or nfft & (nfft - 1):
        raise ValueError(f"nfft must be a power of two, got {nfft}")
    if frames.shape[-1] > nfft:
        raise ValueError(f"frame length {frames.shape[-1]} exceeds nfft {nfft}")
    spec = np.fft.rfft(frames, n=nfft, axis=-1)
    return (spec.real ** 2 + spec.imag ** 2)


def log_spectrum(power: np.ndarray) -> np.ndarray:
    """Elementwise natural log with a floor that keeps silence finite."""
    power = np.asarray(power)
    if power.size and power.min() < 0:
        raise ValueError("power spectrum has negative entries")
    return np.log(np.maximum(power, LOG_FLOOR))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(mel_cfg: MelConfig, nfft: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filterbank, shape (n_filters, nfft/2 + 1)."""
    fmax = mel_cfg.fmax_hz if mel_cfg.fmax_hz is not None else sample_rate / 2.0
    if not mel_cfg.fmin_hz < fmax <= sample_rate / 2.0:
        raise ValueError(f"need fmin < fmax <= Nyquist, got fmin={mel_cfg.fmin_hz}, fmax={fmax}")
    edges = mel_to_hz(np.linspace(hz_to_mel(mel_cfg.fmin_hz), hz_to_mel(fmax), mel_cfg.n_filters + 2))
    bin_hz = np.arange(nfft // 2 + 1) * sample_rate / nfft
    bank = np.zeros((mel_cfg.n_filters, bin_hz.size))
    for j in range(mel_cfg.n_filters):
        lo, mid, hi = edges[j], edges[j + 1], edges[j + 2]
        rising = (bin_hz - lo) / (mid - lo)
        falling = (hi - bin_hz) / (hi - mid)
        bank[j] = np.maximum(0.0, np.minimum(rising, falling))
    if np.any(bank.sum(axis=1) <= 0.0):
        raise ValueError(
            f"{mel_cfg.n_filters} filters exceed the resolution of nfft={nfft} (zero-width filter)"
        )
    return bank


def log_mel(power: np.ndarray, fbank: np.ndarray) -> np.ndarray:
    """Log mel-filterbank energies, shape (T, n_filters)."""
    if power.shape[-1] != fbank.shape[-1]:
        raise ValueError(f"power has {power.shape[-1]} bins, filterbank expects {fbank.shape[-1]}")
    return np.log(np.maximum(power @ fbank.T, LOG_FLOOR))


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis, shape (n, n); rows are basis functions."""
    k = np.arange(n)[:, None]
    grid = np.cos(np.pi * (2 * np.arange(n)[None, :] + 1) * k / (2.0 * n))
    mat = np.sqrt(2.0 / n) * grid
    mat[0] /= np.sqrt(2.0)
    return mat


def mfcc(logmel: np.ndarray, n_ceps: int) -> np.ndarray:
    """First ``n_ceps`` orthonormal DCT-II coefficients along the filter axis."""
    n_filters = logmel.shape[-1]
    if n_ceps > n_filters:
        raise ValueError(f"n_ceps={n_ceps} exceeds the {n_filters} mel filters")
    return logmel @ dct_matrix(n_filters)[:n_ceps].T


def pitch_features(clip: AudioClip, cfg: FrameConfig,
                   fmin: float = PITCH_FMIN_HZ, fmax: float = PITCH_FMAX_HZ) -> np.ndarray:
    """Per-frame (voicing, log-f0) from normalized autocorrelation, shape (T, 2).

    Voicing is the peak normalized autocorrelation over candidate lags for
    fmin..fmax, clamped to [0, 1]; log-f0 is ln(sample_rate / best_lag) for
    voiced frames (voicing >= 0.5) and 0 otherwise. The frame count matches
    the spectral features for the same config.
    """
    x = clip.samples
    if x.size == 0:
        raise ValueError("cannot extract pitch from an empty clip")
    n = cfg.frame_samples(clip.sample_rate)
    shift = cfg.shift_samples(clip.sample_rate)
    t = frame_count(x.size, n, shift)
    if t == 0:
        return np.empty((0, 2))
    frames = np.lib.stride_tricks.sliding_window_view(x, n)[::shift][:t]
    frames = frames - frames.mean(axis=1, keepdims=True)

    lag_min = max(1, int(np.ceil(clip.sample_rate / fmax)))
    lag_max = min(n - 1, int(np.floor(clip.sample_rate / fmin)))
    if lag_max < lag_min:
        raise ValueError(f"frame of {n} samples is too short for the {fmin}-{fmax} Hz search band")
    lags = np.arange(lag_min, lag_max + 1)

    nfft2 = 1
    while nfft2 < 2 * n:
        nfft2 *= 2
    spec = np.fft.rfft(frames, n=nfft2, axis=1)
    autocorr = np.fft.irfft(spec.real ** 2 + spec.imag ** 2, n=nfft2, axis=1)[:, : lag_max + 1]

    csum = np.cumsum(frames ** 2, axis=1)
    total = csum[:, -1]
    e_head = csum[:, n - 1 - lags]                 # energy of x[0 : n-lag]
    e_tail = total[:, None] - csum[:, lags - 1]    # energy of x[lag : n]
    nccf = autocorr[:, lags] / np.sqrt(e_head * e_tail + 1e-20)

    best = np.argmax(nccf, axis=1)
    voicing = np.clip(nccf[np.arange(t), best], 0.0, 1.0)
    f0 = clip.sample_rate / lags[best].astype(np.float64)
    log_f0 = np.where(voicing >= VOICING_THRESHOLD, np.log(f0), 0.0)
    return np.stack([voicing, log_f0], axis=1)


def assemble_embedding(parts: Sequence[FeatureMatrix], cmvn: bool = False) -> FeatureMatrix:
    """Concatenate feature blocks horizontally, optionally applying CMVN.

    CMVN is per-utterance, per-dimension mean subtraction and unit-variance
    scaling with a variance floor of 1e-8.
    """
    if not parts:
        raise ValueError("no feature blocks to assemble")
    frame_counts = {p.n_frames for p in parts}
    if len(frame_counts) > 1:
        detail = ", ".join(f"{p.block_layout[0][0]}={p.n_frames}" for p in parts)
        raise ValueError(f"feature blocks disagree on frame count: {detail}")
    shifts = {p.frame_shift_ms for p in parts}
    if len(shifts) > 1:
        raise ValueError(f"feature blocks disagree on frame shift: {sorted(shifts)}")
    layout = tuple(entry for p in parts for entry in p.block_layout)
    data = np.concatenate([p.data for p in parts], axis=1) if len(parts) > 1 else parts[0].data
    if cmvn:
        d64 = data.astype(np.float64)
        d64 -= d64.mean(axis=0, keepdims=True)
        var = d64.var(axis=0, keepdims=True)
        d64 /= np.sqrt(np.maximum(var, 1e-8))
        data = d64
    return FeatureMatrix(data, frame_shift_ms=parts[0].frame_shift_ms, block_layout=layout)


DEFAULT_BLOCKS = ("mfcc", "logmel", "pitch")


def extract_embedding(clip: AudioClip, frame_cfg: FrameConfig = FrameConfig(),
                      mel_cfg: MelConfig = MelConfig(), blocks: Sequence[str] = DEFAULT_BLOCKS,
                      cmvn: bool = True) -> FeatureMatrix:
    """Full per-utterance pipeline producing the configured block stack.

    Available blocks: ``mfcc``, ``logmel``, ``pitch``, and the optional
    ``logspec`` (full log power spectrum).
    """
    if not blocks:
        raise ValueError("no feature blocks requested")
    frames = preemphasize_and_frame(clip, frame_cfg)
    power = power_spectrum(frames, frame_cfg.nfft)
    logmel_cache = None
    parts = []
    for name in blocks:
        if name in ("mfcc", "logmel"):
            if logmel_cache is None:
                fbank = mel_filterbank(mel_cfg, frame_cfg.nfft, clip.sample_rate)
                logmel_cache = log_mel(power, fbank)
            block = mfcc(logmel_cache, mel_cfg.n_ceps) if name == "mfcc" else logmel_cache
        elif name == "logspec":
            block = log_spectrum(power)
        elif name == "pitch":
            block = pitch_features(clip, frame_cfg)
        else:
            raise ValueError(f"unknown feature block {name!r}")
        parts.append(FeatureMatrix(block, frame_cfg.frame_shift_ms, ((name, block.shape[1]),)))
    return assemble_embedding(parts, cmvn=cmvn)
