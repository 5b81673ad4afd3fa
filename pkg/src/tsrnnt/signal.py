"""Waveform I/O and the STFT / log-mel front-end."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError

CANONICAL_RATE = 16000
LOG_FLOOR = 1e-10


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = CANONICAL_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ContractError(f"waveform must be mono (1-D), got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ContractError("sample_rate must be positive")
        if not np.isfinite(self.samples).all():
            raise ContractError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # (T, d)
    frame_shift: float = 0.010
    frame_length: float = 0.025

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def num_frames(num_samples: int, frame_length: int, frame_shift: int) -> int:
    if num_samples < frame_length:
        return 0
    return (num_samples - frame_length) // frame_shift + 1


def read_wav(path) -> Waveform:
    """Read 16-bit PCM mono WAV at 16 kHz, scaled by 1/32768."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            channels, width, rate, n = wf.getnchannels(), wf.getsampwidth(), wf.getframerate(), wf.getnframes()
            raw = wf.readframes(n)
    except wave.Error as exc:
        raise FormatError(f"{path}: not a PCM WAV file ({exc})") from exc
    except EOFError as exc:
        raise FormatError(f"{path}: truncated WAV header") from exc
    if channels != 1:
        raise FormatError(f"{path}: expected mono, found {channels} channels")
    if width != 2:
        raise FormatError(f"{path}: expected 16-bit PCM, found {8 * width}-bit samples")
    if len(raw) != n * 2:
        raise FormatError(f"{path}: truncated data chunk ({len(raw)} of {n * 2} bytes)")
    if rate != CANONICAL_RATE:
        raise FormatError(f"{path}: sample rate {rate} Hz unsupported (resampling is not provided; need 16000)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(pcm.tobytes())


def hann(n: int) -> np.ndarray:
    # periodic Hann, the usual STFT choice
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_signal(samples: np.ndarray, frame_len: int, shift: int) -> np.ndarray:
    T = num_frames(len(samples), frame_len, shift)
    if T == 0:
        return np.zeros((0, frame_len))
    idx = np.arange(frame_len)[None, :] + shift * np.arange(T)[:, None]
    return samples[idx]


def stft(w: Waveform, frame_length: float = 0.025, frame_shift: float = 0.010,
         fft_size: int = 512) -> np.ndarray:
    """Complex one-sided spectrogram, shape ``(T, fft_size // 2 + 1)``."""
    flen = int(round(frame_length * w.sample_rate))
    shift = int(round(frame_shift * w.sample_rate))
    if fft_size < 1 or fft_size & (fft_size - 1):
        raise ConfigError(f"fft_size must be a power of two, got {fft_size}")
    if fft_size < flen:
        raise ConfigError(f"fft_size {fft_size} shorter than frame length {flen} samples")
    frames = frame_signal(w.samples, flen, shift) * hann(flen)
    return np.fft.rfft(frames, n=fft_size, axis=-1)


def spectrum_energy(spec_row: np.ndarray, fft_size: int) -> float:
    """Time-domain energy of a frame recovered from its one-sided spectrum."""
    p = np.abs(spec_row) ** 2
    total = p[0] + p[-1] + 2.0 * p[1:-1].sum() if fft_size % 2 == 0 else p[0] + 2.0 * p[1:].sum()
    return float(total / fft_size)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, fft_size: int, sample_rate: int) -> tuple[np.ndarray, np.ndarray]:
    """Triangular filters over ``[0, sr/2]``, each row normalised to sum 1.

    Returns ``(weights (n_mels, fft_size//2+1), center_frequencies_hz)``.
    """
    if n_mels < 1:
        raise ConfigError("n_mels must be >= 1")
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    sums = fb.sum(axis=1, keepdims=True)
    fb = np.divide(fb, sums, out=np.zeros_like(fb), where=sums > 0)
    return fb, edges[1:-1]


def log_mel(spec: np.ndarray, n_mels: int = 40, sample_rate: int = CANONICAL_RATE,
            frame_length: float = 0.025, frame_shift: float = 0.010) -> FeatureMatrix:
    fft_size = 2 * (spec.shape[-1] - 1)
    fb, _ = mel_filterbank(n_mels, fft_size, sample_rate)
    energy = (np.abs(spec) ** 2) @ fb.T
    return FeatureMatrix(np.log(np.maximum(energy, LOG_FLOOR)), frame_shift, frame_length)


def extract_features(w: Waveform, n_mels: int = 40, frame_length: float = 0.025,
                     frame_shift: float = 0.010, fft_size: int = 512) -> FeatureMatrix:
    spec = stft(w, frame_length, frame_shift, fft_size)
    return log_mel(spec, n_mels, w.sample_rate, frame_length, frame_shift)
