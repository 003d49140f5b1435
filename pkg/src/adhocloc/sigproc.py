"""Framing, STFT, and phase-map feature extraction for multichannel audio."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window

PIPELINE_SAMPLE_RATE = 16000


@dataclass(frozen=True)
class MultichannelAudio:
    """Samples shaped (channels, length), float64, all channels equal length."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 1:
            s = s[np.newaxis, :]
        if s.ndim != 2:
            raise ValueError(f"samples must be 1D or 2D, got ndim={s.ndim}")
        object.__setattr__(self, "samples", s)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def channel_count(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class StftTensor:
    """Complex STFT values shaped (channels, frames, bins), bins = frame_size//2 + 1."""

    values: np.ndarray
    frame_size: int
    hop: int
    sample_rate: int

    @property
    def channel_count(self) -> int:
        return self.values.shape[0]

    @property
    def frame_count(self) -> int:
        return self.values.shape[1]

    @property
    def bin_count(self) -> int:
        return self.values.shape[2]

    def bin_frequencies(self) -> np.ndarray:
        """Center frequency in Hz of every bin."""
        return np.arange(self.bin_count) * self.sample_rate / self.frame_size


@dataclass(frozen=True)
class PhaseMap:
    """Phases in (-pi, pi] shaped (channels, bins, frames)."""

    phases: np.ndarray

    @property
    def channel_count(self) -> int:
        return self.phases.shape[0]

    @property
    def bin_count(self) -> int:
        return self.phases.shape[1]

    @property
    def frame_count(self) -> int:
        return self.phases.shape[2]

    def frame(self, t: int) -> np.ndarray:
        """The (channels, bins) feature of frame t."""
        return self.phases[:, :, t]


def stft(
    audio: MultichannelAudio,
    frame_size: int = 512,
    overlap: float = 0.5,
    window: str = "hann",
) -> StftTensor:
    """Windowed DFT per frame per channel.

    Frame count is floor((length - frame_size) / hop) + 1; the trailing
    partial frame is dropped. The analysis window defaults to Hann
    (periodic); "boxcar" gives an unwindowed transform.
    """
    if frame_size <= 0 or frame_size & (frame_size - 1):
        raise ValueError(f"frame_size must be a power of two, got {frame_size}")
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    if audio.length < frame_size:
        raise ValueError(
            f"audio length {audio.length} is shorter than one frame ({frame_size})"
        )
    hop = int(round(frame_size * (1.0 - overlap)))
    win = get_window(window, frame_size, fftbins=True)
    n_frames = (audio.length - frame_size) // hop + 1
    starts = np.arange(n_frames) * hop
    frames = np.stack([audio.samples[:, s : s + frame_size] for s in starts], axis=1)
    values = np.fft.rfft(frames * win, axis=2)
    return StftTensor(values, frame_size, hop, audio.sample_rate)


def phase_map(tensor: StftTensor, drop_lowest_subband: bool = True) -> PhaseMap:
    """Phase spectrogram feature: arg of the STFT, channels stacked.

    With drop_lowest_subband the DC bin is removed, so a 512-point STFT
    yields 256 bins per channel.
    """
    if tensor.values.size == 0:
        raise ValueError("empty STFT tensor")
    values = tensor.values[:, :, 1:] if drop_lowest_subband else tensor.values
    # transpose (channels, frames, bins) -> (channels, bins, frames)
    return PhaseMap(np.angle(values).transpose(0, 2, 1))


def read_wav(path: str | Path) -> MultichannelAudio:
    """Read a PCM WAV file into float64 channels-first audio in [-1, 1)."""
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported WAV sample format {data.dtype}")
    if samples.ndim == 2:
        samples = samples.T  # wavfile returns (frames, channels)
    return MultichannelAudio(samples, int(rate))


def write_wav(path: str | Path, audio: MultichannelAudio, peak: float = 0.9) -> None:
    """Write audio as 16-bit PCM, normalized to the given peak when needed."""
    data = audio.samples
    max_abs = float(np.max(np.abs(data))) if data.size else 0.0
    if max_abs > 0:
        scale = min(peak / max_abs, 1.0) if max_abs > peak else 1.0
        data = data * scale
    pcm = np.clip(np.round(data * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), audio.sample_rate, pcm.T)
