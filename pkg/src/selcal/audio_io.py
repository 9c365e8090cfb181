"""Waveform container plus WAVE and mel binary file I/O.

Mel binary format ("MEL1"): magic bytes ``MEL1``, little-endian uint32
``n_frames`` and ``n_bins``, then ``n_frames * n_bins`` little-endian
float32 values in frame-major (row-major) order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .records import ValidationError

MEL_MAGIC = b"MEL1"


@dataclass
class Waveform:
    """Mono audio samples with their sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValidationError("waveform must be mono (1-D)")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def rms(self) -> float:
        return float(np.sqrt(np.mean(np.square(self.samples)))) if len(self.samples) else 0.0


def read_wav(path: str | Path) -> Waveform:
    """Read a mono RIFF WAVE file; integer PCM is scaled to [-1, 1)."""
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValidationError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise ValidationError(f"{path}: unsupported WAVE sample format {data.dtype}")
    return Waveform(samples, int(rate))


def write_wav(path: str | Path, wave: Waveform) -> None:
    """Write a mono 32-bit float RIFF WAVE file."""
    wavfile.write(str(path), wave.sample_rate, wave.samples.astype(np.float32))


def write_mel(path: str | Path, mel: np.ndarray) -> None:
    mel = np.asarray(mel)
    if mel.ndim != 2:
        raise ValidationError("mel matrix must be 2-D (frames x bins)")
    n_frames, n_bins = mel.shape
    with open(path, "wb") as fh:
        fh.write(MEL_MAGIC)
        fh.write(struct.pack("<II", n_frames, n_bins))
        fh.write(np.ascontiguousarray(mel, dtype="<f4").tobytes())


def read_mel_header(path: str | Path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MEL_MAGIC:
            raise ValidationError(f"{path}: bad mel magic {magic!r}")
        n_frames, n_bins = struct.unpack("<II", fh.read(8))
    return n_frames, n_bins


def read_mel(path: str | Path) -> np.ndarray:
    n_frames, n_bins = read_mel_header(path)
    with open(path, "rb") as fh:
        fh.seek(12)
        data = np.frombuffer(fh.read(4 * n_frames * n_bins), dtype="<f4")
    if data.size != n_frames * n_bins:
        raise ValidationError(f"{path}: truncated mel payload")
    return data.reshape(n_frames, n_bins)
