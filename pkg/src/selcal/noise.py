"""Speech-shaped masker synthesis, SNR-controlled mixing, and mel features.

The masker pipeline mirrors how speech-shaped modulated noise is built:
measure the long-term average spectrum (LTAS) of a corpus, filter white
noise to that spectrum, then impose the corpus's average temporal envelope.
Mixing scales the masker against fixed speech to hit a requested SNR.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, filtfilt, hilbert

from .audio_io import Waveform
from .records import ValidationError

DEFAULT_SAMPLE_RATE = 16_000
ENVELOPE_FRAME_RATE = 100.0
ENVELOPE_CUTOFF_HZ = 32.0


def _hann(n: int) -> np.ndarray:
    # periodic Hann; sums to a constant at 50% overlap
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _check_rate(waves: list[Waveform]) -> int:
    rates = {w.sample_rate for w in waves}
    if len(rates) > 1:
        raise ValidationError(f"mixed sample rates: {sorted(rates)}")
    return rates.pop()


@dataclass
class Ltas:
    """Per-bin RMS magnitude up to Nyquist for a given FFT size."""

    magnitudes: np.ndarray
    fft_size: int
    sample_rate: int

    def __post_init__(self):
        self.magnitudes = np.asarray(self.magnitudes, dtype=np.float64)
        if self.magnitudes.shape != (self.fft_size // 2 + 1,):
            raise ValidationError("LTAS length must be fft_size/2 + 1")
        if not np.all(np.isfinite(self.magnitudes)) or np.any(self.magnitudes < 0):
            raise ValidationError("LTAS magnitudes must be finite and non-negative")

    def bin_frequencies(self) -> np.ndarray:
        return np.fft.rfftfreq(self.fft_size, d=1.0 / self.sample_rate)


@dataclass
class EnvelopeProfile:
    """Low-rate amplitude envelope normalized to unit mean."""

    samples: np.ndarray
    frame_rate: float = ENVELOPE_FRAME_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or len(self.samples) == 0:
            raise ValidationError("envelope must be a non-empty 1-D array")
        if np.any(self.samples < 0):
            raise ValidationError("envelope samples must be non-negative")
        if abs(float(np.mean(self.samples)) - 1.0) > 1e-9:
            raise ValidationError("envelope must be normalized to mean 1")


@dataclass
class NoiseRecipe:
    """Everything needed to regenerate one masker realization."""

    ltas: Ltas
    envelope: EnvelopeProfile
    seed: int


def compute_ltas(utterances: list[Waveform], fft_size: int = 1024,
                 hop: int = 512) -> Ltas:
    """Per-bin RMS magnitude over Hann-windowed frames of a corpus.

    All utterances must share one sample rate; utterances shorter than one
    FFT block are skipped.
    """
    if not utterances:
        raise ValidationError("empty corpus")
    if fft_size & (fft_size - 1):
        raise ValidationError("fft_size must be a power of two")
    rate = _check_rate(utterances)
    window = _hann(fft_size)
    power_sum = np.zeros(fft_size // 2 + 1)
    n_frames = 0
    for wave in utterances:
        x = wave.samples
        if len(x) < fft_size:
            continue
        n = (len(x) - fft_size) // hop + 1
        idx = np.arange(fft_size)[None, :] + hop * np.arange(n)[:, None]
        spec = np.fft.rfft(x[idx] * window, axis=1)
        power_sum += np.sum(np.abs(spec) ** 2, axis=0)
        n_frames += n
    if n_frames == 0:
        raise ValidationError("no utterance is long enough for one FFT block")
    return Ltas(np.sqrt(power_sum / n_frames), fft_size, rate)


def shape_noise(duration: float, ltas: Ltas, seed: int) -> Waveform:
    """White Gaussian noise spectrally shaped to a target LTAS.

    Zero-phase frequency-domain multiplication over 50%-overlapped
    Hann-windowed blocks; the gain is normalized so that measuring the
    output with :func:`compute_ltas` at the same FFT size recovers the
    target levels.
    """
    if duration <= 0:
        raise ValidationError("duration must be positive")
    rng = np.random.default_rng(seed)
    n_out = int(round(duration * ltas.sample_rate))
    block = ltas.fft_size
    hop = block // 2
    window = _hann(block)
    # unit-variance white noise measured through a Hann window has per-bin
    # RMS magnitude sqrt(sum(w^2)); divide it out so the target is absolute
    gain = ltas.magnitudes / math.sqrt(float(np.sum(window ** 2)))
    pad = 2 * block
    x = rng.standard_normal(n_out + 2 * pad)
    y = np.zeros_like(x)
    for start in range(0, len(x) - block + 1, hop):
        seg = np.fft.rfft(x[start:start + block] * window)
        y[start:start + block] += np.fft.irfft(seg * gain, n=block)
    return Waveform(y[pad:pad + n_out], ltas.sample_rate)


def extract_envelope(wave: Waveform,
                     frame_rate: float = ENVELOPE_FRAME_RATE) -> EnvelopeProfile:
    """Analytic-signal magnitude, low-passed at 32 Hz, decimated, mean-1."""
    x = wave.samples
    if len(x) == 0:
        raise ValidationError("empty audio")
    if len(x) < 64:
        raise ValidationError("audio too short for envelope extraction")
    if not np.any(x):
        raise ValidationError("zero envelope: audio is silent")
    env = np.abs(hilbert(x))
    b, a = butter(4, ENVELOPE_CUTOFF_HZ / (wave.sample_rate / 2.0))
    env = filtfilt(b, a, env)
    step = int(round(wave.sample_rate / frame_rate))
    env = np.clip(env[::step], 0.0, None)
    mean = float(np.mean(env))
    if mean <= 0:
        raise ValidationError("zero envelope")
    return EnvelopeProfile(env / mean, frame_rate)


def build_average_envelope(utterances: list[Waveform]) -> EnvelopeProfile:
    """Point-wise average of per-utterance envelopes.

    Each envelope is linearly resampled to the median envelope length
    before averaging; the result is renormalized to mean 1.
    """
    if not utterances:
        raise ValidationError("empty corpus")
    _check_rate(utterances)
    envelopes = [extract_envelope(w) for w in utterances]
    frame_rate = envelopes[0].frame_rate
    target_len = int(np.median([len(e.samples) for e in envelopes]))
    grid = np.linspace(0.0, 1.0, target_len)
    resampled = [
        np.interp(grid, np.linspace(0.0, 1.0, len(e.samples)), e.samples)
        for e in envelopes
    ]
    avg = np.mean(resampled, axis=0)
    return EnvelopeProfile(avg / np.mean(avg), frame_rate)


def apply_modulation(noise: Waveform, envelope: EnvelopeProfile) -> Waveform:
    """Multiply by the linearly interpolated envelope, preserving RMS.

    The envelope is tiled when shorter than the noise.
    """
    x = noise.samples
    n_frames_needed = int(math.ceil(noise.duration * envelope.frame_rate)) + 1
    reps = max(1, int(math.ceil(n_frames_needed / len(envelope.samples))))
    env = np.tile(envelope.samples, reps)
    t_env = np.arange(len(env)) / envelope.frame_rate
    t_x = np.arange(len(x)) / noise.sample_rate
    gain = np.interp(t_x, t_env, env)
    y = x * gain
    rms_in = noise.rms()
    rms_out = float(np.sqrt(np.mean(np.square(y)))) if len(y) else 0.0
    if rms_out > 0:
        y *= rms_in / rms_out
    return Waveform(y, noise.sample_rate)


def mix_at_snr(speech: Waveform, masker: Waveform, snr_db: float,
               seed: int) -> tuple[Waveform, tuple[int, int]]:
    """Add a random masker segment to speech at an exact SNR.

    The masker must be strictly longer than the speech; a segment of
    speech length is chosen with a seeded uniform onset and scaled so that
    ``20*log10(rms(speech)/rms(segment))`` equals ``snr_db``.  The sum is
    returned unclipped along with the segment bounds.
    """
    _check_rate([speech, masker])
    n_s, n_m = len(speech.samples), len(masker.samples)
    if n_m <= n_s:
        raise ValidationError("masker must be strictly longer than speech")
    rms_speech = speech.rms()
    if rms_speech == 0 or masker.rms() == 0:
        raise ValidationError("zero-RMS speech or masker")
    rng = np.random.default_rng(seed)
    onset = int(rng.integers(0, n_m - n_s + 1))
    segment = masker.samples[onset:onset + n_s]
    rms_seg = float(np.sqrt(np.mean(np.square(segment))))
    if rms_seg == 0:
        raise ValidationError("zero-RMS masker segment")
    scale = rms_speech / (rms_seg * 10.0 ** (snr_db / 20.0))
    mixed = speech.samples + scale * segment
    return Waveform(mixed, speech.sample_rate), (onset, onset + n_s)


def measure_snr(speech: Waveform, scaled_masker: Waveform) -> float:
    """20*log10(rms(speech)/rms(masker)) over equal-length signals."""
    if len(speech.samples) != len(scaled_masker.samples):
        raise ValidationError("speech and masker must have equal length")
    rms_s, rms_m = speech.rms(), scaled_masker.rms()
    if rms_s == 0 or rms_m == 0:
        raise ValidationError("zero-RMS signal")
    return 20.0 * math.log10(rms_s / rms_m)


def _mel_from_hz(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _hz_from_mel(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filters (n_mels x n_bins), unit peak, 0..Nyquist."""
    n_bins = n_fft // 2 + 1
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    points = _hz_from_mel(np.linspace(0.0, _mel_from_hz(sample_rate / 2.0), n_mels + 2))
    bank = np.zeros((n_mels, n_bins))
    for i in range(n_mels):
        lo, center, hi = points[i], points[i + 1], points[i + 2]
        rising = (freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - freqs) / max(hi - center, 1e-12)
        bank[i] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def stft_power(wave: Waveform, win: float = 0.025,
               hop: float = 0.010) -> np.ndarray:
    """Hann-windowed power spectrogram (frames x bins).

    Frame count is ``floor((len - win)/hop) + 1``; the FFT size is the
    next power of two at or above the window length.
    """
    x = wave.samples
    win_n = int(round(win * wave.sample_rate))
    hop_n = int(round(hop * wave.sample_rate))
    if len(x) < win_n:
        raise ValidationError("audio shorter than one analysis window")
    n_fft = 1 << (win_n - 1).bit_length()
    n_frames = (len(x) - win_n) // hop_n + 1
    idx = np.arange(win_n)[None, :] + hop_n * np.arange(n_frames)[:, None]
    frames = x[idx] * _hann(win_n)
    return np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2


def mel_spectrogram(wave: Waveform, n_mels: int = 80, win: float = 0.025,
                    hop: float = 0.010) -> np.ndarray:
    """Log mel filterbank energies: ln(energy + 1e-10), frames x n_mels."""
    power = stft_power(wave, win=win, hop=hop)
    win_n = int(round(win * wave.sample_rate))
    n_fft = 1 << (win_n - 1).bit_length()
    bank = mel_filterbank(n_mels, n_fft, wave.sample_rate)
    return np.log(power @ bank.T + 1e-10)
