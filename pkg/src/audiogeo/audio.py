"""Waveform ingestion, log-mel spectrograms and 3 s clip windows.

Fixed front end: 22050 Hz, periodic Hann window of 512 samples, hop 128,
128 triangular mel filters (unit peak) over [50, 11025] Hz, log(1 + P).
"""

import math
import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.io import wavfile

from .errors import EmptyAudio, UnsupportedAudio

SAMPLE_RATE = 22050
N_FFT = 512
HOP = 128
N_MELS = 128
F_LO = 50.0
F_HI = 11025.0
CLIP_SECONDS = 3.0
CLIP_STRIDE_SECONDS = 1.5
RESIZED = 224

SPEC_MAGIC = b"S2LM"


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration_s(self):
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # (n_frames, 128)
    params: dict = field(default_factory=lambda: dict(
        window=N_FFT, hop=HOP, mel_bins=N_MELS, f_lo=F_LO, f_hi=F_HI))

    @property
    def n_frames(self):
        return self.frames.shape[0]


@dataclass
class ClipWindow:
    start_s: float
    spec: MelSpectrogram

    @cached_property
    def resized(self):
        return resize_bilinear(self.spec.frames, RESIZED, RESIZED)


# -- io -------------------------------------------------------------------

def load_audio(path):
    """Read a PCM WAV file; channels are averaged and integers scaled to [-1, 1]."""
    try:
        rate, data = wavfile.read(path)
    except (ValueError, EOFError, struct.error) as exc:
        raise UnsupportedAudio(f"{path}: {exc}") from exc
    if data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise UnsupportedAudio(f"{path}: unsupported sample type {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    return Waveform(x, int(rate))


def save_wav(path, w, bits=16):
    x = np.clip(w.samples, -1.0, 1.0)
    if bits == 16:
        data = np.round(x * 32767.0).astype("<i2")
    elif bits == 32:
        data = x.astype("<f4")
    else:
        raise ValueError("bits must be 16 or 32")
    wavfile.write(path, w.sample_rate, data)


def save_spectrogram(path, spec):
    m = np.ascontiguousarray(spec.frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(SPEC_MAGIC + struct.pack("<II", *m.shape))
        fh.write(m.tobytes())


def load_spectrogram(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != SPEC_MAGIC or len(raw) < 12:
        raise UnsupportedAudio(f"{path}: not a spectrogram dump")
    rows, cols = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + 4 * rows * cols:
        raise UnsupportedAudio(f"{path}: truncated spectrogram dump")
    return MelSpectrogram(np.frombuffer(raw, dtype="<f4", offset=12).reshape(rows, cols).astype(np.float64))


# -- dsp ------------------------------------------------------------------

def resample_linear(w, target):
    if target <= 0:
        raise ValueError("target rate must be positive")
    if target == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    n = len(w.samples)
    m = int(round(n * target / w.sample_rate))
    pos = np.arange(m) * (w.sample_rate / target)
    return Waveform(np.interp(pos, np.arange(n), w.samples), int(target))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def mel_edges_hz():
    """The 130 mel-spaced edge frequencies; filter i peaks at edge i + 1."""
    return mel_to_hz(np.linspace(hz_to_mel(F_LO), hz_to_mel(F_HI), N_MELS + 2))


def mel_centers_hz():
    return mel_edges_hz()[1:-1]


_FILTERBANK = None


def mel_filterbank():
    """(128, 257) triangular filters with unit peak."""
    global _FILTERBANK
    if _FILTERBANK is None:
        edges = mel_edges_hz()
        freqs = np.arange(N_FFT // 2 + 1) * SAMPLE_RATE / N_FFT
        lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
        up = (freqs[None, :] - lo) / (mid - lo)
        down = (hi - freqs[None, :]) / (hi - mid)
        _FILTERBANK = np.maximum(0.0, np.minimum(up, down))
        _FILTERBANK.setflags(write=False)
    return _FILTERBANK


_WINDOW = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(N_FFT) / N_FFT)


def frame_count(n_samples):
    return (max(n_samples, N_FFT) - N_FFT) // HOP + 1


def power_spectrogram(samples):
    """|STFT|^2, shape (n_frames, 257); input shorter than 512 is zero-padded."""
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < N_FFT:
        x = np.pad(x, (0, N_FFT - len(x)))
    frames = np.lib.stride_tricks.sliding_window_view(x, N_FFT)[::HOP]
    spec = np.fft.rfft(frames * _WINDOW, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def mel_power(w):
    """Mel-band power before log compression."""
    if w.sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {w.sample_rate}; resample first")
    return power_spectrogram(w.samples) @ mel_filterbank().T


def mel_spectrogram(w):
    return MelSpectrogram(np.log1p(mel_power(w)))


def window_count(n_samples, sample_rate=SAMPLE_RATE):
    clip = int(round(CLIP_SECONDS * sample_rate))
    stride = int(round(CLIP_STRIDE_SECONDS * sample_rate))
    if n_samples <= clip:
        return 1
    return (n_samples - clip) // stride + 1


def slice_windows(w):
    """Strided 3 s windows (1.5 s stride) with their log-mel spectrograms."""
    if len(w.samples) == 0:
        raise EmptyAudio("waveform has no samples")
    if w.sample_rate != SAMPLE_RATE:
        w = resample_linear(w, SAMPLE_RATE)
    clip = int(round(CLIP_SECONDS * SAMPLE_RATE))
    stride = int(round(CLIP_STRIDE_SECONDS * SAMPLE_RATE))
    x = w.samples
    if len(x) < clip:
        x = np.pad(x, (0, clip - len(x)))
    out = []
    for i in range(window_count(len(w.samples))):
        seg = x[i * stride:i * stride + clip]
        out.append(ClipWindow(i * CLIP_STRIDE_SECONDS, mel_spectrogram(Waveform(seg, SAMPLE_RATE))))
    return out


def _interp_matrix(n_in, n_out):
    """Corner-aligned linear interpolation weights, shape (n_out, n_in)."""
    mat = np.zeros((n_out, n_in))
    if n_in == 1:
        mat[:, 0] = 1.0
        return mat
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1)) if n_out > 1 else np.zeros(1)
    i0 = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - i0
    mat[np.arange(n_out), i0] = 1.0 - frac
    mat[np.arange(n_out), i0 + 1] += frac
    return mat


def resize_bilinear(img, rows, cols):
    img = np.asarray(img, dtype=np.float64)
    return _interp_matrix(img.shape[0], rows) @ img @ _interp_matrix(img.shape[1], cols).T


def spectral_peaks(samples, sample_rate, k):
    """Frequencies (Hz) of the ``k`` largest magnitude-spectrum bins."""
    mag = np.abs(np.fft.rfft(samples))
    idx = np.argsort(mag)[::-1][:k]
    return np.sort(idx * sample_rate / len(samples)), sample_rate / len(samples)


def fft_peak_hz(samples, sample_rate):
    mag = np.abs(np.fft.rfft(samples))
    return float(np.argmax(mag) * sample_rate / len(samples))


def nearest_mel_bin(freq_hz):
    return int(np.argmin(np.abs(mel_centers_hz() - freq_hz)))


def duration_to_windows(duration_s):
    return max(1, math.floor((duration_s - CLIP_SECONDS) / CLIP_STRIDE_SECONDS) + 1)
