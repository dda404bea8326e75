"""Audio ingestion and MFCC features.

Feature matrices are ``(F, T)`` float32 arrays: one column per 10 ms frame.

Pipeline per 25 ms window: Hamming window, 512-point power spectrum, 20
triangular mel filters over 0-8000 Hz, natural log floored at 1e-10, orthonormal
DCT-II, coefficients 0..12. No pre-emphasis, deltas or mean normalisation.
"""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .errors import EmptyInputError, FormatError

SAMPLE_RATE = 16000
N_FFT = 512
N_MELS = 20
LOG_FLOOR = 1e-10

FEATURE_MAGIC = b"FTRS"
FEATURE_VERSION = 1


@dataclass
class AudioBuffer:
    """Normalised samples in [-1, 1] (gain may push them outside) and their rate."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise ValueError("audio must be mono (1-D samples)")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FrameSpec:
    window_ms: float = 25.0
    hop_ms: float = 10.0
    num_coeffs: int = 13

    def __post_init__(self):
        if not (self.window_ms >= self.hop_ms > 0):
            raise ValueError("need window_ms >= hop_ms > 0")
        if self.num_coeffs < 1:
            raise ValueError("num_coeffs must be >= 1")

    def window_samples(self, sample_rate: int = SAMPLE_RATE) -> int:
        return int(round(self.window_ms * sample_rate / 1000))

    def hop_samples(self, sample_rate: int = SAMPLE_RATE) -> int:
        return int(round(self.hop_ms * sample_rate / 1000))


DEFAULT_SPEC = FrameSpec()


def apply_gain(audio: AudioBuffer, p_db: float) -> AudioBuffer:
    """Scale by ``p_db`` decibels. No clipping is applied."""
    scale = 10.0 ** (p_db / 20.0)
    return AudioBuffer(audio.samples * np.float32(scale), audio.sample_rate)


def num_frames(n_samples: int, spec: FrameSpec = DEFAULT_SPEC, sample_rate: int = SAMPLE_RATE) -> int:
    win = spec.window_samples(sample_rate)
    if n_samples < win:
        return 0
    return (n_samples - win) // spec.hop_samples(sample_rate) + 1


def frame_signal(audio: AudioBuffer, spec: FrameSpec = DEFAULT_SPEC) -> np.ndarray:
    """Split into Hamming-windowed frames, shape ``(T, window_samples)``."""
    win = spec.window_samples(audio.sample_rate)
    hop = spec.hop_samples(audio.sample_rate)
    n = num_frames(len(audio), spec, audio.sample_rate)
    if n == 0:
        raise EmptyInputError(f"{len(audio)} samples is shorter than one {win}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(audio.samples, win)[::hop][:n]
    return frames * _hamming(win)


@lru_cache(maxsize=None)
def _hamming(n: int) -> np.ndarray:
    return np.hamming(n).astype(np.float32)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                   f_lo: float = 0.0, f_hi: float = 8000.0) -> np.ndarray:
    """Triangular filters ``(n_mels, n_fft//2 + 1)`` evaluated at exact bin frequencies."""
    edges = mel_to_hz(np.linspace(hz_to_mel(f_lo), hz_to_mel(f_hi), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mfcc(windows: np.ndarray, num_coeffs: int = 13) -> np.ndarray:
    """MFCCs for windowed frames ``(T, W)``; returns ``(num_coeffs, T)`` float32."""
    windows = np.atleast_2d(np.asarray(windows, dtype=np.float64))
    if windows.shape[0] == 0:
        raise EmptyInputError("no windows to transform")
    spectrum = np.fft.rfft(windows, N_FFT, axis=1)
    power = (spectrum.real ** 2 + spectrum.imag ** 2) / N_FFT
    energies = power @ mel_filterbank().T
    logmel = np.log(np.maximum(energies, LOG_FLOOR))
    ceps = dct(logmel, type=2, axis=1, norm="ortho")[:, :num_coeffs]
    return np.ascontiguousarray(ceps.T, dtype=np.float32)


def extract_mfcc(audio: AudioBuffer, spec: FrameSpec = DEFAULT_SPEC) -> np.ndarray:
    """``frame_signal`` + ``mfcc``; zero-column result for audio shorter than a window."""
    if num_frames(len(audio), spec, audio.sample_rate) == 0:
        return np.zeros((spec.num_coeffs, 0), dtype=np.float32)
    return mfcc(frame_signal(audio, spec), spec.num_coeffs)


def concat_context(feats: np.ndarray, c: int, pad: str = "edge") -> np.ndarray:
    """Stack ``2c+1`` neighbouring frames into each column.

    Column ``t`` of the result is ``[x_{t-c}; ...; x_t; ...; x_{t+c}]``.
    Frames outside ``[0, T)`` are replaced by the first/last frame when
    ``pad="edge"`` and by zeros when ``pad="zero"``. The zero convention is the
    one streaming inference uses, since its buffers start and end empty.
    """
    if c < 0:
        raise ValueError("context must be non-negative")
    feats = np.asarray(feats)
    if c == 0:
        return feats.copy()
    f, t = feats.shape
    if pad == "edge":
        if t == 0:
            return np.zeros((f * (2 * c + 1), 0), dtype=feats.dtype)
        padded = np.pad(feats, ((0, 0), (c, c)), mode="edge")
    elif pad == "zero":
        padded = np.pad(feats, ((0, 0), (c, c)))
    else:
        raise ValueError(f"unknown pad mode {pad!r}")
    blocks = [padded[:, j:j + t] for j in range(2 * c + 1)]
    return np.concatenate(blocks, axis=0)


class StreamingFrontend:
    """Turns arbitrary-sized chunks of samples into MFCC frames as soon as each
    window is complete. Output equals :func:`extract_mfcc` on the concatenated
    input."""

    def __init__(self, spec: FrameSpec = DEFAULT_SPEC, sample_rate: int = SAMPLE_RATE):
        self.spec = spec
        self.win = spec.window_samples(sample_rate)
        self.hop = spec.hop_samples(sample_rate)
        self._pending = np.zeros(0, dtype=np.float32)

    def push(self, samples: np.ndarray) -> np.ndarray:
        """Returns the ``(num_coeffs, n)`` frames completed by this chunk."""
        buf = np.concatenate([self._pending, np.asarray(samples, dtype=np.float32)])
        n = num_frames(len(buf), self.spec)
        if n == 0:
            self._pending = buf
            return np.zeros((self.spec.num_coeffs, 0), dtype=np.float32)
        frames = np.lib.stride_tricks.sliding_window_view(buf, self.win)[::self.hop][:n]
        self._pending = buf[n * self.hop:]
        return mfcc(frames * _hamming(self.win), self.spec.num_coeffs)


# --- WAV and feature files -------------------------------------------------

def read_wav(path: str | Path) -> AudioBuffer:
    """Read a 16-bit PCM mono 16 kHz WAV file. Anything else is rejected."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getcomptype() != "NONE":
                raise FormatError(f"{path}: compressed WAV not supported")
            if w.getnchannels() != 1:
                raise FormatError(f"{path}: expected mono, got {w.getnchannels()} channels")
            if w.getsampwidth() != 2:
                raise FormatError(f"{path}: expected 16-bit samples, got {8 * w.getsampwidth()}-bit")
            if w.getframerate() != SAMPLE_RATE:
                raise FormatError(f"{path}: expected {SAMPLE_RATE} Hz, got {w.getframerate()} Hz")
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: not a valid WAV file ({exc})") from exc
    return AudioBuffer(pcm16_to_float(raw), SAMPLE_RATE)


def write_wav(path: str | Path, audio: AudioBuffer) -> None:
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio.sample_rate)
        w.writeframes(float_to_pcm16(audio.samples))


def pcm16_to_float(raw: bytes) -> np.ndarray:
    if len(raw) % 2:
        raw = raw[:-1]
    return np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0


def float_to_pcm16(samples: np.ndarray) -> bytes:
    q = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767)
    return q.astype("<i2").tobytes()


def save_features(path: str | Path, feats: np.ndarray) -> None:
    """Binary dump: ``FTRS``, version byte, F and T as u32 LE, then float32 LE
    values frame by frame."""
    feats = np.asarray(feats, dtype=np.float32)
    f, t = feats.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<BII", FEATURE_VERSION, f, t))
        fh.write(np.ascontiguousarray(feats.T).astype("<f4").tobytes())


def load_features(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise FormatError("bad feature file magic", 0)
    if len(data) < 13:
        raise FormatError("truncated feature header", len(data))
    version, f, t = struct.unpack_from("<BII", data, 4)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature file version {version}", 4)
    need = 13 + 4 * f * t
    if len(data) < need:
        raise FormatError(f"truncated feature data: need {need} bytes, have {len(data)}", len(data))
    values = np.frombuffer(data, dtype="<f4", count=f * t, offset=13)
    return values.reshape(t, f).T.astype(np.float32)
