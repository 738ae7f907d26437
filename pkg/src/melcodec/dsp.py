"""Waveform I/O, STFT/mel analysis, and a deterministic mel-to-waveform path.

Analysis follows the HiFi-GAN-style convention: periodic Hann window of the
frame length zero-padded to the FFT size, reflect-centered frames, natural-log
compression of magnitude mel energies with a 1e-5 floor. The decode direction
uses non-negative least squares to invert the filterbank followed by
Griffin-Lim phase reconstruction, standing in for a neural vocoder.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


@dataclass
class MelConfig:
    sample_rate: int = 16000
    frame_length: int = 640
    hop: int = 160
    fft_size: int = 1024
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float | None = None
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.fmax is None:
            self.fmax = self.sample_rate / 2
        if self.frame_length > self.fft_size:
            raise ValueError("frame_length must not exceed fft_size")
        if self.hop > self.frame_length:
            raise ValueError("hop must not exceed frame_length")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise ValueError(f"require 0 <= fmin < fmax <= sample_rate/2, "
                             f"got fmin={self.fmin} fmax={self.fmax}")


@dataclass
class MelSpectrogram:
    """Frame-major log-mel matrix [N, D]."""
    data: np.ndarray
    config: MelConfig = field(repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("mel data must be 2-D [frames, bins]")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("mel data contains non-finite entries")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_bins(self) -> int:
        return self.data.shape[1]


# ---------------------------------------------------------------------------
# RIFF/WAVE 16-bit PCM mono
# ---------------------------------------------------------------------------

def load_wav(path) -> tuple[np.ndarray, int]:
    """Read a 16-bit PCM mono wav; samples scaled by 1/32768 into [-1, 1]."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise ValueError(f"{path}: not a RIFF/WAVE file")
    offset = 12
    fmt = None
    data = None
    while offset + 8 <= len(blob):
        chunk_id = blob[offset:offset + 4]
        (chunk_size,) = struct.unpack_from("<I", blob, offset + 4)
        body = blob[offset + 8:offset + 8 + chunk_size]
        if chunk_id == b"fmt ":
            if chunk_size < 16:
                raise ValueError(f"{path}: malformed fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            if len(body) < chunk_size:
                raise ValueError(f"{path}: truncated data chunk "
                                 f"({len(body)} of {chunk_size} bytes)")
            data = body
        offset += 8 + chunk_size + (chunk_size & 1)
    if fmt is None or data is None:
        raise ValueError(f"{path}: missing fmt or data chunk")
    audio_format, channels, sample_rate, _, _, bits = fmt
    if audio_format != 1 or bits != 16:
        raise ValueError(f"{path}: only 16-bit PCM supported "
                         f"(format={audio_format}, bits={bits})")
    if channels != 1:
        raise ValueError(f"{path}: only mono supported, got {channels} channels")
    samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    return samples, sample_rate


def save_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    """Write 16-bit PCM mono; samples are clipped to [-1, 1] first."""
    samples = np.asarray(samples, dtype=np.float64)
    clipped = np.clip(samples, -1.0, 1.0)
    ints = np.clip(np.round(clipped * 32768.0), -32768, 32767).astype("<i2")
    payload = ints.tobytes()
    with open(path, "wb") as f:
        f.write(b"RIFF")
        f.write(struct.pack("<I", 36 + len(payload)))
        f.write(b"WAVE")
        f.write(b"fmt ")
        f.write(struct.pack("<IHHIIHH", 16, 1, 1, sample_rate,
                            sample_rate * 2, 2, 16))
        f.write(b"data")
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)


# ---------------------------------------------------------------------------
# analysis
# ---------------------------------------------------------------------------

def _hann(length: int) -> np.ndarray:
    # periodic Hann, matching the vocoder convention
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)


def _frame_signal(x: np.ndarray, cfg: MelConfig) -> np.ndarray:
    n_frames = int(np.ceil(len(x) / cfg.hop))
    pad = cfg.frame_length // 2
    xpad = np.pad(x, pad, mode="reflect")
    starts = np.arange(n_frames) * cfg.hop
    idx = starts[:, None] + np.arange(cfg.frame_length)[None, :]
    return xpad[idx]


def stft(x: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Complex spectrogram [N, fft_size/2 + 1] with N = ceil(len(x)/hop)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or len(x) == 0:
        raise ValueError("stft input must be a non-empty 1-D signal")
    frames = _frame_signal(x, cfg) * _hann(cfg.frame_length)[None, :]
    return np.fft.rfft(frames, n=cfg.fft_size, axis=1)


def mel_scale(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular filters [D, fft_size/2 + 1], peaks equally spaced in mel."""
    n_bins = cfg.fft_size // 2 + 1
    bin_freqs = np.arange(n_bins) * cfg.sample_rate / cfg.fft_size
    mel_points = np.linspace(mel_scale(cfg.fmin), mel_scale(cfg.fmax), cfg.n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    fb = np.zeros((cfg.n_mels, n_bins))
    for d in range(cfg.n_mels):
        left, center, right = hz_points[d], hz_points[d + 1], hz_points[d + 2]
        rising = (bin_freqs - left) / (center - left)
        falling = (right - bin_freqs) / (right - center)
        fb[d] = np.maximum(0.0, np.minimum(rising, falling))
        if not fb[d].any():
            raise ValueError(f"mel filter {d} is empty; n_mels too large for "
                             f"fft_size={cfg.fft_size}")
    return fb


def mel_spectrogram(x: np.ndarray, cfg: MelConfig) -> MelSpectrogram:
    """ln(max(filterbank @ |STFT|, log_floor)), frame-major [N, D]."""
    spec = np.abs(stft(x, cfg))  # [N, bins]
    mel = spec @ mel_filterbank(cfg).T  # [N, D]
    return MelSpectrogram(np.log(np.maximum(mel, cfg.log_floor)), cfg)


# ---------------------------------------------------------------------------
# synthesis fallback
# ---------------------------------------------------------------------------

def _istft(spec: np.ndarray, cfg: MelConfig, length: int) -> np.ndarray:
    """Windowed overlap-add inverse of `stft`, trimmed to the given length."""
    window = _hann(cfg.frame_length)
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=1)[:, :cfg.frame_length]
    frames *= window[None, :]
    pad = cfg.frame_length // 2
    total = (spec.shape[0] - 1) * cfg.hop + cfg.frame_length
    out = np.zeros(total)
    wsum = np.zeros(total)
    for i in range(spec.shape[0]):
        lo = i * cfg.hop
        out[lo:lo + cfg.frame_length] += frames[i]
        wsum[lo:lo + cfg.frame_length] += window ** 2
    good = wsum > 1e-11
    out[good] /= wsum[good]
    out = out[pad:pad + length]
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return out


def _nnls(fb: np.ndarray, targets: np.ndarray, iterations: int = 400) -> np.ndarray:
    """Projected-gradient NNLS: min ||fb @ S - targets||^2 with S >= 0.

    targets is [D, N]; returns S [bins, N]. Deterministic and vectorized over
    frames, which keeps decode latency reasonable without scipy per-frame calls.
    """
    lipschitz = np.linalg.norm(fb, 2) ** 2
    step = 1.0 / lipschitz
    s = np.maximum(fb.T @ targets, 0.0)
    momentum = s.copy()
    t_prev = 1.0
    for _ in range(iterations):
        grad = fb.T @ (fb @ momentum - targets)
        s_next = np.maximum(momentum - step * grad, 0.0)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_prev ** 2))
        momentum = s_next + ((t_prev - 1.0) / t_next) * (s_next - s)
        s, t_prev = s_next, t_next
    return s


def mel_to_waveform(mel: MelSpectrogram, iterations: int = 32) -> np.ndarray:
    """Invert a log-mel matrix to a waveform of length N * hop.

    The filterbank is pseudo-inverted with non-negative least squares, then
    Griffin-Lim runs for the requested iteration count (0 means zero phase).
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    cfg = mel.config
    fb = mel_filterbank(cfg)
    linear = np.exp(mel.data)  # [N, D]
    magnitude = _nnls(fb, linear.T).T  # [N, bins]
    length = mel.n_frames * cfg.hop

    phase = np.zeros_like(magnitude)
    spec = magnitude * np.exp(1j * phase)
    x = _istft(spec, cfg, length)
    for _ in range(iterations):
        rebuilt = stft(x, cfg)
        rebuilt = rebuilt[:magnitude.shape[0]]
        phase = np.angle(rebuilt)
        x = _istft(magnitude * np.exp(1j * phase), cfg, length)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite samples from mel inversion")
    return x
