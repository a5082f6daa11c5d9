"""Differentiable STFT/ISTFT, magnitude extraction and mask application.

Spectrograms are stored as separate real and imaginary channel tensors so
everything stays on the real-valued autodiff tape. Analysis and synthesis
both use a periodic Hann window; the inverse divides by the accumulated
squared-window envelope, which makes the round trip exact (to float64
rounding) for any config where the hop divides the FFT size and is at most
half of it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import Tensor

DEFAULT_FFT_SIZE = 4096
DEFAULT_HOP_SIZE = 1024

# desk-scale preset used throughout the tests
TEST_FFT_SIZE = 512
TEST_HOP_SIZE = 128


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = DEFAULT_FFT_SIZE
    hop_size: int = DEFAULT_HOP_SIZE
    center: bool = True

    def __post_init__(self):
        n, h = self.fft_size, self.hop_size
        if n <= 0 or (n & (n - 1)) != 0:
            raise ValueError(f"fft_size must be a power of two, got {n}")
        if h <= 0 or n % h != 0 or h > n // 2:
            raise ValueError(f"hop_size must divide fft_size and be <= fft_size/2, got {h} for {n}")

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1

    def num_frames(self, num_samples: int) -> int:
        if self.center:
            return num_samples // self.hop_size + 1
        if num_samples < self.fft_size:
            raise ValueError(
                f"waveform of {num_samples} samples is shorter than one {self.fft_size}-sample frame"
            )
        return (num_samples - self.fft_size) // self.hop_size + 1

    def max_istft_len(self, n_frames: int) -> int:
        pad = self.fft_size // 2 if self.center else 0
        return (n_frames - 1) * self.hop_size + self.fft_size - 2 * pad + self.hop_size


@dataclass
class Waveform:
    """Mono time-domain signal."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class ComplexSpectrogram:
    """Framed frequency representation: (frames, bins) real and imaginary parts."""

    real: Tensor
    imag: Tensor
    config: StftConfig

    def __post_init__(self):
        if not isinstance(self.real, Tensor):
            self.real = Tensor(np.asarray(self.real, dtype=np.float64))
        if not isinstance(self.imag, Tensor):
            self.imag = Tensor(np.asarray(self.imag, dtype=np.float64))
        if self.real.shape != self.imag.shape:
            raise ValueError("real/imag shape mismatch")
        if self.real.ndim != 2 or self.real.shape[1] != self.config.num_bins:
            raise ValueError(
                f"expected (frames, {self.config.num_bins}) spectrogram, got {self.real.shape}"
            )

    @property
    def shape(self):
        return self.real.shape


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window (the COLA-friendly variant)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Waveform):
        return Tensor(x.samples)
    return Tensor(np.asarray(x, dtype=np.float64))


def stft(w, cfg: StftConfig) -> ComplexSpectrogram:
    """Forward STFT. Accepts a Waveform, numpy array or tape tensor."""
    x = _as_tensor(w)
    if x.ndim != 1:
        raise ValueError("stft expects a 1-D signal")
    n_samples = x.shape[0]
    if n_samples == 0:
        raise ValueError("stft of empty waveform")
    n, h = cfg.fft_size, cfg.hop_size
    t_frames = cfg.num_frames(n_samples)
    if cfg.center:
        x = tt.pad1d(x, n // 2, n // 2)
    frames = tt.frame(x, n, h, t_frames)
    windowed = tt.mul(frames, hann_window(n))
    packed = tt.rfft_ri(windowed)
    f = cfg.num_bins
    return ComplexSpectrogram(tt.col_slice(packed, 0, f), tt.col_slice(packed, f, 2 * f), cfg)


def _synthesis_envelope(cfg: StftConfig, n_frames: int) -> np.ndarray:
    n, h = cfg.fft_size, cfg.hop_size
    win_sq = hann_window(n) ** 2
    env = np.zeros((n_frames - 1) * h + n)
    for t in range(n_frames):
        env[t * h:t * h + n] += win_sq
    inv = np.zeros_like(env)
    nz = env > 1e-12
    inv[nz] = 1.0 / env[nz]
    return inv


def istft(s: ComplexSpectrogram, cfg: StftConfig, out_len: int) -> Tensor:
    """Inverse STFT via windowed overlap-add; linear, hence differentiable.

    Returns a 1-D tensor of out_len samples (zero-padded past OLA coverage).
    """
    if s.config.fft_size != cfg.fft_size or s.config.hop_size != cfg.hop_size:
        raise ValueError("spectrogram was produced with a different config")
    n, h = cfg.fft_size, cfg.hop_size
    t_frames = s.shape[0]
    max_len = cfg.max_istft_len(t_frames)
    if out_len > max_len or out_len <= 0:
        raise ValueError(
            f"out_len {out_len} inconsistent with {t_frames} frames (max {max_len})"
        )
    packed = tt.col_concat(s.real, s.imag)
    frames_t = tt.irfft_ri(packed, n)
    windowed = tt.mul(frames_t, hann_window(n))
    ola = tt.overlap_add(windowed, h)
    normed = tt.mul(ola, _synthesis_envelope(cfg, t_frames))
    pad = n // 2 if cfg.center else 0
    avail = normed.shape[0] - pad
    take = min(out_len, avail)
    out = tt.slice1d(normed, pad, pad + take)
    if take < out_len:
        out = tt.pad1d(out, 0, out_len - take)
    return out



def istft_waveform(s: ComplexSpectrogram, cfg: StftConfig, out_len: int, sample_rate: int) -> Waveform:
    """Constant-path ISTFT straight to a Waveform."""
    return Waveform(istft(s, cfg, out_len).data, sample_rate)


def apply_mask(mask, spec: ComplexSpectrogram) -> ComplexSpectrogram:
    """Elementwise complex scaling by a real nonnegative mask."""
    m = _as_tensor(mask)
    if m.shape != spec.shape:
        raise ValueError(f"mask shape {m.shape} does not match spectrogram {spec.shape}")
    return ComplexSpectrogram(tt.mul(m, spec.real), tt.mul(m, spec.imag), spec.config)


def magnitude(spec: ComplexSpectrogram) -> Tensor:
    """Per-bin magnitude; the gradient at exact zeros is defined as 0."""
    return tt.hypot(spec.real, spec.imag)
