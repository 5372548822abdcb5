"""Three-channel MFCC features for one-second audio segments.

Pipeline per frame: Hamming window -> zero-pad to the FFT size -> power
spectrum (magnitude-squared DFT, one-sided bins 0..fft_size/2) -> HTK-mel
triangular filterbank with unit peaks -> log(x + 1e-10) -> orthonormal
DCT-II, keeping the leading coefficients. First- and second-order
regression deltas form channels 2 and 3 of the resulting "image".

All spectral math runs in float64; the radix-2 FFT here is cross-checked
against a naive DFT in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .exceptions import DimensionError, InputError, NumericError

LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class MfccConfig:
    sample_rate: int = 16000
    frame_length: int = 400   # 25 ms at 16 kHz
    hop: int = 160            # 10 ms
    fft_size: int = 512
    mel_bins: int = 40
    mfcc_coeffs: int = 20
    delta_window: int = 2

    def __post_init__(self):
        if self.frame_length > self.fft_size:
            raise InputError("frame_length must not exceed fft_size")
        if self.mfcc_coeffs > self.mel_bins:
            raise InputError("mfcc_coeffs must not exceed mel_bins")
        if self.hop < 1:
            raise InputError("hop must be >= 1")
        if self.fft_size < 2 or self.fft_size & (self.fft_size - 1):
            raise InputError("fft_size must be a power of two")
        if self.delta_window < 1:
            raise InputError("delta_window must be >= 1")

    def frames_per_second(self) -> int:
        return num_frames(self.sample_rate, self.frame_length, self.hop)


def num_frames(n_samples: int, frame_length: int, hop: int) -> int:
    return (n_samples - frame_length) // hop + 1


def bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


def fft_radix2(frames: np.ndarray) -> np.ndarray:
    """Iterative decimation-in-time FFT along the last axis (power of two)."""
    n = frames.shape[-1]
    if n < 1 or n & (n - 1):
        raise InputError(f"FFT length must be a power of two, got {n}")
    a = frames[..., bit_reverse_indices(n)].astype(np.complex128)
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / size)
        view = a.reshape(a.shape[:-1] + (n // size, size))
        upper = view[..., :half].copy()
        lower = view[..., half:] * twiddle
        view[..., :half] = upper + lower
        view[..., half:] = upper - lower
        size *= 2
    return a


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MfccConfig) -> np.ndarray:
    """Triangular unit-peak filters on the HTK mel scale, (mel_bins, fft_size//2+1)."""
    n_bins = cfg.fft_size // 2 + 1
    mel_points = np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2.0), cfg.mel_bins + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.arange(n_bins) * cfg.sample_rate / cfg.fft_size
    bank = np.zeros((cfg.mel_bins, n_bins))
    for j in range(cfg.mel_bins):
        left, center, right = hz_points[j], hz_points[j + 1], hz_points[j + 2]
        rising = (bin_freqs - left) / (center - left)
        falling = (right - bin_freqs) / (right - center)
        bank[j] = np.maximum(0.0, np.minimum(rising, falling))
    return bank


def dct_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Orthonormal DCT-II rows: D @ D.T == I for n_out == n_in."""
    k = np.arange(n_out)[:, None]
    m = np.arange(n_in)[None, :]
    d = np.cos(np.pi * (2 * m + 1) * k / (2 * n_in))
    d *= np.sqrt(2.0 / n_in)
    d[0] *= np.sqrt(0.5)
    return d


def hamming_window(n: int) -> np.ndarray:
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(n) / (n - 1))


def frame_signal(signal: np.ndarray, frame_length: int, hop: int) -> np.ndarray:
    n = num_frames(signal.shape[0], frame_length, hop)
    starts = np.arange(n) * hop
    return signal[starts[:, None] + np.arange(frame_length)[None, :]]


def mel_log_energies(signal, cfg: MfccConfig) -> np.ndarray:
    """Log filterbank energies, (frames, mel_bins); the pre-DCT stage."""
    x = np.asarray(signal, dtype=np.float64).reshape(-1)
    if x.shape[0] < cfg.frame_length:
        raise InputError(
            f"signal of {x.shape[0]} samples is shorter than one frame ({cfg.frame_length})"
        )
    if not np.all(np.isfinite(x)):
        raise NumericError("audio signal contains non-finite samples")
    frames = frame_signal(x, cfg.frame_length, cfg.hop) * hamming_window(cfg.frame_length)
    padded = np.zeros((frames.shape[0], cfg.fft_size))
    padded[:, : cfg.frame_length] = frames
    spectrum = fft_radix2(padded)[:, : cfg.fft_size // 2 + 1]
    power = spectrum.real**2 + spectrum.imag**2
    return np.log(power @ mel_filterbank(cfg).T + LOG_FLOOR)


def compute_mfcc(signal, cfg: MfccConfig | None = None, dtype=np.float64) -> Tensor:
    """MFCCs of a mono signal, (frames, mfcc_coeffs)."""
    cfg = cfg or MfccConfig()
    log_mel = mel_log_energies(signal, cfg)
    coeffs = log_mel @ dct_matrix(cfg.mfcc_coeffs, cfg.mel_bins).T
    return Tensor(coeffs, dtype=dtype)


def compute_deltas(coeffs: Tensor, window: int = 2) -> Tensor:
    """Regression deltas d_t = sum_n n*(c_{t+n} - c_{t-n}) / (2 sum_n n^2).

    Boundary frames are replicated so the output shape equals the input.
    """
    c = coeffs.data
    if c.ndim != 2:
        raise DimensionError(f"expected (frames, coeffs), got {c.shape}")
    n_frames = c.shape[0]
    if n_frames < 2 * window + 1:
        raise InputError(f"need at least {2 * window + 1} frames, got {n_frames}")
    padded = np.pad(c, ((window, window), (0, 0)), mode="edge")
    denom = 2.0 * sum(n * n for n in range(1, window + 1))
    out = np.zeros_like(c)
    for n in range(1, window + 1):
        out += n * (padded[window + n : window + n + n_frames] - padded[window - n : window - n + n_frames])
    return Tensor(out / denom, dtype=c.dtype)


@dataclass
class MfccImage:
    """Channels (MFCC, delta, delta-delta) stacked as a (3, frames, coeffs) grid."""

    data: Tensor

    def __post_init__(self):
        if self.data.shape[0] != 3 or len(self.data.shape) != 3:
            raise DimensionError(f"expected (3, frames, coeffs), got {self.data.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def unstack(self) -> tuple[Tensor, Tensor, Tensor]:
        d = self.data.data
        return (
            Tensor(d[0].copy(), dtype=d.dtype),
            Tensor(d[1].copy(), dtype=d.dtype),
            Tensor(d[2].copy(), dtype=d.dtype),
        )


def stack_mfcc_image(c: Tensor, d1: Tensor, d2: Tensor) -> MfccImage:
    if not (c.shape == d1.shape == d2.shape):
        raise DimensionError(
            f"channel shapes differ: {c.shape}, {d1.shape}, {d2.shape}"
        )
    return MfccImage(Tensor(np.stack([c.data, d1.data, d2.data], axis=0), dtype=c.data.dtype))


def mfcc_image_from_signal(signal, cfg: MfccConfig | None = None, dtype=np.float32) -> MfccImage:
    """Full audio front end: signal -> stacked (MFCC, delta, delta-delta) image."""
    cfg = cfg or MfccConfig()
    c = compute_mfcc(signal, cfg, dtype=np.float64)
    d1 = compute_deltas(c, cfg.delta_window)
    d2 = compute_deltas(d1, cfg.delta_window)
    image = np.stack([c.data, d1.data, d2.data], axis=0).astype(dtype)
    return MfccImage(Tensor(image))
