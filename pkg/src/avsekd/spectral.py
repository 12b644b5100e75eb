"""Complex STFT analysis/synthesis and complex ratio masking.

Frames start at sample 0 (no centre padding), so a waveform of ``n`` samples
gives ``1 + (n - win_length) // hop_length`` frames. Synthesis is a
least-squares overlap-add: every inverse frame is re-windowed and the sum is
divided by the accumulated squared-window envelope, which reconstructs the
interior exactly even though a 512/196 Hann pair is not COLA.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import get_window

ENVELOPE_FLOOR = 1e-8


@dataclass(frozen=True)
class SpectralConfig:
    sample_rate: int = 16000
    win_length: int = 512
    hop_length: int = 196
    fft_size: int = 512
    window: str = "hann"

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not 0 < self.hop_length <= self.win_length <= self.fft_size:
            raise ValueError(
                "need 0 < hop_length <= win_length <= fft_size, got "
                f"hop={self.hop_length} win={self.win_length} fft={self.fft_size}"
            )

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.win_length:
            return 0
        return 1 + (n_samples - self.win_length) // self.hop_length

    def n_samples(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop_length + self.win_length

    def analysis_window(self) -> np.ndarray:
        # periodic Hann (DFT-even), as in scipy/librosa defaults
        return get_window(self.window, self.win_length, fftbins=True).astype(np.float64)


@dataclass
class ComplexSpectrogram:
    """One-sided complex spectrogram stored as real/imag ``F x T`` grids."""

    real: np.ndarray
    imag: np.ndarray
    config: SpectralConfig = field(default_factory=SpectralConfig)

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ValueError(f"real {self.real.shape} and imag {self.imag.shape} differ")
        if self.real.ndim != 2 or self.real.shape[0] != self.config.n_bins:
            raise ValueError(
                f"expected {self.config.n_bins} x T grids, got {self.real.shape}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.real.shape

    @property
    def n_frames(self) -> int:
        return self.real.shape[1]

    def as_complex(self) -> np.ndarray:
        return self.real + 1j * self.imag

    def stacked(self) -> np.ndarray:
        """The ``2 x F x T`` network input layout."""
        return np.stack([self.real, self.imag])

    @classmethod
    def from_complex(cls, values: np.ndarray, config: SpectralConfig) -> "ComplexSpectrogram":
        return cls(np.ascontiguousarray(values.real), np.ascontiguousarray(values.imag), config)

    def frames(self, start: int, stop: int) -> "ComplexSpectrogram":
        return ComplexSpectrogram(self.real[:, start:stop], self.imag[:, start:stop], self.config)


@dataclass
class ComplexMask:
    real: np.ndarray
    imag: np.ndarray
    bound: float = 1.0

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ValueError(f"real {self.real.shape} and imag {self.imag.shape} differ")
        if not self.bound > 0:
            raise ValueError(f"mask bound must be positive, got {self.bound}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.real.shape

    def stacked(self) -> np.ndarray:
        return np.stack([self.real, self.imag])


def frame_signal(waveform: np.ndarray, win_length: int, hop_length: int) -> np.ndarray:
    n_frames = 1 + (len(waveform) - win_length) // hop_length
    return np.lib.stride_tricks.sliding_window_view(waveform, win_length)[
        :: hop_length
    ][:n_frames]


def stft(waveform, config: SpectralConfig | None = None) -> ComplexSpectrogram:
    config = config or SpectralConfig()
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a mono waveform, got shape {x.shape}")
    if len(x) < config.win_length:
        raise ValueError(
            f"waveform has {len(x)} samples, shorter than one window ({config.win_length})"
        )
    if not np.all(np.isfinite(x)):
        raise ValueError("waveform contains non-finite samples")
    frames = frame_signal(x, config.win_length, config.hop_length) * config.analysis_window()
    spec = np.fft.rfft(frames, n=config.fft_size, axis=1).T
    return ComplexSpectrogram.from_complex(spec, config)


def istft(spec: ComplexSpectrogram) -> np.ndarray:
    config = spec.config
    win = config.analysis_window()
    n_frames = spec.n_frames
    frames = np.fft.irfft(spec.as_complex().T, n=config.fft_size, axis=1)
    frames = frames[:, : config.win_length] * win

    length = config.n_samples(n_frames)
    out = np.zeros(length)
    envelope = np.zeros(length)
    hop = config.hop_length
    win_sq = win**2
    for t in range(n_frames):
        out[t * hop : t * hop + config.win_length] += frames[t]
        envelope[t * hop : t * hop + config.win_length] += win_sq
    covered = envelope >= ENVELOPE_FLOOR
    out[covered] /= envelope[covered]
    out[~covered] = 0.0
    return out


def complex_multiply(a_re, a_im, b_re, b_im):
    """Bin-wise complex product on split real/imag grids.

    Only uses ``*``, ``+`` and ``-`` so it works unchanged on numpy arrays
    and torch tensors; the network head calls this to apply its mask.
    """
    return a_re * b_re - a_im * b_im, a_re * b_im + a_im * b_re


def _check_same_shape(a, b, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: dimension mismatch {a.shape} vs {b.shape}")


def apply_mask(noisy: ComplexSpectrogram, mask: ComplexMask) -> ComplexSpectrogram:
    _check_same_shape(noisy.real, mask.real, "apply_mask")
    re, im = complex_multiply(mask.real, mask.imag, noisy.real, noisy.imag)
    return ComplexSpectrogram(re, im, noisy.config)


def ideal_complex_mask(
    clean: ComplexSpectrogram,
    noisy: ComplexSpectrogram,
    epsilon: float = 1e-8,
    bound: float = 1.0,
) -> ComplexMask:
    """Clipped complex ratio mask ``S conj(Y) / (|Y|^2 + eps)``.

    ``bound=np.inf`` disables clipping.
    """
    _check_same_shape(clean.real, noisy.real, "ideal_complex_mask")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    denom = noisy.real**2 + noisy.imag**2 + epsilon
    # S * conj(Y)
    re, im = complex_multiply(clean.real, clean.imag, noisy.real, -noisy.imag)
    re = np.clip(re / denom, -bound, bound)
    im = np.clip(im / denom, -bound, bound)
    return ComplexMask(re, im, bound)
