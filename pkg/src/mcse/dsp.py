"""Framing, STFT/iSTFT with weighted overlap-add, and log-power spectra.

Conventions (shared by the whole toolkit):
  * no centering or reflection padding: frame i covers samples
    [i*hop, i*hop + win_len), so num_frames = (S - win_len)//hop + 1;
  * periodic Hann analysis window, one-sided spectra of fft_len/2 + 1 bins;
  * synthesis re-applies the window and divides by the summed squared
    window (floored), which is exact on the interior for 50% overlap.

Spectrograms are (bins, frames) complex arrays; feature maps are
(panels, height, frames).

Two implementations of the same transforms live here: a plain numpy one
(feature extraction, reconstruction) and a tape-recorded one used where
gradients must flow through the synthesis/analysis chain. They agree to
float roundoff and are tested against each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn

DEFAULT_EPS = 1e-12
_WSUM_FLOOR = 1e-10


@dataclass(frozen=True)
class FrameParams:
    """Analysis/synthesis framing configuration.

    Defaults: 20 ms periodic Hann at 16 kHz, 10 ms hop, 512-point FFT
    (257 bins).
    """

    sample_rate: int = 16000
    win_len: int = 320
    hop: int = 160
    fft_len: int = 512

    def __post_init__(self):
        if self.hop * 2 != self.win_len:
            raise ValueError(f"hop must be win_len/2, got hop={self.hop}, win_len={self.win_len}")
        if self.win_len > self.fft_len:
            raise ValueError(f"win_len {self.win_len} exceeds fft_len {self.fft_len}")
        if self.fft_len & (self.fft_len - 1):
            raise ValueError(f"fft_len must be a power of two, got {self.fft_len}")

    @property
    def bins(self) -> int:
        return self.fft_len // 2 + 1

    def num_frames(self, num_samples: int) -> int:
        if num_samples < self.win_len:
            raise ValueError(
                f"signal of {num_samples} samples is shorter than one window ({self.win_len})"
            )
        return (num_samples - self.win_len) // self.hop + 1


@dataclass
class Waveform:
    """(channels, samples) float audio at a fixed rate."""

    data: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data))
        if self.data.ndim != 2:
            raise ValueError(f"waveform must be (channels, samples), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def num_samples(self) -> int:
        return self.data.shape[1]

    def channel(self, c: int) -> np.ndarray:
        return self.data[c]


def hann_window(length: int, dtype=np.float64) -> np.ndarray:
    """Periodic Hann (zero at n=0 only), COLA at 50% overlap."""
    n = np.arange(length, dtype=dtype)
    return (0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)).astype(dtype)


def _as_mono(wave) -> np.ndarray:
    if isinstance(wave, Waveform):
        if wave.channels != 1:
            raise ValueError(f"expected a single-channel waveform, got {wave.channels} channels")
        return wave.data[0]
    arr = np.asarray(wave)
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-D signal, got shape {arr.shape}")
    return arr


def frame_signal(x: np.ndarray, p: FrameParams) -> np.ndarray:
    """(T, win_len) frame matrix; rejects signals shorter than one window."""
    T = p.num_frames(x.shape[0])
    idx = np.arange(T)[:, None] * p.hop + np.arange(p.win_len)[None, :]
    return x[idx]


def stft(wave, p: FrameParams) -> np.ndarray:
    """One-sided STFT of a mono signal -> (bins, frames) complex."""
    x = _as_mono(wave)
    if not np.all(np.isfinite(x)):
        raise ValueError("input signal contains non-finite samples")
    frames = frame_signal(x, p) * hann_window(p.win_len, x.dtype)
    return np.fft.rfft(frames, n=p.fft_len, axis=1).T


def _window_sum(p: FrameParams, num_frames: int, length: int, dtype) -> np.ndarray:
    w2 = hann_window(p.win_len, dtype) ** 2
    acc = np.zeros(length, dtype=dtype)
    for i in range(num_frames):
        acc[i * p.hop : i * p.hop + p.win_len] += w2
    return np.maximum(acc, _WSUM_FLOOR)


def istft(spec: np.ndarray, p: FrameParams, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of `stft`.

    `length` trims (or zero-extends) to the original sample count; the
    default is the natural span (T-1)*hop + win_len.
    """
    spec = np.asarray(spec)
    if spec.shape[0] != p.bins:
        raise ValueError(f"expected {p.bins} bins for fft_len {p.fft_len}, got {spec.shape[0]}")
    T = spec.shape[1]
    frames = np.fft.irfft(spec.T, n=p.fft_len, axis=1)[:, : p.win_len]
    win = hann_window(p.win_len, frames.dtype)
    natural = (T - 1) * p.hop + p.win_len
    y = np.zeros(natural, dtype=frames.dtype)
    fw = frames * win
    for i in range(T):
        y[i * p.hop : i * p.hop + p.win_len] += fw[i]
    y /= _window_sum(p, T, natural, frames.dtype)
    if length is None:
        return y
    if length <= natural:
        return y[:length]
    return np.pad(y, (0, length - natural))


def lps(spec: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Log power spectra as a 1-panel feature map: ln(max(|X|^2, eps))."""
    if eps <= 0:
        raise ValueError(f"lps floor must be positive, got {eps}")
    power = (spec.real * spec.real + spec.imag * spec.imag).astype(np.result_type(spec.real, np.float32))
    return np.log(np.maximum(power, eps))[None, :, :]


# ---------------------------------------------------------------------------
# differentiable path: the same transforms recorded on the tape
# ---------------------------------------------------------------------------

_dft_cache: dict[tuple, tuple] = {}


def _dft_mats(p: FrameParams, dtype):
    """Real matrices implementing the one-sided DFT pair on windowed frames."""
    key = (p.fft_len, np.dtype(dtype).str)
    hit = _dft_cache.get(key)
    if hit is not None:
        return hit
    N, F = p.fft_len, p.bins
    n = np.arange(N)
    k = np.arange(F)
    ang = 2.0 * np.pi * np.outer(k, n) / N
    cos_m = np.cos(ang).astype(dtype)  # (F, N): Re X = C @ x
    sin_m = (-np.sin(ang)).astype(dtype)  # (F, N): Im X = S @ x
    scale = np.full((F, 1), 2.0 / N, dtype=dtype)
    scale[0] = scale[-1] = 1.0 / N
    inv_cos = (np.cos(ang) * scale).astype(dtype)  # (F, N): x = Re^T... applied as X @ inv
    inv_sin = (-np.sin(ang) * scale).astype(dtype)
    entry = (cos_m, sin_m, inv_cos, inv_sin)
    _dft_cache[key] = entry
    return entry


def stft_graph(x: nn.Tensor, p: FrameParams) -> tuple[nn.Tensor, nn.Tensor]:
    """Differentiable STFT of a 1-D signal tensor -> (real, imag), each (F, T)."""
    dtype = x.dtype
    cos_m, sin_m, _, _ = _dft_mats(p, dtype)
    win = nn.constant(hann_window(p.win_len, dtype))
    frames = nn.unfold_frames(x, p.win_len, p.hop) * win  # (T, L)
    re = nn.matmul(nn.constant(cos_m[:, : p.win_len]), nn.transpose(frames))
    im = nn.matmul(nn.constant(sin_m[:, : p.win_len]), nn.transpose(frames))
    return re, im


def istft_graph(re: nn.Tensor, im: nn.Tensor, p: FrameParams, length: int) -> nn.Tensor:
    """Differentiable weighted overlap-add; output trimmed/padded to `length`."""
    F, T = re.shape
    if F != p.bins:
        raise ValueError(f"expected {p.bins} bins for fft_len {p.fft_len}, got {F}")
    dtype = re.dtype
    _, _, inv_cos, inv_sin = _dft_mats(p, dtype)
    # frames (T, win_len) = inverse one-sided transform of each column
    frames = nn.matmul(nn.transpose(re), nn.constant(inv_cos[:, : p.win_len])) + nn.matmul(
        nn.transpose(im), nn.constant(inv_sin[:, : p.win_len])
    )
    win = nn.constant(hann_window(p.win_len, dtype))
    natural = (T - 1) * p.hop + p.win_len
    y = nn.overlap_add(frames * win, p.hop, max(natural, length))
    norm = np.ones(max(natural, length), dtype=dtype)
    norm[:natural] = 1.0 / _window_sum(p, T, natural, dtype)
    y = y * nn.constant(norm)
    return y[:length]


def lps_graph(re: nn.Tensor, im: nn.Tensor, eps: float = DEFAULT_EPS) -> nn.Tensor:
    """Differentiable ln(max(|X|^2, eps)) from split real/imag planes."""
    power = nn.square(re) + nn.square(im)
    return nn.log(nn.maximum(power, eps))
