"""WAV and CSV interchange.

WAVs are 16-bit PCM or 32-bit float, multi-channel interleaved. Reads
return (channels, samples) float32 in [-1, 1] scaling for PCM; writes
default to float32 so simulated datasets round-trip bit-exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .dsp import Waveform


def read_wav(path, expect_rate: int | None = 16000) -> Waveform:
    rate, data = wavfile.read(Path(path))
    if expect_rate is not None and rate != expect_rate:
        raise ValueError(f"{path}: sample rate {rate}, expected {expect_rate}")
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float32) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        data = data.astype(np.float32)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    if data.ndim == 1:
        data = data[None, :]
    else:
        data = data.T  # interleaved -> (channels, samples)
    return Waveform(data, rate)


def write_wav(path, wave, sample_rate: int = 16000, pcm16: bool = False):
    data = wave.data if isinstance(wave, Waveform) else np.atleast_2d(np.asarray(wave))
    rate = wave.sample_rate if isinstance(wave, Waveform) else sample_rate
    out = data.T if data.shape[0] > 1 else data.ravel()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if pcm16:
        clipped = np.clip(out, -1.0, 32767.0 / 32768.0)
        wavfile.write(path, rate, (clipped * 32768.0).astype(np.int16))
    else:
        wavfile.write(path, rate, out.astype(np.float32))


def write_matrix_csv(path, matrix: np.ndarray, frame_major: bool = True):
    """Dump a (height, frames) panel as CSV, one frame per row by default."""
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if frame_major:
        m = m.T
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, m, delimiter=",", fmt="%.8g")


def write_spectrogram_csv(path, spec: np.ndarray, kind: str = "magnitude"):
    """Export a complex (bins, frames) spectrogram, frame-major rows."""
    if kind == "magnitude":
        write_matrix_csv(path, np.abs(spec))
    elif kind == "power_db":
        write_matrix_csv(path, 10.0 * np.log10(np.abs(spec) ** 2 + 1e-12))
    else:
        raise ValueError(f"unknown spectrogram dump kind {kind!r}")
