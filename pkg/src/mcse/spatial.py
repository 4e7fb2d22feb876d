"""Fixed (non-learnable) spatial features.

Inter-channel phase differences, diffuse-field coherence, plane-wave
steering vectors, and superdirective beamformer weights under a
distortionless constraint with diagonal loading. Weights are computed
once per configuration and applied as w^H X per frequency bin.

Azimuth is measured from the array axis (+x); theta = pi/2 is broadside.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SPEED_OF_SOUND = 343.0

# Linear 8-mic layout used when a config gives no geometry. The exact
# non-uniform intervals of the reference hardware are not public; these
# spacings (5,4,3,6,3,4,5 cm, 30 cm aperture) keep the paired-microphone
# structure (ch i and ch i+4) at distinct baselines.
DEFAULT_SPACINGS_M = (0.05, 0.04, 0.03, 0.06, 0.03, 0.04, 0.05)


def default_positions() -> np.ndarray:
    x = np.concatenate([[0.0], np.cumsum(DEFAULT_SPACINGS_M)])
    pos = np.zeros((x.size, 3))
    pos[:, 0] = x
    return pos


@dataclass
class ArrayGeometry:
    """Ordered microphone positions (C, 3) in meters."""

    mic_positions: np.ndarray = field(default_factory=default_positions)
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        self.mic_positions = np.atleast_2d(np.asarray(self.mic_positions, dtype=np.float64))
        if self.mic_positions.ndim != 2 or self.mic_positions.shape[1] != 3:
            raise ValueError(f"mic_positions must be (C, 3), got {self.mic_positions.shape}")
        if not np.all(np.isfinite(self.mic_positions)):
            raise ValueError("mic positions must be finite")

    @property
    def num_mics(self) -> int:
        return self.mic_positions.shape[0]

    def pair_distances(self, subset=None) -> np.ndarray:
        pos = self.mic_positions if subset is None else self.mic_positions[list(subset)]
        diff = pos[:, None, :] - pos[None, :, :]
        return np.linalg.norm(diff, axis=-1)


@dataclass(frozen=True)
class BeamformerWeights:
    """Per-bin conjugated-application weights, (bins, mics) complex."""

    weights: np.ndarray
    mic_subset: tuple
    diagonal_loading: float


def ipd(spec_a: np.ndarray, spec_b: np.ndarray) -> np.ndarray:
    """Phase of X_a * conj(X_b), wrapped to (-pi, pi], as a 1-panel map."""
    if spec_a.shape != spec_b.shape:
        raise ValueError(f"spectrogram shapes differ: {spec_a.shape} vs {spec_b.shape}")
    return np.angle(spec_a * np.conj(spec_b))[None, :, :]


def diffuse_coherence(geom: ArrayGeometry, freq_hz: float, mic_subset=None) -> np.ndarray:
    """Spherically isotropic noise coherence: Gamma_ij = sinc(2 f d_ij / c)."""
    if freq_hz < 0:
        raise ValueError(f"frequency must be non-negative, got {freq_hz}")
    if mic_subset is not None and len(mic_subset) == 0:
        raise ValueError("mic_subset must not be empty")
    d = geom.pair_distances(mic_subset)
    return np.sinc(2.0 * freq_hz * d / geom.speed_of_sound)


def steering_vector(geom: ArrayGeometry, azimuth: float, freq_hz: float,
                    reference_mic: int = 0, mic_subset=None) -> np.ndarray:
    """Far-field plane-wave steering vector d_i = exp(-j 2 pi f tau_i).

    tau_i is the arrival delay of mic i relative to the reference mic for
    a source at `azimuth` in the x-y plane (tau_ref = 0).
    """
    pos = geom.mic_positions if mic_subset is None else geom.mic_positions[list(mic_subset)]
    src_dir = np.array([np.cos(azimuth), np.sin(azimuth), 0.0])
    proj = pos @ src_dir
    tau = (proj[reference_mic] - proj) / geom.speed_of_sound
    return np.exp(-2j * np.pi * freq_hz * tau)


def sdbf_weights(geom: ArrayGeometry, azimuth: float, frame_params, loading: float = 1e-3,
                 mic_subset=(0, 1)) -> BeamformerWeights:
    """Superdirective weights per bin: (Gamma + dI)^-1 d / (d^H (Gamma + dI)^-1 d)."""
    if loading <= 0:
        raise ValueError(f"diagonal loading must be positive, got {loading}")
    mic_subset = tuple(mic_subset)
    C = len(mic_subset)
    bins = frame_params.bins
    out = np.empty((bins, C), dtype=np.complex128)
    eye = np.eye(C)
    for k in range(bins):
        f = k * frame_params.sample_rate / frame_params.fft_len
        gamma = diffuse_coherence(geom, f, mic_subset) + loading * eye
        d = steering_vector(geom, azimuth, f, reference_mic=0, mic_subset=mic_subset)
        try:
            num = np.linalg.solve(gamma, d)
        except np.linalg.LinAlgError as exc:
            raise RuntimeError(f"beamformer solve failed at bin {k} (f={f:.1f} Hz): {exc}") from exc
        out[k] = num / (np.conj(d) @ num)
    return BeamformerWeights(out, mic_subset, loading)


def sdbf_apply(w: BeamformerWeights, specs: np.ndarray) -> np.ndarray:
    """Y(t,f) = sum_i conj(w_i(f)) X_i(t,f) over the weight's mic subset.

    `specs` is (channels, bins, frames) for the full array; channels are
    selected by the subset recorded in the weights.
    """
    specs = np.asarray(specs)
    if specs.ndim != 3:
        raise ValueError(f"expected (channels, bins, frames), got {specs.shape}")
    sel = specs[list(w.mic_subset)]
    if w.weights.shape[0] != sel.shape[1]:
        raise ValueError(f"bin mismatch: weights {w.weights.shape[0]}, spec {sel.shape[1]}")
    if w.weights.shape[1] != sel.shape[0]:
        raise ValueError(f"channel mismatch: weights {w.weights.shape[1]}, subset {sel.shape[0]}")
    return np.einsum("fc,cft->ft", np.conj(w.weights), sel)


def paper_directions(count: int = 7) -> np.ndarray:
    """Uniform beamforming grid theta = i*pi/(count+1), i = 1..count."""
    i = np.arange(1, count + 1)
    return i * np.pi / (count + 1)
