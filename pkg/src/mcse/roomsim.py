"""Synthetic data generation: shoebox image-source RIRs, augmentation,
and 8-channel mixture synthesis with aligned training targets.

Rooms are sampled small/medium/large at 2:3:3 (widths/lengths in
[3,5)/[5,7)/[7,8] m); clean and noise sources are convolved with their
simulated multi-channel responses and mixed at a requested SNR measured
between the reverberant components at channel 1. Built-in speech-shaped
and stationary-noise generators make the whole pipeline runnable with no
external corpora. Everything is reproducible from the recorded seeds.

Augmentation covers speed (sample-rate resampling, pitch shifts with it)
and volume (scalar gain). Tempo (pitch-preserving stretch) is not
implemented; its configured share is redirected to speed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve, resample_poly

from .dsp import Waveform
from .spatial import ArrayGeometry, default_positions
from .wavio import read_wav, write_wav

SIZE_CLASSES = ("small", "medium", "large")
SIZE_RANGES = {"small": (3.0, 5.0), "medium": (5.0, 7.0), "large": (7.0, 8.0)}
SIZE_WEIGHTS = (2.0, 3.0, 3.0)

SPEED_RANGE = (0.9, 1.1)
VOLUME_RANGE = (0.25, 4.0)

_SINC_HALF = 40  # 81-tap Hann-windowed sinc fractional delays


def classify_room(width: float, length: float) -> str:
    for name, (lo, hi) in SIZE_RANGES.items():
        edge = hi if name == "large" else np.nextafter(hi, 0)
        if lo <= width <= edge and lo <= length <= edge:
            return name
    raise ValueError(f"room {width:.2f}x{length:.2f} m outside the supported ranges")


@dataclass
class RoomSpec:
    width: float
    length: float
    height: float
    absorption: tuple  # six surfaces: x0, x1, y0, y1, floor, ceiling

    def __post_init__(self):
        if np.isscalar(self.absorption):
            self.absorption = (float(self.absorption),) * 6
        self.absorption = tuple(float(a) for a in self.absorption)
        if len(self.absorption) != 6 or not all(0.0 <= a <= 1.0 for a in self.absorption):
            raise ValueError(f"absorption must be six values in [0,1], got {self.absorption}")

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.width, self.length, self.height])

    @property
    def size_class(self) -> str:
        return classify_room(self.width, self.length)


@dataclass
class SceneSpec:
    room: RoomSpec
    mic_positions: np.ndarray  # (C, 3) absolute positions inside the room
    source_position: np.ndarray
    noise_position: np.ndarray
    snr_db: float
    seed: tuple
    max_order: int = 8

    def __post_init__(self):
        self.mic_positions = np.asarray(self.mic_positions, dtype=np.float64)
        self.source_position = np.asarray(self.source_position, dtype=np.float64)
        self.noise_position = np.asarray(self.noise_position, dtype=np.float64)
        dims = self.room.dims
        for p in (*self.mic_positions, self.source_position, self.noise_position):
            if np.any(p <= 0) or np.any(p >= dims):
                raise ValueError(f"position {p} is not strictly inside the room {dims}")


@dataclass
class TrainingExample:
    mixture: Waveform
    target: Waveform
    reverberant_clean: np.ndarray
    scaled_noise: np.ndarray
    metadata: dict
    clean_lps_targets: np.ndarray | None = None


# ---------------------------------------------------------------------------
# image-source room impulse responses
# ---------------------------------------------------------------------------


def image_source_rir(room: RoomSpec, src: np.ndarray, mic: np.ndarray, max_order: int,
                     sample_rate: int, speed_of_sound: float = 343.0) -> np.ndarray:
    """Shoebox RIR: attenuated fractional-delay taps of all image sources
    with total reflection count <= max_order."""
    src = np.asarray(src, dtype=np.float64)
    mic = np.asarray(mic, dtype=np.float64)
    if np.allclose(src, mic):
        raise ValueError("source and microphone positions coincide")
    dims = room.dims
    beta = np.sqrt(1.0 - np.asarray(room.absorption)).reshape(3, 2)

    half = (max_order + 1) // 2 + 1
    rng_n = np.arange(-half, half + 1)
    positions = []
    refl_products = []
    orders = []
    for p in range(8):
        px, py, pz = (p >> 2) & 1, (p >> 1) & 1, p & 1
        pv = np.array([px, py, pz])
        base = (1 - 2 * pv) * src  # reflected source coordinate per axis
        nx, ny, nz = np.meshgrid(rng_n, rng_n, rng_n, indexing="ij")
        n = np.stack([nx, ny, nz], axis=-1).reshape(-1, 3)
        refl_counts_lo = np.abs(n - pv)  # wall at coordinate 0
        refl_counts_hi = np.abs(n)  # wall at coordinate L
        order = (refl_counts_lo + refl_counts_hi).sum(axis=1)
        keep = order <= max_order
        n = n[keep]
        positions.append(base[None, :] + 2.0 * n * dims[None, :])
        prod = np.prod(
            beta[:, 0][None, :] ** refl_counts_lo[keep] * beta[:, 1][None, :] ** refl_counts_hi[keep],
            axis=1,
        )
        refl_products.append(prod)
        orders.append(order[keep])
    positions = np.concatenate(positions)
    refl_products = np.concatenate(refl_products)

    dist = np.linalg.norm(positions - mic[None, :], axis=1)
    amps = refl_products / (4.0 * np.pi * dist)
    delays = dist / speed_of_sound * sample_rate

    length = int(np.ceil(delays.max())) + 2 * _SINC_HALF + 2
    taps = np.arange(-_SINC_HALF, _SINC_HALF + 1)
    centers = np.floor(delays).astype(np.int64)
    frac = delays - centers
    # Hann-windowed sinc around each fractional delay
    arg = taps[None, :] - frac[:, None]
    window = 0.5 + 0.5 * np.cos(np.pi * arg / (_SINC_HALF + 1))
    window[np.abs(arg) > _SINC_HALF + 1] = 0.0
    kernel = amps[:, None] * np.sinc(arg) * window
    idx = centers[:, None] + taps[None, :] + _SINC_HALF
    rir = np.bincount(idx.ravel(), weights=kernel.ravel(), minlength=length + _SINC_HALF)
    return rir[_SINC_HALF:]  # acausal pre-ring of the interpolator is trimmed


def rir_for_array(room: RoomSpec, src: np.ndarray, mics: np.ndarray, max_order: int,
                  sample_rate: int) -> np.ndarray:
    rirs = [image_source_rir(room, src, m, max_order, sample_rate) for m in mics]
    length = max(len(r) for r in rirs)
    return np.stack([np.pad(r, (0, length - len(r))) for r in rirs])


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def augment(clean: np.ndarray, kind: str, factor: float) -> np.ndarray:
    """Speed (resampling) or volume (gain) perturbation of a mono signal."""
    x = np.asarray(clean, dtype=np.float64)
    if kind == "volume":
        lo, hi = VOLUME_RANGE
        if not lo <= factor <= hi:
            raise ValueError(f"volume factor {factor} outside [{lo}, {hi}]")
        return x * factor
    if kind == "speed":
        lo, hi = SPEED_RANGE
        if not lo <= factor <= hi:
            raise ValueError(f"speed factor {factor} outside [{lo}, {hi}]")
        if factor == 1.0:
            return x.copy()
        ratio = Fraction(factor).limit_denominator(100)
        return resample_poly(x, ratio.denominator, ratio.numerator)
    if kind == "tempo":
        raise NotImplementedError(
            "tempo (pitch-preserving stretch) is not implemented; its share is "
            "redirected to speed perturbation"
        )
    raise ValueError(f"unknown augmentation kind {kind!r}")


def fix_length(x: np.ndarray, num_samples: int) -> np.ndarray:
    """Truncate or repeat-pad to exactly num_samples."""
    if len(x) >= num_samples:
        return x[:num_samples]
    reps = int(np.ceil(num_samples / len(x)))
    return np.tile(x, reps)[:num_samples]


# ---------------------------------------------------------------------------
# synthetic sources (stand-ins for external corpora)
# ---------------------------------------------------------------------------


def speech_shaped_source(rng: np.random.Generator, num_samples: int,
                         sample_rate: int = 16000) -> np.ndarray:
    """Filtered noise with slow amplitude modulation; enough spectral and
    temporal structure for the intelligibility metrics to react to."""
    white = rng.standard_normal(num_samples)
    spec = np.fft.rfft(white)
    f = np.fft.rfftfreq(num_samples, d=1.0 / sample_rate)
    shape = np.ones_like(f)
    knee = 500.0
    above = f > knee
    shape[above] = (knee / f[above]) ** 1.2
    shape[f < 80.0] *= 0.1
    x = np.fft.irfft(spec * shape, n=num_samples)

    t = np.arange(num_samples) / sample_rate
    env = np.ones(num_samples)
    for _ in range(3):
        fm = rng.uniform(1.5, 7.0)
        ph = rng.uniform(0, 2 * np.pi)
        env *= 0.55 + 0.45 * np.cos(2 * np.pi * fm * t + ph)
    env = np.maximum(env, 0.05)
    x *= env
    return x / (np.sqrt(np.mean(x**2)) + 1e-12) * 0.05


def stationary_noise(rng: np.random.Generator, num_samples: int,
                     sample_rate: int = 16000) -> np.ndarray:
    """Spectrally tilted stationary noise."""
    white = rng.standard_normal(num_samples)
    spec = np.fft.rfft(white)
    f = np.fft.rfftfreq(num_samples, d=1.0 / sample_rate)
    shape = 1.0 / np.sqrt(1.0 + (f / 1000.0) ** 2)
    x = np.fft.irfft(spec * shape, n=num_samples)
    return x / (np.sqrt(np.mean(x**2)) + 1e-12) * 0.05


# ---------------------------------------------------------------------------
# scene synthesis
# ---------------------------------------------------------------------------


def simulate_example(clean: np.ndarray, noise: np.ndarray, scene: SceneSpec,
                     sample_rate: int = 16000, target_policy: str = "direct_path") -> TrainingExample:
    """Convolve clean and noise with their array responses and mix at the
    scene SNR (reverberant powers at channel 1)."""
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if not np.any(clean):
        raise ValueError("clean source is silent")
    S = len(clean)
    noise = fix_length(noise, S)

    rir_c = rir_for_array(scene.room, scene.source_position, scene.mic_positions,
                          scene.max_order, sample_rate)
    rev_clean = np.stack([fftconvolve(clean, r)[:S] for r in rir_c])
    if np.any(noise):
        rir_n = rir_for_array(scene.room, scene.noise_position, scene.mic_positions,
                              scene.max_order, sample_rate)
        rev_noise = np.stack([fftconvolve(noise, r)[:S] for r in rir_n])
        p_c = np.mean(rev_clean[0] ** 2)
        p_n = np.mean(rev_noise[0] ** 2)
        gain = np.sqrt(p_c / (p_n * 10.0 ** (scene.snr_db / 10.0)))
        scaled_noise = gain * rev_noise
    else:
        # silent noise degenerates to the noise-free mixture
        gain = 0.0
        scaled_noise = np.zeros_like(rev_clean)
    mixture = rev_clean + scaled_noise

    if target_policy == "direct_path":
        direct = image_source_rir(scene.room, scene.source_position, scene.mic_positions[0],
                                  max_order=0, sample_rate=sample_rate)
        target = fftconvolve(clean, direct)[:S]
    elif target_policy == "reverberant_clean":
        target = rev_clean[0]
    elif target_policy == "source":
        target = clean
    else:
        raise ValueError(f"unknown target policy {target_policy!r}")

    meta = {
        "snr_db": scene.snr_db,
        "room": {"width": scene.room.width, "length": scene.room.length,
                 "height": scene.room.height, "absorption": list(scene.room.absorption)},
        "room_class": scene.room.size_class,
        "seed": list(scene.seed),
        "target_policy": target_policy,
        "max_order": scene.max_order,
        "noise_gain": float(gain),
    }
    return TrainingExample(
        mixture=Waveform(mixture.astype(np.float32), sample_rate),
        target=Waveform(target.astype(np.float32)[None, :], sample_rate),
        reverberant_clean=rev_clean,
        scaled_noise=scaled_noise,
        metadata=meta,
    )


# ---------------------------------------------------------------------------
# dataset recipe
# ---------------------------------------------------------------------------


@dataclass
class DatasetRecipe:
    train_count: int = 100
    dev_count: int = 20
    seed: int = 0
    train_seconds: float = 2.0
    dev_seconds: float = 6.0  # dev utterances are fixed to this length
    sample_rate: int = 16000
    snr_range: tuple = (-5.0, 10.0)
    absorption_range: tuple = (0.2, 0.8)
    height_range: tuple = (2.5, 4.0)
    max_order: int = 8
    target_policy: str = "direct_path"
    # share of each augmentation kind; tempo's share is redirected to speed
    augmentation_shares: dict = field(default_factory=lambda: {"speed": 1, "tempo": 2, "volume": 3})
    augment_train: bool = True
    mic_layout: np.ndarray = field(default_factory=default_positions)
    clean_pool: tuple = ()  # wav paths; empty -> synthetic speech-shaped
    noise_pool: tuple = ()


def _effective_shares(shares: dict) -> tuple:
    speed = shares.get("speed", 0) + shares.get("tempo", 0)
    kinds = [("speed", speed), ("volume", shares.get("volume", 0))]
    kinds = [(k, s) for k, s in kinds if s > 0]
    total = sum(s for _, s in kinds)
    return tuple((k, s / total) for k, s in kinds)


def _sample_scene(recipe: DatasetRecipe, rng: np.random.Generator, seed) -> SceneSpec:
    cls = SIZE_CLASSES[rng.choice(3, p=np.array(SIZE_WEIGHTS) / sum(SIZE_WEIGHTS))]
    lo, hi = SIZE_RANGES[cls]
    width = rng.uniform(lo, hi)
    length = rng.uniform(lo, hi)
    height = rng.uniform(*recipe.height_range)
    absorption = rng.uniform(*recipe.absorption_range, size=6)
    room = RoomSpec(width, length, height, tuple(absorption))

    layout = np.asarray(recipe.mic_layout, dtype=np.float64)
    aperture = layout[:, 0].max() - layout[:, 0].min()
    margin = 0.3
    for _ in range(200):
        yaw = rng.uniform(0, 2 * np.pi)
        rot = np.array([[np.cos(yaw), -np.sin(yaw), 0],
                        [np.sin(yaw), np.cos(yaw), 0],
                        [0, 0, 1]])
        origin = np.array([
            rng.uniform(margin + aperture, width - margin - aperture),
            rng.uniform(margin + aperture, length - margin - aperture),
            rng.uniform(1.0, min(1.8, height - margin)),
        ])
        mics = origin + layout @ rot.T
        if np.all(mics > margin) and np.all(mics < room.dims - margin):
            break
    else:
        raise RuntimeError(f"could not place the array in a {width:.1f}x{length:.1f} room")

    def place(min_dist):
        for _ in range(200):
            pos = np.array([
                rng.uniform(margin, width - margin),
                rng.uniform(margin, length - margin),
                rng.uniform(0.5, height - margin),
            ])
            if np.linalg.norm(pos - origin) >= min_dist:
                return pos
        raise RuntimeError("could not place a source away from the array")

    src = place(0.5)
    noise = place(0.5)
    snr = rng.uniform(*recipe.snr_range)
    return SceneSpec(room, mics, src, noise, snr, seed, recipe.max_order)


def _draw_source(pool, rng, num_samples, sample_rate, synth_fn):
    if pool:
        wav = read_wav(pool[rng.integers(len(pool))], expect_rate=sample_rate)
        return fix_length(wav.data[0].astype(np.float64), num_samples)
    return synth_fn(rng, num_samples, sample_rate)


def build_example(recipe: DatasetRecipe, index: int, split: str) -> TrainingExample:
    """One deterministic example; (recipe.seed, split, index) fixes everything."""
    seed = (recipe.seed, 0 if split == "train" else 1, index)
    rng = np.random.default_rng(seed)
    scene = _sample_scene(recipe, rng, seed)
    seconds = recipe.train_seconds if split == "train" else recipe.dev_seconds
    num_samples = int(round(seconds * recipe.sample_rate))

    clean = _draw_source(recipe.clean_pool, rng, num_samples, recipe.sample_rate,
                         speech_shaped_source)
    aug_record = None
    if split == "train" and recipe.augment_train:
        kinds, probs = zip(*[(k, p) for k, p in _effective_shares(recipe.augmentation_shares)])
        kind = kinds[rng.choice(len(kinds), p=np.array(probs))]
        factor = rng.uniform(*(SPEED_RANGE if kind == "speed" else (0.5, 2.0)))
        clean = fix_length(augment(clean, kind, factor), num_samples)
        aug_record = {"kind": kind, "factor": float(factor)}
    else:
        clean = fix_length(clean, num_samples)

    noise = _draw_source(recipe.noise_pool, rng, num_samples, recipe.sample_rate,
                         stationary_noise)
    example = simulate_example(clean, noise, scene, recipe.sample_rate, recipe.target_policy)
    example.metadata.update({"split": split, "index": index, "augmentation": aug_record})
    return example


def make_dataset(recipe: DatasetRecipe, out_dir) -> Path:
    """Write WAVs and a line-delimited manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "mix").mkdir(parents=True, exist_ok=True)
    (out_dir / "target").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for split, count in (("train", recipe.train_count), ("dev", recipe.dev_count)):
            for i in range(count):
                ex = build_example(recipe, i, split)
                utt_id = f"{split}_{i:05d}"
                mix_path = out_dir / "mix" / f"{utt_id}.wav"
                tgt_path = out_dir / "target" / f"{utt_id}.wav"
                write_wav(mix_path, ex.mixture)
                write_wav(tgt_path, ex.target)
                record = {
                    "utt_id": utt_id,
                    "split": split,
                    "mix": str(mix_path.relative_to(out_dir)),
                    "target": str(tgt_path.relative_to(out_dir)),
                    "num_samples": ex.mixture.num_samples,
                    **ex.metadata,
                }
                fh.write(json.dumps(record) + "\n")
    return manifest


def iterate_manifest(manifest_path, split: str | None = None):
    root = Path(manifest_path).parent
    with open(manifest_path) as fh:
        for line in fh:
            rec = json.loads(line)
            if split is None or rec["split"] == split:
                rec["mix_abs"] = root / rec["mix"]
                rec["target_abs"] = root / rec["target"]
                yield rec


def load_example(record) -> tuple[str, Waveform, Waveform]:
    return (
        record["utt_id"],
        read_wav(record["mix_abs"]),
        read_wav(record["target_abs"]),
    )


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
