"""Two-stage 2-D convolutional time-frequency feature fusion.

Stage 1 runs two branches over an 8-channel waveform:

  * time domain: a multi-channel convolution sum (one learnable filter
    bank applied across all channels and summed) and inter-channel
    convolution differences (a shared filter bank applied to both
    channels of each pair, subtracted with a learnable elementwise
    weight), fused by the first conv block;
  * frequency domain: log-power spectra of every channel plus of seven
    fixed superdirective beams, fused by the second conv block.

Stage 2 concatenates both branch outputs on the panel axis and applies a
third conv block. Every conv block is conv + ReLU + batch norm, with the
frame axis causally zero-padded and the height axis unpadded, which pins
the published 257 -> 127 -> 125 height chain.

The time-domain layers share the STFT's window length and hop, so all
branches produce identical frame counts by construction.

Ablation variants (single-channel LPS + phase differences, multi-channel
LPS only, etc.) are wired by `build_variant`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .dsp import FrameParams, Waveform, lps, stft
from .spatial import ArrayGeometry, ipd, paper_directions, sdbf_apply, sdbf_weights

VARIANTS = ("B1-features", "B2", "M1", "M2", "M3", "M4", "M5", "Proposed")


@dataclass(frozen=True)
class FusionSpec:
    in_panels: int
    out_panels: int
    kernel: tuple = (5, 3)
    stride: tuple = (2, 1)


@dataclass
class FrontendConfig:
    """Feature/fusion wiring; defaults reproduce the full-scale setup."""

    channels: int = 8
    num_filters: int = 257  # time-domain filter count; equals the bin count
    filter_len: int = 320  # equals the analysis window
    icd_pairs: tuple = ((0, 4), (1, 5), (2, 6), (3, 7))
    icd_dilation: int = 4
    sdbf_directions: int = 7
    sdbf_subset: tuple = (0, 1)
    sdbf_loading: float = 1e-3
    lps_floor: float = 1e-12
    fusion1: FusionSpec = field(default_factory=lambda: FusionSpec(5, 8))
    fusion2: FusionSpec = field(default_factory=lambda: FusionSpec(15, 8))
    fusion3: FusionSpec = field(default_factory=lambda: FusionSpec(16, 8, (3, 3), (1, 1)))
    factorized_icd: bool = True  # unconstrained 2-row kernels when False

    def __post_init__(self):
        if self.fusion1.in_panels != 1 + len(self.icd_pairs):
            raise ValueError("fusion1 input panels must be 1 + number of pairs")
        if self.fusion2.in_panels != self.channels + self.sdbf_directions:
            raise ValueError("fusion2 input panels must be channels + beam directions")
        if self.fusion3.in_panels != self.fusion1.out_panels + self.fusion2.out_panels:
            raise ValueError("fusion3 input panels must be the two stage-1 outputs")
        for m1, m2 in self.icd_pairs:
            if m2 - m1 != self.icd_dilation:
                raise ValueError(
                    f"pair ({m1},{m2}) offset must equal the dilation {self.icd_dilation}"
                )
            if not (0 <= m1 < self.channels and 0 <= m2 < self.channels):
                raise ValueError(f"pair ({m1},{m2}) out of range for {self.channels} channels")

    @classmethod
    def desk_scale(cls, bins: int = 129, channels: int = 8, out_panels: int = 8):
        """Shrunk wiring for tests/experiments; bins must match the FFT."""
        return cls(
            channels=channels,
            num_filters=bins,
            filter_len=0,  # resolved against FrameParams at build time
            fusion1=FusionSpec(5, out_panels),
            fusion2=FusionSpec(channels + 7, out_panels),
            fusion3=FusionSpec(2 * out_panels, out_panels, (3, 3), (1, 1)),
        )


def conv_out_len(size: int, kernel: int, stride: int, pad: int = 0, dilation: int = 1) -> int:
    return (size + pad - dilation * (kernel - 1) - 1) // stride + 1


class McsLayer(nn.Module):
    """Filter-and-sum over channels: one (C x L) kernel per output row.

    Realized as a 2-D convolution over the channel-by-time plane with
    time stride L/2, so the frame axis matches the STFT exactly.
    No bias (the defining formula has none).
    """

    def __init__(self, channels, num_filters, filter_len, hop, rng, dtype=np.float32):
        super().__init__()
        fan_in = channels * filter_len
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = nn.Parameter(
            rng.uniform(-bound, bound, size=(num_filters, 1, channels, filter_len)).astype(dtype)
        )
        self.hop = hop

    def forward(self, wave: nn.Tensor) -> nn.Tensor:
        C, S = wave.shape
        if C != self.weight.shape[2]:
            raise ValueError(
                f"channel mismatch: got {C} channels, filters span {self.weight.shape[2]}"
            )
        x = nn.reshape(wave, (1, C, S))
        out = nn.conv2d(x, self.weight, stride=(1, self.hop))  # (N, 1, T)
        return nn.transpose(out, (1, 0, 2))  # 1 panel x N x T

    __call__ = forward


class IcdLayer(nn.Module):
    """Pairwise convolution differences via one height-dilated 2-D conv.

    The kernel has two rows landing on channels m and m+dilation: row one
    is the shared filter (fixed unit elementwise weight), row two is the
    negated filter scaled elementwise by a learnable weight initialized
    at ones. Identical paired channels therefore cancel exactly at init.
    """

    def __init__(self, config: FrontendConfig, filter_len, hop, rng, dtype=np.float32):
        super().__init__()
        N = config.num_filters
        bound = 1.0 / np.sqrt(2 * filter_len)
        self.kprime = nn.Parameter(rng.uniform(-bound, bound, size=(N, filter_len)).astype(dtype))
        self.omega2 = nn.Parameter(np.ones(filter_len, dtype=dtype))
        self.omega1 = np.ones(filter_len, dtype=dtype)  # frozen at ones
        if not config.factorized_icd:
            self.row2 = nn.Parameter(rng.uniform(-bound, bound, size=(N, filter_len)).astype(dtype))
        self.pairs = config.icd_pairs
        self.dilation = config.icd_dilation
        self.hop = hop
        self.factorized = config.factorized_icd

    def forward(self, wave: nn.Tensor) -> nn.Tensor:
        C, S = wave.shape
        N, L = self.kprime.shape
        x = nn.reshape(wave, (1, C, S))
        row1 = nn.reshape(self.kprime * nn.constant(self.omega1), (N, 1, 1, L))
        if self.factorized:
            row2 = nn.reshape(self.kprime * self.omega2, (N, 1, 1, L)) * -1.0
        else:
            row2 = nn.reshape(self.row2, (N, 1, 1, L)) * -1.0
        kernel = nn.concat([row1, row2], axis=2)  # (N, 1, 2, L)
        out = nn.conv2d(x, kernel, stride=(1, self.hop), dilation=(self.dilation, 1))
        # rows of `out` correspond to pair start channels 0..C-dilation-1
        starts = [m1 for m1, _ in self.pairs]
        out = nn.transpose(out, (1, 0, 2))  # (C-dil, N, T)
        if starts != list(range(out.shape[0])):
            out = nn.concat([out[s : s + 1] for s in starts], axis=0)
        return out

    __call__ = forward


class FusionBlock(nn.Module):
    """Conv2d + ReLU + batch norm; causal on frames, unpadded on height."""

    def __init__(self, spec: FusionSpec, rng, dtype=np.float32, bias=True):
        super().__init__()
        kh, kw = spec.kernel
        self.conv = nn.Conv2d(
            spec.in_panels,
            spec.out_panels,
            (kh, kw),
            stride=spec.stride,
            pad=((0, 0), (kw - 1, 0)),
            bias=bias,
            rng=rng,
            dtype=dtype,
        )
        self.norm = nn.BatchNorm(spec.out_panels, dtype=dtype)

    def forward(self, x: nn.Tensor) -> nn.Tensor:
        return self.norm(nn.relu(self.conv(x)))

    __call__ = forward


@dataclass
class FrontendOutput:
    features: nn.Tensor  # (panels, height, frames)
    flattened_dim: int

    def flat(self) -> nn.Tensor:
        P, H, T = self.features.shape
        return nn.reshape(self.features, (P * H, T))  # panel-major


class FusionFrontend(nn.Module):
    """Full two-stage fusion (the M5/Proposed wiring)."""

    def __init__(self, config: FrontendConfig, frame_params: FrameParams,
                 geometry: ArrayGeometry, rng, dtype=np.float32):
        super().__init__()
        filter_len = config.filter_len or frame_params.win_len
        if filter_len != frame_params.win_len:
            raise ValueError(
                f"time-domain filter length {filter_len} must equal the window "
                f"{frame_params.win_len} to keep branch frame counts aligned"
            )
        if config.num_filters != frame_params.bins:
            raise ValueError(
                f"num_filters {config.num_filters} must equal the bin count "
                f"{frame_params.bins} so stage-1 branch heights match"
            )
        self.config = config
        self.frame_params = frame_params
        self.geometry = geometry
        self.dtype = dtype
        self.mcs = McsLayer(config.channels, config.num_filters, filter_len,
                            frame_params.hop, rng, dtype)
        self.icd = IcdLayer(config, filter_len, frame_params.hop, rng, dtype)
        self.fusion1 = FusionBlock(config.fusion1, rng, dtype)
        self.fusion2 = FusionBlock(config.fusion2, rng, dtype)
        self.fusion3 = FusionBlock(config.fusion3, rng, dtype)
        self.beams = [
            sdbf_weights(geometry, theta, frame_params,
                         loading=config.sdbf_loading, mic_subset=config.sdbf_subset)
            for theta in paper_directions(config.sdbf_directions)
        ]
        h1 = conv_out_len(config.num_filters, *self._kx(config.fusion1))
        h3 = conv_out_len(h1, *self._kx(config.fusion3))
        self.heights = (h1, h3)
        self.flattened_dim = config.fusion3.out_panels * h3

    @staticmethod
    def _kx(spec: FusionSpec):
        return spec.kernel[0], spec.stride[0]

    def freq_stack(self, specs: np.ndarray) -> np.ndarray:
        """(C + directions, bins, frames) panel stack of log-power spectra."""
        panels = [lps(specs[c], self.config.lps_floor) for c in range(specs.shape[0])]
        panels += [lps(sdbf_apply(w, specs), self.config.lps_floor) for w in self.beams]
        return np.concatenate(panels, axis=0).astype(self.dtype)

    def forward(self, wave, capture: dict | None = None) -> FrontendOutput:
        data = wave.data if isinstance(wave, Waveform) else np.asarray(wave)
        if data.shape[0] != self.config.channels:
            raise ValueError(f"expected {self.config.channels} channels, got {data.shape[0]}")
        data = data.astype(self.dtype, copy=False)
        wave_t = nn.constant(data)
        specs = np.stack([stft(data[c], self.frame_params) for c in range(data.shape[0])])

        mcs_out = self.mcs(wave_t)
        icd_out = self.icd(wave_t)
        time_feats = nn.concat([mcs_out, icd_out], axis=0)
        freq_feats = nn.constant(self.freq_stack(specs))
        f1 = self.fusion1(time_feats)
        f2 = self.fusion2(freq_feats)
        fused = self.fusion3(nn.concat([f1, f2], axis=0))
        if capture is not None:
            capture.update(
                mcs=mcs_out.data, icd=icd_out.data, freq_stack=freq_feats.data,
                fusion1=f1.data, fusion2=f2.data, fusion3=fused.data,
            )
        return FrontendOutput(fused, self.flattened_dim)

    __call__ = forward


class PanelStackFrontend(nn.Module):
    """Baseline wirings: a fixed feature panel stack, optionally one conv
    fusion block, flattened for the backbone (the M1-M4/B1/B2 family)."""

    def __init__(self, variant: str, config: FrontendConfig, frame_params: FrameParams,
                 geometry: ArrayGeometry, rng, dtype=np.float32):
        super().__init__()
        self.variant = variant
        self.config = config
        self.frame_params = frame_params
        self.geometry = geometry
        self.dtype = dtype
        F = frame_params.bins
        n_pairs = len(config.icd_pairs)
        self.uses_time_branch = variant == "B2"
        self.beams = []
        if variant in ("M4",):
            self.beams = [
                sdbf_weights(geometry, theta, frame_params,
                             loading=config.sdbf_loading, mic_subset=config.sdbf_subset)
                for theta in paper_directions(config.sdbf_directions)
            ]
        panels = {
            "B1-features": 2 + n_pairs,  # ch1 complex planes + phase differences
            "B2": 2 + 2 * n_pairs,  # ch1 lps, ipds, mcs, icds
            "M1": 1 + n_pairs,
            "M2": 1 + n_pairs,
            "M3": config.channels,
            "M4": config.channels + config.sdbf_directions,
        }[variant]
        self.in_panels = panels
        if self.uses_time_branch:
            if config.num_filters != F:
                raise ValueError(
                    f"num_filters {config.num_filters} must equal the bin count {F} "
                    "to stack time-domain panels with spectral panels"
                )
            filter_len = config.filter_len or frame_params.win_len
            self.mcs = McsLayer(config.channels, config.num_filters, filter_len,
                                frame_params.hop, rng, dtype)
            self.icd = IcdLayer(config, filter_len, frame_params.hop, rng, dtype)
        self.fusion = None
        if variant == "M2":
            spec = FusionSpec(panels, config.fusion1.out_panels)
            self.fusion = FusionBlock(spec, rng, dtype)
            h = conv_out_len(F, spec.kernel[0], spec.stride[0])
            self.flattened_dim = spec.out_panels * h
        elif variant in ("M3", "M4"):
            spec = FusionSpec(panels, config.fusion3.out_panels, (3, 3), (1, 1))
            self.fusion = FusionBlock(spec, rng, dtype)
            h = conv_out_len(F, 3, 1)
            self.flattened_dim = spec.out_panels * h
        else:
            self.flattened_dim = panels * F

    def forward(self, wave, capture: dict | None = None) -> FrontendOutput:
        data = wave.data if isinstance(wave, Waveform) else np.asarray(wave)
        if data.shape[0] != self.config.channels:
            raise ValueError(f"expected {self.config.channels} channels, got {data.shape[0]}")
        data = data.astype(self.dtype, copy=False)
        cfg = self.config
        specs = np.stack([stft(data[c], self.frame_params) for c in range(data.shape[0])])
        ipds = [ipd(specs[m1], specs[m2]).astype(self.dtype) for m1, m2 in cfg.icd_pairs]
        v = self.variant
        if v == "B1-features":
            panels = [specs[0].real[None].astype(self.dtype),
                      specs[0].imag[None].astype(self.dtype)] + ipds
        elif v in ("M1", "M2", "B2"):
            panels = [lps(specs[0], cfg.lps_floor).astype(self.dtype)] + ipds
        elif v == "M3":
            panels = [lps(specs[c], cfg.lps_floor).astype(self.dtype) for c in range(cfg.channels)]
        elif v == "M4":
            panels = [lps(specs[c], cfg.lps_floor).astype(self.dtype) for c in range(cfg.channels)]
            panels += [lps(sdbf_apply(w, specs), cfg.lps_floor).astype(self.dtype)
                       for w in self.beams]
        stack = nn.constant(np.concatenate(panels, axis=0))
        if self.uses_time_branch:
            wave_t = nn.constant(data)
            stack = nn.concat([stack, self.mcs(wave_t), self.icd(wave_t)], axis=0)
        out = self.fusion(stack) if self.fusion is not None else stack
        if capture is not None:
            capture.update(stack=stack.data, fused=out.data)
        P, H, T = out.shape
        return FrontendOutput(out, P * H)

    __call__ = forward


def build_variant(variant: str, config: FrontendConfig, frame_params: FrameParams,
                  geometry: ArrayGeometry, rng, dtype=np.float32) -> nn.Module:
    """Construct the feature/fusion wiring for one published configuration.

    "M5" and "Proposed" share the two-stage frontend; the acoustic-model
    branch is attached (or not) by the model builder on top.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    if variant in ("M5", "Proposed"):
        return FusionFrontend(config, frame_params, geometry, rng, dtype)
    return PanelStackFrontend(variant, config, frame_params, geometry, rng, dtype)
