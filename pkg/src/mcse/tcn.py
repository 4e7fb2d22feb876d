"""Causal temporal-convolutional mask network and the full enhance chain.

The backbone is the dilated residual separation stack: repeats of blocks
(pointwise conv, PReLU, cumulative layer norm, depthwise dilated causal
conv, PReLU, cumulative layer norm, then residual and skip pointwise
convs) whose skip sum feeds a pointwise head emitting a complex
time-frequency mask (real and imaginary planes, unbounded by default).
The mask multiplies the raw first-channel spectrum and weighted
overlap-add synthesis returns a waveform of the input length.

Everything is causal: block dilations pad the past side only and the
normalization is cumulative, so output frame t never reads input frames
beyond t.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .dsp import FrameParams, Waveform, istft, istft_graph, stft
from .frontend import FrontendConfig, FrontendOutput, build_variant
from .spatial import ArrayGeometry


@dataclass
class TcnConfig:
    """Backbone dimensions. Full scale follows the published best setup
    (128/512 channels, kernel 3, 8 blocks, 3 repeats); the desk profile
    is small enough for CPU tests."""

    input_dim: int = 1000
    bottleneck: int = 128
    hidden: int = 512
    kernel: int = 3
    blocks_per_repeat: int = 8
    repeats: int = 3
    mask_tanh: bool = False

    @classmethod
    def desk_scale(cls, input_dim: int, bottleneck=16, hidden=32, blocks_per_repeat=4, repeats=2):
        return cls(input_dim, bottleneck, hidden, 3, blocks_per_repeat, repeats)

    def receptive_field(self) -> int:
        """Past-only context in frames."""
        per_repeat = (self.kernel - 1) * (2**self.blocks_per_repeat - 1)
        return 1 + self.repeats * per_repeat


@dataclass
class ComplexMask:
    real: np.ndarray
    imag: np.ndarray


class TcnBlock(nn.Module):
    def __init__(self, cfg: TcnConfig, dilation: int, rng, dtype=np.float32):
        super().__init__()
        B, H, P = cfg.bottleneck, cfg.hidden, cfg.kernel
        self.expand = nn.Conv1d(B, H, rng=rng, dtype=dtype)
        self.act1 = nn.PReLU(dtype=dtype)
        self.norm1 = nn.CumulativeLayerNorm(H, dtype=dtype)
        self.dconv = nn.DepthwiseConv1d(H, P, dilation=dilation,
                                        pad=((P - 1) * dilation, 0), rng=rng, dtype=dtype)
        self.act2 = nn.PReLU(dtype=dtype)
        self.norm2 = nn.CumulativeLayerNorm(H, dtype=dtype)
        self.res = nn.Conv1d(H, B, rng=rng, dtype=dtype)
        self.skip = nn.Conv1d(H, B, rng=rng, dtype=dtype)

    def forward(self, x: nn.Tensor):
        h = self.norm1(self.act1(self.expand(x)))
        h = self.norm2(self.act2(self.dconv(h)))
        return x + self.res(h), self.skip(h)

    __call__ = forward


class TcnMaskNet(nn.Module):
    """(input_dim, T) features -> complex mask planes (2, bins, T)."""

    def __init__(self, cfg: TcnConfig, num_bins: int, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.num_bins = num_bins
        self.in_norm = nn.CumulativeLayerNorm(cfg.input_dim, dtype=dtype)
        self.in_conv = nn.Conv1d(cfg.input_dim, cfg.bottleneck, rng=rng, dtype=dtype)
        self.blocks = nn.ModuleList(
            TcnBlock(cfg, 2**i, rng, dtype)
            for _ in range(cfg.repeats)
            for i in range(cfg.blocks_per_repeat)
        )
        self.out_act = nn.PReLU(dtype=dtype)
        self.out_conv = nn.Conv1d(cfg.bottleneck, 2 * num_bins, rng=rng, dtype=dtype)

    def forward(self, features: nn.Tensor) -> tuple[nn.Tensor, nn.Tensor]:
        D, T = features.shape
        if D != self.cfg.input_dim:
            raise ValueError(f"backbone expects {self.cfg.input_dim}-dim features, got {D}")
        x = self.in_conv(self.in_norm(features))
        skip_sum = None
        for block in self.blocks:
            x, skip = block(x)
            skip_sum = skip if skip_sum is None else skip_sum + skip
        out = self.out_conv(self.out_act(skip_sum))
        if self.cfg.mask_tanh:
            out = nn.tanh(out)
        F = self.num_bins
        return out[:F], out[F:]

    __call__ = forward


def apply_mask_graph(mask_re: nn.Tensor, mask_im: nn.Tensor,
                     spec_re: nn.Tensor, spec_im: nn.Tensor):
    """Elementwise complex product M * X as real-plane arithmetic."""
    if mask_re.shape != spec_re.shape:
        raise ValueError(f"mask shape {mask_re.shape} does not match spectrum {spec_re.shape}")
    out_re = mask_re * spec_re - mask_im * spec_im
    out_im = mask_re * spec_im + mask_im * spec_re
    return out_re, out_im


def apply_mask(mask: ComplexMask, spec: np.ndarray) -> np.ndarray:
    m = mask.real + 1j * mask.imag
    if m.shape != spec.shape:
        raise ValueError(f"mask shape {m.shape} does not match spectrum {spec.shape}")
    return m * spec


class EnhancementModel(nn.Module):
    """Frontend + backbone + mask application + synthesis."""

    def __init__(self, frontend: nn.Module, masknet: TcnMaskNet, frame_params: FrameParams):
        super().__init__()
        self.frontend = frontend
        self.masknet = masknet
        self.frame_params = frame_params

    def mask_for(self, data: np.ndarray) -> tuple[nn.Tensor, nn.Tensor]:
        feats: FrontendOutput = self.frontend(data)
        return self.masknet(feats.flat())

    def forward_graph(self, wave) -> dict:
        """Differentiable chain; returns the estimate plus intermediates."""
        data = wave.data if isinstance(wave, Waveform) else np.asarray(wave)
        dtype = self.masknet.out_conv.weight.dtype
        data = data.astype(dtype, copy=False)
        p = self.frame_params
        mask_re, mask_im = self.mask_for(data)
        spec1 = stft(data[0], p)
        sre = nn.constant(spec1.real.astype(dtype))
        sim = nn.constant(spec1.imag.astype(dtype))
        est_re, est_im = apply_mask_graph(mask_re, mask_im, sre, sim)
        est = istft_graph(est_re, est_im, p, data.shape[1])
        return {"est": est, "mask_re": mask_re, "mask_im": mask_im,
                "spec1": spec1, "est_re": est_re, "est_im": est_im}

    def enhance(self, wave, mask_override: ComplexMask | None = None) -> np.ndarray:
        """Inference path: returns a mono waveform of the input length."""
        data = wave.data if isinstance(wave, Waveform) else np.asarray(wave)
        was_training = self.training
        self.eval()
        try:
            p = self.frame_params
            if mask_override is None:
                with nn.no_grad():
                    mask_re, mask_im = self.mask_for(data)
                mask = ComplexMask(mask_re.data, mask_im.data)
            else:
                mask = mask_override
            spec1 = stft(np.asarray(data[0], dtype=np.float64), p)
            est = apply_mask(mask, spec1)
            return istft(est, p, length=data.shape[1])
        finally:
            self.train(was_training)

    __call__ = forward_graph


def build_model(variant: str, frontend_cfg: FrontendConfig, tcn_cfg: TcnConfig,
                frame_params: FrameParams, geometry: ArrayGeometry, seed: int = 0,
                dtype=np.float32) -> EnhancementModel:
    """Assemble a variant's frontend with a backbone sized to its output.

    The configured backbone input_dim is overridden by the frontend's
    flattened feature dimension (they must agree by construction).
    """
    rng = np.random.default_rng(seed)
    fe = build_variant(variant, frontend_cfg, frame_params, geometry, rng, dtype)
    cfg = replace(tcn_cfg, input_dim=fe.flattened_dim)
    masknet = TcnMaskNet(cfg, frame_params.bins, rng, dtype)
    return EnhancementModel(fe, masknet, frame_params)
