"""Built-in verification suites behind `mcse selftest`.

Small, self-contained versions of the properties the full test suite
pins down: analysis/synthesis round trip, beamformer distortionless
constraint, pairwise-difference layer equivalence, block-synchronous
degeneracy, and (unless --fast) a finite-difference gradient check of a
tiny composed model.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .am import TdnnConfig, TdnnAcousticModel, am_loss_graph, make_proxy_targets, lps_of_wave, train_codebook
from .dsp import FrameParams, istft, stft
from .frontend import FrontendConfig
from .metrics import enhancement_loss
from .spatial import ArrayGeometry, paper_directions, sdbf_weights, steering_vector
from .tcn import TcnConfig, build_model
from .training import BmufConfig, BmufState, bmuf_round, grad_check


def _tiny_frame() -> FrameParams:
    return FrameParams(sample_rate=16000, win_len=32, hop=16, fft_len=32)


def _tiny_model(beta_classes=8, dtype=np.float64):
    frame = _tiny_frame()
    fe_cfg = FrontendConfig.desk_scale(bins=frame.bins, out_panels=4)
    tcn_cfg = TcnConfig(input_dim=0, bottleneck=8, hidden=16, kernel=3,
                        blocks_per_repeat=2, repeats=1)
    model = build_model("Proposed", fe_cfg, tcn_cfg, frame, ArrayGeometry(), seed=3,
                        dtype=dtype)
    am_cfg = TdnnConfig(input_dim=frame.bins, num_blocks=2, io_dim=12, mid_dim=6,
                        num_classes=beta_classes)
    am = TdnnAcousticModel(am_cfg, rng=np.random.default_rng(5), dtype=dtype)
    am.freeze()
    am.eval()
    return model, am, frame


def check_stft_roundtrip() -> bool:
    rng = np.random.default_rng(0)
    p = FrameParams()
    for _ in range(20):
        n = int(rng.integers(16000, 32000))
        x = rng.standard_normal(n)
        y = istft(stft(x, p), p, length=n)
        if np.abs(y[p.win_len : n - p.win_len] - x[p.win_len : n - p.win_len]).max() > 1e-6:
            return False
    return True


def check_sdbf_distortionless() -> bool:
    geom = ArrayGeometry()
    p = FrameParams()
    for theta in paper_directions():
        w = sdbf_weights(geom, theta, p)
        for k in range(p.bins):
            f = k * p.sample_rate / p.fft_len
            d = steering_vector(geom, theta, f, mic_subset=(0, 1))
            if abs(np.conj(d) @ w.weights[k] - 1.0) > 1e-10:
                return False
    return True


def check_icd_equivalence() -> bool:
    from .frontend import IcdLayer

    frame = _tiny_frame()
    cfg = FrontendConfig.desk_scale(bins=frame.bins, out_panels=4)
    rng = np.random.default_rng(1)
    layer = IcdLayer(cfg, frame.win_len, frame.hop, rng, dtype=np.float64)
    layer.kprime.data = rng.standard_normal(layer.kprime.shape)
    layer.omega2.data = rng.standard_normal(layer.omega2.shape)
    wave = rng.standard_normal((8, 400))
    out = layer(nn.constant(wave)).data
    L, hop = frame.win_len, frame.hop
    T = (400 - L) // hop + 1
    for pi, (m1, m2) in enumerate(cfg.icd_pairs):
        for n in range(cfg.num_filters):
            k = layer.kprime.data[n]
            for t in range(T):
                seg1 = wave[m1, t * hop : t * hop + L]
                seg2 = wave[m2, t * hop : t * hop + L]
                ref = (seg1 * k).sum() - (layer.omega2.data * (seg2 * k)).sum()
                if abs(out[pi, n, t] - ref) > 1e-10:
                    return False
    return True


def check_bmuf_degenerate() -> bool:
    # hand recursion: eta=0.5, zeta=1, unit deltas -> filtered 1, 1.5; drift 2.5
    state = BmufState([np.zeros(1)], BmufConfig(block_momentum=0.5))
    bmuf_round([[np.array([1.0])]], state)
    bmuf_round([[state.global_params[0] + 1.0]], state)
    if not (np.isclose(state.filtered[0][0], 1.5) and np.isclose(state.global_params[0][0], 2.5)):
        return False
    # degenerate setting telescopes bit-exactly
    rng = np.random.default_rng(2)
    w = rng.standard_normal(16).astype(np.float32)
    state = BmufState([w], BmufConfig(workers=1, block_momentum=0.0, block_lr=1.0))
    current = w.copy()
    for _ in range(5):
        current = current + rng.standard_normal(16).astype(np.float32) * 0.1
        bmuf_round([[current.copy()]], state)
        if not np.array_equal(state.global_params[0], current):
            return False
    return True


def check_gradients() -> bool:
    model, am, frame = _tiny_model()
    rng = np.random.default_rng(7)
    wave = rng.standard_normal((8, 12 * frame.hop + frame.win_len))
    target = rng.standard_normal(wave.shape[1]) * 0.1
    codebook = train_codebook(rng.standard_normal((32, frame.bins)), 8, seed=0)
    labels = make_proxy_targets(lps_of_wave(target, frame), codebook)

    def loss_fn():
        out = model.forward_graph(wave)
        return enhancement_loss(out["est"], target) + am_loss_graph(
            out["est"], labels, am, frame
        )

    report = grad_check(model, loss_fn, h=1e-6, samples_per_tensor=20, seed=0)
    return report["error"] <= 1e-4


def run_selftest(fast: bool = False) -> list[tuple[str, bool]]:
    suites = [
        ("stft-roundtrip", check_stft_roundtrip),
        ("sdbf-distortionless", check_sdbf_distortionless),
        ("icd-equivalence", check_icd_equivalence),
        ("bmuf-degenerate", check_bmuf_degenerate),
    ]
    if not fast:
        suites.append(("gradient-check", check_gradients))
    results = []
    for name, fn in suites:
        try:
            results.append((name, bool(fn())))
        except Exception:
            results.append((name, False))
    return results
