"""Training losses and objective evaluation metrics.

SI-SNR follows the projection form (estimate projected onto the
reference; ratio of target to residual energy in dB). The loss flavour
removes means first and clamps to +/-60 dB for stability; both knobs are
exposed because the bare formula is also a published unit check.

STOI/E-STOI follow the standard short-time intelligibility pipeline:
internal resample to 10 kHz, 256-sample Hann frames at 50% overlap,
40 dB silent-frame removal, 512-point FFT, 15 one-third-octave bands
from 150 Hz, 30-frame segments; STOI normalizes and clips each degraded
segment at -15 dB before correlating per band, E-STOI row-and-column
normalizes the segment and skips clipping. Inputs must be 16 kHz (or
already 10 kHz); arbitrary-rate resampling is out of scope.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import resample_poly

from . import nn
from .dsp import Waveform

log = logging.getLogger(__name__)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Waveform) else np.asarray(x)

CLAMP_DB = 60.0

# intelligibility pipeline constants (canonical design at 10 kHz)
_STOI_FS = 10000
_STOI_FRAME = 256
_STOI_HOP = 128
_STOI_NFFT = 512
_STOI_BANDS = 15
_STOI_MIN_FREQ = 150.0
_STOI_SEG = 30
_STOI_BETA_DB = -15.0
_STOI_DYN_RANGE = 40.0
_EPS = np.finfo(np.float64).eps


# ---------------------------------------------------------------------------
# SI-SNR
# ---------------------------------------------------------------------------


def si_snr(est: np.ndarray, ref: np.ndarray, zero_mean: bool = True,
           clamp_db: float | None = CLAMP_DB) -> float:
    """Scale-invariant SNR of `est` against `ref`, in dB.

    clamp_db=None reports the unclamped value (+/-inf at the extremes).
    """
    est = np.asarray(est, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: est {est.shape} vs ref {ref.shape}")
    if not np.any(ref):
        raise ValueError("reference signal is all-zero")
    if zero_mean:
        est = est - est.mean()
        ref = ref - ref.mean()
    target = (est @ ref) / (ref @ ref) * ref
    noise = est - target
    t2 = target @ target
    e2 = noise @ noise
    if t2 == 0.0:
        val = -np.inf
    elif e2 == 0.0:
        val = np.inf
    else:
        val = 10.0 * np.log10(t2 / e2)
    if clamp_db is not None:
        val = float(np.clip(val, -clamp_db, clamp_db))
    return float(val)


def si_snr_graph(est: nn.Tensor, ref: np.ndarray, zero_mean: bool = True,
                 clamp_db: float = CLAMP_DB) -> nn.Tensor:
    """Differentiable SI-SNR; the ratio is clipped pre-log so a perfect
    reconstruction saturates at the clamp with zero gradient."""
    ref = np.asarray(ref, dtype=est.dtype).ravel()
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: est {est.shape} vs ref {ref.shape}")
    if not np.any(ref):
        raise ValueError("reference signal is all-zero")
    if zero_mean:
        ref = ref - ref.mean()
        est = est - nn.tmean(est)
    r = nn.constant(ref)
    rr = float(ref @ ref)
    proj = nn.tsum(est * r) * (1.0 / rr)
    target = proj * r
    noise = est - target
    t2 = nn.tsum(nn.square(target))
    e2 = nn.maximum(nn.tsum(nn.square(noise)), 1e-30)
    ratio = t2 / e2
    lim = 10.0 ** (clamp_db / 10.0)
    ratio = nn.clip(ratio, 1.0 / lim, lim)
    return nn.log(ratio) * (10.0 / np.log(10.0))


def enhancement_loss(est: nn.Tensor, ref: np.ndarray, **kw) -> nn.Tensor:
    """Negated SI-SNR (lower is better)."""
    return si_snr_graph(est, ref, **kw) * -1.0


@dataclass(frozen=True)
class LossWeights:
    """Branch weights of the total objective; the published setting is 1/1."""

    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


def total_loss(l_enh, l_am, w: LossWeights):
    """alpha * l_enh + beta * l_am; works on floats and graph tensors."""
    if isinstance(l_enh, nn.Tensor) or isinstance(l_am, nn.Tensor):
        return nn.add(nn.mul(l_enh, w.alpha), nn.mul(l_am, w.beta))
    return w.alpha * l_enh + w.beta * l_am


# ---------------------------------------------------------------------------
# STOI / E-STOI
# ---------------------------------------------------------------------------


def _to_10k(x: np.ndarray, sample_rate: int) -> np.ndarray:
    if sample_rate == _STOI_FS:
        return np.asarray(x, dtype=np.float64)
    if sample_rate == 16000:
        return resample_poly(np.asarray(x, dtype=np.float64), 5, 8)
    raise ValueError(f"sample rate {sample_rate} unsupported (16 kHz inputs only)")


def _stoi_window() -> np.ndarray:
    return np.hanning(_STOI_FRAME + 2)[1:-1]


def _frame(x: np.ndarray) -> np.ndarray:
    n = (len(x) - _STOI_FRAME) // _STOI_HOP + 1
    if n < 1:
        raise ValueError("signal too short for short-time analysis")
    idx = np.arange(n)[:, None] * _STOI_HOP + np.arange(_STOI_FRAME)[None, :]
    return x[idx]


def _remove_silent_frames(x: np.ndarray, y: np.ndarray):
    """Drop frames whose reference energy is 40 dB under the loudest one,
    then rebuild both signals by overlap-adding the kept windowed frames."""
    w = _stoi_window()
    xf = _frame(x) * w
    yf = _frame(y) * w
    energies = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = energies > energies.max() - _STOI_DYN_RANGE
    if not np.any(keep):
        raise ValueError("reference is entirely silent under the 40 dB mask")
    xf, yf = xf[keep], yf[keep]
    out_len = (len(xf) - 1) * _STOI_HOP + _STOI_FRAME
    xs = np.zeros(out_len)
    ys = np.zeros(out_len)
    for i in range(len(xf)):
        sl = slice(i * _STOI_HOP, i * _STOI_HOP + _STOI_FRAME)
        xs[sl] += xf[i]
        ys[sl] += yf[i]
    return xs, ys


def _third_octave_matrix() -> np.ndarray:
    """(bands, bins) membership matrix with edges snapped to FFT bins."""
    f = np.linspace(0, _STOI_FS, _STOI_NFFT + 1)[: _STOI_NFFT // 2 + 1]
    k = np.arange(_STOI_BANDS, dtype=np.float64)
    lo = _STOI_MIN_FREQ * 2.0 ** ((2 * k - 1) / 6.0)
    hi = _STOI_MIN_FREQ * 2.0 ** ((2 * k + 1) / 6.0)
    obm = np.zeros((_STOI_BANDS, f.size))
    for i in range(_STOI_BANDS):
        lo_bin = int(np.argmin(np.square(f - lo[i])))
        hi_bin = int(np.argmin(np.square(f - hi[i])))
        obm[i, lo_bin:hi_bin] = 1.0
    return obm


def _band_envelopes(x: np.ndarray) -> np.ndarray:
    """(bands, frames) one-third-octave magnitude envelopes."""
    w = _stoi_window()
    spec = np.fft.rfft(_frame(x) * w, n=_STOI_NFFT, axis=1)  # (frames, bins)
    power = (spec.real**2 + spec.imag**2).T
    return np.sqrt(_third_octave_matrix() @ power)


def _segments(env: np.ndarray) -> np.ndarray:
    """(num_segments, bands, SEG) sliding segment stack."""
    n_frames = env.shape[1]
    if n_frames < _STOI_SEG:
        raise ValueError(
            f"need at least {_STOI_SEG} active frames for intelligibility, got {n_frames}"
        )
    m = n_frames - _STOI_SEG + 1
    return np.stack([env[:, i : i + _STOI_SEG] for i in range(m)])


def _prepare(est, ref, sample_rate):
    est = np.asarray(est, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: est {est.shape} vs ref {ref.shape}")
    if not np.any(ref):
        raise ValueError("reference signal is silent")
    x = _to_10k(ref, sample_rate)
    y = _to_10k(est, sample_rate)
    x, y = _remove_silent_frames(x, y)
    return _segments(_band_envelopes(x)), _segments(_band_envelopes(y))


def stoi(est: np.ndarray, ref: np.ndarray, sample_rate: int = 16000) -> float:
    """Short-time objective intelligibility of `est` given clean `ref`."""
    xs, ys = _prepare(est, ref, sample_rate)
    norm = np.linalg.norm(xs, axis=2, keepdims=True) / (
        np.linalg.norm(ys, axis=2, keepdims=True) + _EPS
    )
    y_scaled = ys * norm
    clip_gain = 10.0 ** (-_STOI_BETA_DB / 20.0)
    y_prim = np.minimum(y_scaled, xs * (1.0 + clip_gain))
    xc = xs - xs.mean(axis=2, keepdims=True)
    yc = y_prim - y_prim.mean(axis=2, keepdims=True)
    num = (xc * yc).sum(axis=2)
    den = np.linalg.norm(xc, axis=2) * np.linalg.norm(yc, axis=2) + _EPS
    return float(np.mean(num / den))


def estoi(est: np.ndarray, ref: np.ndarray, sample_rate: int = 16000) -> float:
    """Extended STOI: row- and column-normalized segment correlation,
    no clipping. Not guaranteed to be below (or above) plain STOI."""
    xs, ys = _prepare(est, ref, sample_rate)

    def _doubly_normalize(seg):
        seg = seg - seg.mean(axis=2, keepdims=True)
        seg = seg / (np.linalg.norm(seg, axis=2, keepdims=True) + _EPS)
        seg = seg - seg.mean(axis=1, keepdims=True)
        return seg / (np.linalg.norm(seg, axis=1, keepdims=True) + _EPS)

    xn = _doubly_normalize(xs)
    yn = _doubly_normalize(ys)
    return float(np.mean((xn * yn).sum(axis=1).sum(axis=1) / _STOI_SEG))


# ---------------------------------------------------------------------------
# corpus evaluation
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    """Per-utterance metrics for enhanced output and the noisy reference
    channel, plus the means over utterances that evaluated cleanly."""

    rows: list = field(default_factory=list)
    failures: int = 0

    COLUMNS = (
        "utt_id",
        "si_snr",
        "stoi",
        "estoi",
        "noisy_si_snr",
        "noisy_stoi",
        "noisy_estoi",
        "pesq",
    )

    def add(self, utt_id, **metrics):
        row = {"utt_id": utt_id}
        row.update({k: metrics.get(k) for k in self.COLUMNS[1:]})
        self.rows.append(row)

    def mean(self, column: str) -> float:
        vals = [r[column] for r in self.rows if r.get(column) is not None and np.isfinite(r[column])]
        return float(np.mean(vals)) if vals else float("nan")

    def summary(self) -> dict:
        return {c: self.mean(c) for c in self.COLUMNS[1:]}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)
            mean_row = {"utt_id": "mean", **self.summary()}
            writer.writerow(mean_row)

    def format_table(self) -> str:
        s = self.summary()
        lines = [
            f"{'':>10} {'SI-SNR':>8} {'STOI':>7} {'E-STOI':>7}",
            f"{'noisy':>10} {s['noisy_si_snr']:>8.3f} {s['noisy_stoi']:>7.3f} {s['noisy_estoi']:>7.3f}",
            f"{'enhanced':>10} {s['si_snr']:>8.3f} {s['stoi']:>7.3f} {s['estoi']:>7.3f}",
            f"({len(self.rows)} utterances, {self.failures} failed)",
        ]
        return "\n".join(lines)


def evaluate_pair(enhanced: np.ndarray, noisy_ch1: np.ndarray, target: np.ndarray,
                  sample_rate: int = 16000, with_intelligibility: bool = True) -> dict:
    out = {
        "si_snr": si_snr(enhanced, target),
        "noisy_si_snr": si_snr(noisy_ch1, target),
    }
    if with_intelligibility:
        out["stoi"] = stoi(enhanced, target, sample_rate)
        out["estoi"] = estoi(enhanced, target, sample_rate)
        out["noisy_stoi"] = stoi(noisy_ch1, target, sample_rate)
        out["noisy_estoi"] = estoi(noisy_ch1, target, sample_rate)
    return out


def evaluate_corpus(model, examples, sample_rate: int = 16000,
                    with_intelligibility: bool = True, pesq_scores: dict | None = None) -> MetricReport:
    """Run `model.enhance` over (utt_id, mixture, target) triples.

    Per-utterance failures are logged, counted, and excluded from means.
    """
    report = MetricReport()
    for utt_id, mixture, target in examples:
        try:
            enhanced = model.enhance(mixture)
            mix = _as_array(mixture)
            tgt = _as_array(target)
            metrics = evaluate_pair(enhanced, mix[0], tgt.ravel(), sample_rate,
                                    with_intelligibility)
            if pesq_scores and utt_id in pesq_scores:
                metrics["pesq"] = float(pesq_scores[utt_id])
            report.add(utt_id, **metrics)
        except Exception:
            log.exception("evaluation failed for %s", utt_id)
            report.failures += 1
    return report
