"""Auxiliary acoustic-model branch.

A TDNN frame classifier is pre-trained on clean speech and then frozen;
during multi-task training the cross-entropy of its predictions on the
enhanced waveform's log-power spectra regularizes the enhancer toward
clean-speech statistics. The branch is absent at inference.

The classifier targets are vector-quantized clean-LPS frames (k-means
codebook, nearest-centroid labels). This stands in for a lattice-based
sequence criterion, which would drag in a lexicon and a full ASR
decoding stack; the mechanism the loss provides (a fixed clean-trained
classifier scoring the enhanced output) is preserved. See README.

Each TDNN block is a pair of feed-forward layers realized as 1-D
convolutions: the first one splices temporal context (kernel over the
block's context offsets), the second is pointwise, both followed by
ReLU and batch norm. Right context is allowed here precisely because
the branch is train-time only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import nn
from .dsp import DEFAULT_EPS, FrameParams, lps, lps_graph, stft, stft_graph
from .nn.checkpoint import load_archive, save_archive

log = logging.getLogger(__name__)


@dataclass
class TdnnConfig:
    """Full scale: nine blocks of 1536->512->1536 onto 3920 classes."""

    input_dim: int = 257
    num_blocks: int = 9
    io_dim: int = 1536
    mid_dim: int = 512
    num_classes: int = 3920
    context: tuple = (-1, 0, 1)
    normalize_lps: bool = False

    def __post_init__(self):
        offs = np.diff(self.context)
        if len(self.context) > 1 and not np.all(offs == offs[0]):
            raise ValueError(f"context offsets must be evenly spaced, got {self.context}")

    @classmethod
    def desk_scale(cls, input_dim: int, num_classes: int = 64, io_dim: int = 96, mid_dim: int = 32):
        return cls(input_dim=input_dim, num_classes=num_classes, io_dim=io_dim, mid_dim=mid_dim)


class TdnnBlock(nn.Module):
    def __init__(self, cfg: TdnnConfig, rng, dtype=np.float32):
        super().__init__()
        offs = cfg.context
        self.left = -min(offs)
        self.right = max(offs)
        step = int(offs[1] - offs[0]) if len(offs) > 1 else 1
        self.splice = nn.Conv1d(cfg.io_dim, cfg.mid_dim, kernel=len(offs), dilation=step,
                                rng=rng, dtype=dtype)
        self.norm1 = nn.BatchNorm(cfg.mid_dim, dtype=dtype)
        self.project = nn.Conv1d(cfg.mid_dim, cfg.io_dim, rng=rng, dtype=dtype)
        self.norm2 = nn.BatchNorm(cfg.io_dim, dtype=dtype)

    def forward(self, x: nn.Tensor) -> nn.Tensor:
        h = nn.pad_edge1d(x, self.left, self.right)
        h = self.norm1(nn.relu(self.splice(h)))
        return self.norm2(nn.relu(self.project(h)))

    __call__ = forward


class TdnnAcousticModel(nn.Module):
    def __init__(self, cfg: TdnnConfig, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.in_proj = nn.Conv1d(cfg.input_dim, cfg.io_dim, rng=rng, dtype=dtype)
        self.blocks = nn.ModuleList(TdnnBlock(cfg, rng, dtype) for _ in range(cfg.num_blocks))
        self.head = nn.Conv1d(cfg.io_dim, cfg.num_classes, rng=rng, dtype=dtype)

    def forward(self, lps_feats: nn.Tensor) -> nn.Tensor:
        F, T = lps_feats.shape
        if F != self.cfg.input_dim:
            raise ValueError(f"acoustic model expects {self.cfg.input_dim} bins, got {F}")
        span = (self.cfg.context[-1] - self.cfg.context[0]) * self.cfg.num_blocks
        if T <= span:
            log.warning("utterance of %d frames is shorter than the %d-frame context; "
                        "edge frames dominate", T, span)
        x = self.in_proj(self._maybe_normalize(lps_feats))
        for block in self.blocks:
            x = block(x)
        return self.head(x)

    def _maybe_normalize(self, feats: nn.Tensor) -> nn.Tensor:
        if not self.cfg.normalize_lps:
            return feats
        mu = nn.tmean(feats, axis=1, keepdims=True)
        sd = nn.power(nn.tmean(nn.square(feats - mu), axis=1, keepdims=True) + 1e-8, 0.5)
        return (feats - mu) / sd

    __call__ = forward


# ---------------------------------------------------------------------------
# proxy targets
# ---------------------------------------------------------------------------


def train_codebook(frames: np.ndarray, num_classes: int, seed: int = 0,
                   iterations: int = 25) -> np.ndarray:
    """Lloyd k-means over (N, F) LPS frames -> (num_classes, F) centroids."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < num_classes:
        raise ValueError(f"need at least {num_classes} frames, got {frames.shape}")
    rng = np.random.default_rng(seed)
    centroids = frames[rng.choice(frames.shape[0], size=num_classes, replace=False)].copy()
    for _ in range(iterations):
        labels = _nearest(frames, centroids)
        moved = 0.0
        for k in range(num_classes):
            members = frames[labels == k]
            new = members.mean(axis=0) if len(members) else frames[rng.integers(frames.shape[0])]
            moved = max(moved, float(np.abs(new - centroids[k]).max()))
            centroids[k] = new
        if moved < 1e-9:
            break
    return centroids


def _nearest(frames: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmin over squared Euclidean distance; ties resolve to the lowest index
    d = (
        (frames * frames).sum(axis=1)[:, None]
        - 2.0 * frames @ centroids.T
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    return np.argmin(d, axis=1)


def make_proxy_targets(clean_lps: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Label each LPS frame with its nearest codebook centroid."""
    codebook = np.asarray(codebook, dtype=np.float64)
    if codebook.size == 0:
        raise ValueError("codebook is empty")
    feats = np.asarray(clean_lps, dtype=np.float64)
    if feats.ndim == 3:
        feats = feats[0]
    if feats.shape[0] != codebook.shape[1]:
        raise ValueError(f"frame dim {feats.shape[0]} does not match codebook {codebook.shape[1]}")
    return _nearest(feats.T, codebook)


# ---------------------------------------------------------------------------
# pre-training and the auxiliary loss
# ---------------------------------------------------------------------------


def lps_of_wave(wave: np.ndarray, p: FrameParams, eps: float = DEFAULT_EPS) -> np.ndarray:
    return lps(stft(np.asarray(wave, dtype=np.float64), p), eps)[0]


def pretrain_am(clean_waves, frame_params: FrameParams, cfg: TdnnConfig, seed: int = 0,
                lr: float = 1e-3, max_epochs: int = 60, target_accuracy: float = 0.97,
                patience: int = 5, dtype=np.float32, codebook_iterations: int = 25):
    """Train the classifier on clean waveforms until frame accuracy
    plateaus; return (frozen model, codebook, history)."""
    feats = [lps_of_wave(w, frame_params).astype(dtype) for w in clean_waves]
    all_frames = np.concatenate([f.T for f in feats], axis=0)
    codebook = train_codebook(all_frames, cfg.num_classes, seed=seed,
                              iterations=codebook_iterations)
    labels = [make_proxy_targets(f, codebook) for f in feats]

    rng = np.random.default_rng(seed)
    model = TdnnAcousticModel(cfg, rng=rng, dtype=dtype)
    opt = nn.Adam(model.parameters(), lr=lr, weight_decay=1e-5)
    history = []
    best_acc, stale = 0.0, 0
    for epoch in range(max_epochs):
        order = rng.permutation(len(feats))
        total_loss, correct, count = 0.0, 0, 0
        for i in order:
            logits = model(nn.constant(feats[i]))
            loss = nn.cross_entropy(logits, labels[i])
            if not np.isfinite(loss.item()):
                raise FloatingPointError(
                    f"acoustic-model loss diverged at epoch {epoch}, utterance {i}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += loss.item() * labels[i].size
            correct += int((np.argmax(logits.data, axis=0) == labels[i]).sum())
            count += labels[i].size
        acc = correct / count
        history.append({"epoch": epoch, "loss": total_loss / count, "accuracy": acc})
        if acc > best_acc + 1e-3:
            best_acc, stale = acc, 0
        else:
            stale += 1
        if acc >= target_accuracy or stale >= patience:
            break
    model.freeze()
    model.eval()
    return model, codebook, history


def am_loss_graph(est_wave: nn.Tensor, targets: np.ndarray, model: TdnnAcousticModel,
                  frame_params: FrameParams, eps: float = DEFAULT_EPS) -> nn.Tensor:
    """Cross-entropy of the frozen classifier on the enhanced waveform's
    LPS; gradients reach the enhancer through the analysis chain only."""
    re, im = stft_graph(est_wave, frame_params)
    feats = lps_graph(re, im, eps)
    if feats.shape[1] != targets.shape[0]:
        raise ValueError(
            f"enhanced LPS has {feats.shape[1]} frames but {targets.shape[0]} targets"
        )
    return nn.cross_entropy(model(feats), targets)


def am_loss(est_wave: np.ndarray, targets: np.ndarray, model: TdnnAcousticModel,
            frame_params: FrameParams) -> float:
    with nn.no_grad():
        dtype = model.head.weight.dtype
        val = am_loss_graph(nn.constant(np.asarray(est_wave, dtype=dtype)), targets,
                            model, frame_params)
    return val.item()


# ---------------------------------------------------------------------------
# checkpointing (model + codebook in one archive)
# ---------------------------------------------------------------------------


def save_am(path, model: TdnnAcousticModel, codebook: np.ndarray):
    cfg = model.cfg
    meta = np.array(
        [cfg.input_dim, cfg.num_blocks, cfg.io_dim, cfg.mid_dim, cfg.num_classes,
         cfg.context[0], cfg.context[-1], len(cfg.context), int(cfg.normalize_lps)],
        dtype="<i8",
    )
    tensors = {"meta.config": meta, "codebook.centroids": codebook.astype("<f8")}
    tensors.update({f"model.{k}": v for k, v in model.state_dict().items()})
    save_archive(tensors, path)


def load_am(path, dtype=np.float32) -> tuple[TdnnAcousticModel, np.ndarray]:
    tensors = load_archive(path)
    meta = tensors.pop("meta.config")
    codebook = tensors.pop("codebook.centroids")
    first, last, n = int(meta[5]), int(meta[6]), int(meta[7])
    step = (last - first) // (n - 1) if n > 1 else 1
    cfg = TdnnConfig(
        input_dim=int(meta[0]), num_blocks=int(meta[1]), io_dim=int(meta[2]),
        mid_dim=int(meta[3]), num_classes=int(meta[4]),
        context=tuple(range(first, last + 1, step)), normalize_lps=bool(meta[8]),
    )
    model = TdnnAcousticModel(cfg, rng=np.random.default_rng(0), dtype=dtype)
    state = {k[len("model."):]: v for k, v in tensors.items()}
    model.load_state_dict(state)
    model.freeze()
    model.eval()
    return model, codebook
