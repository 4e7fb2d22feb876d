"""Multi-task training loop, simulated block-synchronized workers, and
finite-difference gradient verification.

One step: enhance forward, SI-SNR loss on the waveform, optionally the
frozen acoustic model's cross-entropy on the enhanced spectra, one Adam
update. The reported breakdown satisfies
l_total = alpha*l_enh + beta*l_am bit-exactly.

Block-synchronized training runs K worker replicas sequentially over
disjoint shards: every `sync_period` local steps the global parameters
integrate the momentum-filtered mean parameter delta. The degenerate
setting (one worker, zero momentum, unit block lr) telescopes to plain
serial training and is implemented to be bit-exact about it.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import nn
from .am import am_loss_graph, make_proxy_targets, lps_of_wave
from .dsp import FrameParams
from .metrics import LossWeights, enhancement_loss, si_snr
from .nn.checkpoint import load_archive, save_archive
from .roomsim import iterate_manifest, load_example

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    alpha: float = 1.0
    beta: float = 1.0
    batch_size: int = 2
    epochs: int = 10
    seed: int = 0
    variant: str = "Proposed"
    si_snr_zero_mean: bool = True
    si_snr_clamp_db: float = 60.0


@dataclass
class BmufConfig:
    workers: int = 1
    sync_period: int = 16
    block_momentum: float = 0.9
    block_lr: float = 1.0
    nesterov: bool = False
    reset_adam_at_sync: bool = False

    def __post_init__(self):
        if not 0.0 <= self.block_momentum < 1.0:
            raise ValueError(f"block momentum must be in [0,1), got {self.block_momentum}")
        if self.block_lr <= 0 or self.sync_period < 1 or self.workers < 1:
            raise ValueError("block_lr must be > 0, sync_period and workers >= 1")


class BmufState:
    """Global parameters plus the filtered update, shape-matched to a model."""

    def __init__(self, params: list[np.ndarray], config: BmufConfig):
        self.global_params = [p.copy() for p in params]
        self.filtered = [np.zeros_like(p) for p in params]
        self.config = config

    def restart_point(self) -> list[np.ndarray]:
        """Where replicas resume after a sync (Nesterov adds momentum lookahead)."""
        if self.config.nesterov and self.config.block_momentum:
            eta = self.config.block_momentum
            return [w + eta * g for w, g in zip(self.global_params, self.filtered)]
        return [w.copy() for w in self.global_params]


def bmuf_round(worker_params: list[list[np.ndarray]], state: BmufState) -> None:
    """Fold one block of worker results into the global parameters."""
    K = len(worker_params)
    for lists in worker_params:
        if len(lists) != len(state.global_params):
            raise ValueError("worker parameter list does not match the global model")
        for w, g in zip(lists, state.global_params):
            if w.shape != g.shape:
                raise ValueError(f"worker tensor shape {w.shape} != global {g.shape}")
    eta = state.config.block_momentum
    zeta = state.config.block_lr
    for i in range(len(state.global_params)):
        mean = worker_params[0][i].copy() if K == 1 else (
            np.mean([wp[i] for wp in worker_params], axis=0)
        )
        delta = mean - state.global_params[i]
        state.filtered[i] = eta * state.filtered[i] + zeta * delta
        if eta == 0.0 and zeta == 1.0:
            # telescoping identity: W + (mean - W) == mean, kept bit-exact
            state.global_params[i] = mean
        else:
            state.global_params[i] = state.global_params[i] + state.filtered[i]


# ---------------------------------------------------------------------------
# one optimization step
# ---------------------------------------------------------------------------


def train_step(batch, model, opt, cfg: TrainConfig, frame_params: FrameParams,
               am_model=None, codebook=None) -> dict:
    """One Adam update on a batch of (mixture, target[, labels]) items.

    Items are (C,S) mixtures with (S,) targets; labels are per-frame
    classes for the auxiliary branch and are derived from the target via
    the codebook when absent. Returns the loss breakdown; a non-finite
    total aborts the update and flags the batch.
    """
    weights = LossWeights(cfg.alpha, cfg.beta)
    use_am = cfg.beta > 0
    if use_am and am_model is None:
        raise ValueError("beta > 0 requires a frozen acoustic model")
    model.train()
    enh_terms, am_terms = [], []
    for item in batch:
        mix, target = item[0], item[1]
        labels = item[2] if len(item) > 2 else None
        out = model.forward_graph(mix)
        enh_terms.append(
            enhancement_loss(out["est"], np.asarray(target).ravel(),
                             zero_mean=cfg.si_snr_zero_mean, clamp_db=cfg.si_snr_clamp_db)
        )
        if use_am:
            if labels is None:
                labels = make_proxy_targets(lps_of_wave(np.asarray(target).ravel(), frame_params),
                                            codebook)
            am_terms.append(am_loss_graph(out["est"], labels, am_model, frame_params))

    inv = 1.0 / len(enh_terms)
    l_enh = enh_terms[0] * inv
    for t in enh_terms[1:]:
        l_enh = l_enh + t * inv
    if use_am:
        l_am = am_terms[0] * inv
        for t in am_terms[1:]:
            l_am = l_am + t * inv
        l_total = l_enh * weights.alpha + l_am * weights.beta
        l_am_val = l_am.item()
    else:
        l_total = l_enh * weights.alpha
        l_am_val = 0.0

    breakdown = {
        "l_enh": l_enh.item(),
        "l_am": l_am_val,
        "l_total": weights.alpha * l_enh.item() + weights.beta * l_am_val,
        "aborted": False,
    }
    if not np.isfinite(l_total.item()):
        log.error("non-finite loss %s on batch of %d items; step aborted (meta: %s)",
                  l_total.item(), len(batch), [np.asarray(b[0]).shape for b in batch])
        breakdown["aborted"] = True
        return breakdown
    opt.zero_grad()
    l_total.backward()
    opt.step()
    return breakdown


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def grad_check(model, loss_fn, h: float = 1e-6, samples_per_tensor: int = 200,
               seed: int = 0) -> dict:
    """Central-difference check of every trainable tensor.

    `loss_fn()` must rebuild the graph and return the scalar loss. Errors
    are |fd - grad| / max(|fd| + |grad|, 1e-3): relative for healthy
    gradient magnitudes with an absolute floor where finite differences
    run out of precision. Reports the worst offender by tensor name.
    """
    params = [(name, p) for name, p in model.named_parameters() if p.requires_grad]
    model.zero_grad()
    loss_fn().backward()
    grads = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
             for name, p in params}
    rng = np.random.default_rng(seed)
    worst = {"error": 0.0, "tensor": None, "index": None}
    per_tensor = {}
    for name, p in params:
        flat = p.data.reshape(-1)
        n = min(samples_per_tensor, flat.size)
        idx = rng.choice(flat.size, size=n, replace=False)
        gflat = grads[name].reshape(-1)
        tensor_worst = 0.0
        for j in idx:
            orig = flat[j]
            flat[j] = orig + h
            f_plus = loss_fn().item()
            flat[j] = orig - h
            f_minus = loss_fn().item()
            flat[j] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            err = abs(fd - gflat[j]) / max(abs(fd) + abs(gflat[j]), 1e-3)
            if err > tensor_worst:
                tensor_worst = err
            if err > worst["error"]:
                worst.update(error=err, tensor=name, index=int(j))
        per_tensor[name] = tensor_worst
    worst["per_tensor"] = per_tensor
    return worst


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    last_checkpoint: Path
    best_checkpoint: Path
    log_path: Path
    history: list = field(default_factory=list)


def _save_training_state(path: Path, model, opt, meta: dict):
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    tensors.update({f"opt.{k}": v for k, v in opt.state_dict().items()})
    save_archive(tensors, path)
    path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2))


def _load_training_state(path: Path, model, opt):
    tensors = load_archive(path)
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    opt.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("opt.")})
    return json.loads(path.with_suffix(".meta.json").read_text())


def _dev_si_snr(model, dev_set) -> float:
    vals = []
    for _, mix, target in dev_set:
        est = model.enhance(mix)
        vals.append(si_snr(est, target.data.ravel()))
    return float(np.mean(vals)) if vals else float("nan")


def load_dataset(manifest_path, split):
    return [load_example(rec) for rec in iterate_manifest(manifest_path, split)]


def run_training(manifest_path, model, cfg: TrainConfig, frame_params: FrameParams,
                 out_dir, am_model=None, codebook=None, bmuf: BmufConfig | None = None,
                 resume: bool = False, dev_metric_every: int = 1) -> TrainResult:
    """Epoch loop with per-epoch dev SI-SNR, best-checkpoint tracking, and
    resumable state. Workers (if any) run sequentially over shards."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_set = load_dataset(manifest_path, "train")
    dev_set = load_dataset(manifest_path, "dev")
    if not train_set:
        raise ValueError(f"manifest {manifest_path} has no training examples")
    if cfg.beta > 0 and am_model is None:
        raise ValueError("beta > 0 requires a frozen acoustic model checkpoint")

    label_cache: dict[str, np.ndarray] = {}

    def materialize(item):
        utt_id, mix, target = item
        labels = None
        if cfg.beta > 0:
            labels = label_cache.get(utt_id)
            if labels is None:
                labels = make_proxy_targets(lps_of_wave(target.data.ravel(), frame_params),
                                            codebook)
                label_cache[utt_id] = labels
        return (mix.data, target.data.ravel(), labels)

    opt = nn.Adam(model.trainable_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    last_path = out_dir / "last.bin"
    best_path = out_dir / "best.bin"
    log_path = out_dir / "train_log.jsonl"
    start_epoch, global_step, best_score = 0, 0, -np.inf
    history = []
    if resume and last_path.exists():
        meta = _load_training_state(last_path, model, opt)
        start_epoch = meta["epoch"] + 1
        global_step = meta["global_step"]
        best_score = meta["best_score"]
        history = meta.get("history", [])
        log.info("resumed from %s at epoch %d", last_path, start_epoch)

    use_bmuf = bmuf is not None
    bmuf_runtime: dict = {}
    log_fh = open(log_path, "a")

    def log_step(step, breakdown):
        rec = {"step": step, "l_enh": breakdown["l_enh"], "l_am": breakdown["l_am"],
               "l_total": breakdown["l_total"], "lr": cfg.lr, "wall_time": time.time()}
        log_fh.write(json.dumps(rec) + "\n")

    def batches(items):
        for i in range(0, len(items), cfg.batch_size):
            yield [materialize(it) for it in items[i : i + cfg.batch_size]]

    try:
        for epoch in range(start_epoch, cfg.epochs):
            order = np.random.default_rng((cfg.seed, epoch)).permutation(len(train_set))
            epoch_items = [train_set[i] for i in order]
            if not use_bmuf:
                for batch in batches(epoch_items):
                    breakdown = train_step(batch, model, opt, cfg, frame_params,
                                           am_model, codebook)
                    global_step += 1
                    log_step(global_step, breakdown)
            else:
                global_step = _bmuf_epoch(epoch_items, model, opt, cfg, frame_params,
                                          am_model, codebook, bmuf, batches, global_step,
                                          log_step, bmuf_runtime)
            score = _dev_si_snr(model, dev_set) if (epoch + 1) % dev_metric_every == 0 else None
            entry = {"epoch": epoch, "dev_si_snr": score, "step": global_step}
            history.append(entry)
            log.info("epoch %d done: dev si_snr=%s", epoch, score)
            if score is not None and score > best_score:
                best_score = score
                save_archive({k: v for k, v in model.state_dict().items()}, best_path)
            _save_training_state(last_path, model, opt, {
                "epoch": epoch, "global_step": global_step, "best_score": best_score,
                "history": history, "config": asdict(cfg),
            })
    finally:
        log_fh.close()
    if not best_path.exists():
        save_archive(dict(model.state_dict()), best_path)
    return TrainResult(last_path, best_path, log_path, history)


def _bmuf_epoch(epoch_items, model, opt, cfg, frame_params, am_model, codebook,
                bmuf: BmufConfig, batches, global_step, log_step, runtime: dict) -> int:
    """Sequentially simulated block-synchronous workers over shards.

    `runtime` carries the global/filtered parameters and per-worker Adam
    state across epochs.
    """
    K = bmuf.workers
    shards = [list(epoch_items[k::K]) for k in range(K)]
    shard_batches = [list(batches(s)) for s in shards]
    params = model.trainable_parameters()
    if not runtime:
        runtime["state"] = BmufState([p.data for p in params], bmuf)
        runtime["opts"] = [nn.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
                           for _ in range(K)]
    state: BmufState = runtime["state"]
    worker_opts = runtime["opts"]
    worker_models = [[w.copy() for w in state.global_params] for _ in range(K)]
    positions = [0] * K
    while any(positions[k] < len(shard_batches[k]) for k in range(K)):
        restart = state.restart_point()
        results = []
        for k in range(K):
            if positions[k] >= len(shard_batches[k]):
                results.append(worker_models[k])
                continue
            for p, w in zip(params, restart):
                p.data = w.copy()
            if bmuf.reset_adam_at_sync:
                worker_opts[k] = nn.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
            steps = 0
            while steps < bmuf.sync_period and positions[k] < len(shard_batches[k]):
                breakdown = train_step(shard_batches[k][positions[k]], model, worker_opts[k],
                                       cfg, frame_params, am_model, codebook)
                positions[k] += 1
                steps += 1
                global_step += 1
                log_step(global_step, breakdown)
            worker_models[k] = [p.data.copy() for p in params]
            results.append(worker_models[k])
        bmuf_round(results, state)
    for p, w in zip(params, state.global_params):
        p.data = w.copy()
    return global_step
