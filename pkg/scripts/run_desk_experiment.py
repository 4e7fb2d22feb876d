#!/usr/bin/env python3
"""Desk-scale end-to-end experiment: synthesize a corpus, pre-train the
acoustic model, train M5 and the full multi-task system, and compare
test-set SI-SNR against the noisy first channel plus the auxiliary loss
of both systems' outputs.

This is the ordering experiment the acceptance suite runs (smaller
corpora finish in a few minutes; the defaults match the acceptance
setup). Paths land under --workdir.
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from mcse.am import make_proxy_targets, lps_of_wave, pretrain_am, am_loss
from mcse.config import ToolkitConfig
from mcse.metrics import si_snr
from mcse.roomsim import DatasetRecipe, make_dataset
from mcse.tcn import build_model
from mcse.training import TrainConfig, load_dataset, run_training


def desk_recipe(train_count, test_count, seed):
    return DatasetRecipe(
        train_count=train_count,
        dev_count=test_count,
        seed=seed,
        train_seconds=2.0,
        dev_seconds=2.0,
        snr_range=(-5.0, 5.0),
        absorption_range=(0.4, 0.8),
        max_order=8,
    )


def evaluate_si_snr(model, test_set):
    enh, noisy = [], []
    for _, mix, target in test_set:
        ref = target.data.ravel()
        enh.append(si_snr(model.enhance(mix), ref))
        noisy.append(si_snr(mix.data[0].astype(np.float64), ref))
    return float(np.mean(enh)), float(np.mean(noisy))


def evaluate_am_loss(model, test_set, am, codebook, frame):
    vals = []
    for _, mix, target in test_set:
        labels = make_proxy_targets(lps_of_wave(target.data.ravel(), frame), codebook)
        vals.append(am_loss(model.enhance(mix), labels, am, frame))
    return float(np.mean(vals))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="desk_run")
    ap.add_argument("--train-count", type=int, default=100)
    ap.add_argument("--test-count", type=int, default=20)
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--batch-size", type=int, default=2)
    ap.add_argument("--lr", type=float, default=1e-3)
    args = ap.parse_args()

    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    cfg = ToolkitConfig.desk_profile()
    frame = cfg.frame

    t0 = time.time()
    manifest = work / "data" / "manifest.jsonl"
    if not manifest.exists():
        manifest = make_dataset(desk_recipe(args.train_count, args.test_count, args.seed),
                                work / "data")
    print(f"[{time.time()-t0:6.1f}s] dataset at {manifest}")

    train_set = load_dataset(manifest, "train")
    test_set = load_dataset(manifest, "dev")

    am, codebook, history = pretrain_am(
        [target.data.ravel() for _, _, target in train_set],
        frame, cfg.am, seed=args.seed, lr=3e-3, max_epochs=30,
        target_accuracy=0.93, patience=6,
    )
    print(f"[{time.time()-t0:6.1f}s] acoustic model: "
          f"acc={history[-1]['accuracy']:.3f} after {len(history)} epochs")

    results = {}
    for variant, beta in (("M5", 0.0), ("Proposed", 1.0)):
        model = build_model(variant, cfg.frontend, cfg.tcn, frame, cfg.geometry,
                            seed=args.seed)
        tc = TrainConfig(lr=args.lr, alpha=1.0, beta=beta, batch_size=args.batch_size,
                         epochs=args.epochs, seed=args.seed, variant=variant)
        run_training(manifest, model, tc, frame, work / variant,
                     am_model=am if beta else None, codebook=codebook if beta else None,
                     dev_metric_every=max(1, args.epochs // 3))
        enh, noisy = evaluate_si_snr(model, test_set)
        l_am = evaluate_am_loss(model, test_set, am, codebook, frame)
        results[variant] = {"si_snr": enh, "noisy_si_snr": noisy, "am_loss": l_am}
        print(f"[{time.time()-t0:6.1f}s] {variant}: test si_snr={enh:.2f} dB "
              f"(noisy {noisy:.2f} dB), am_loss={l_am:.3f}")

    summary = {
        "noisy_si_snr": results["M5"]["noisy_si_snr"],
        "m5_si_snr": results["M5"]["si_snr"],
        "proposed_si_snr": results["Proposed"]["si_snr"],
        "m5_am_loss": results["M5"]["am_loss"],
        "proposed_am_loss": results["Proposed"]["am_loss"],
        "m5_gain_db": results["M5"]["si_snr"] - results["M5"]["noisy_si_snr"],
        "proposed_vs_m5_db": results["Proposed"]["si_snr"] - results["M5"]["si_snr"],
        "wall_time_s": time.time() - t0,
    }
    (work / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
