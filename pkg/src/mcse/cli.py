"""Command-line entry point.

Subcommands: simulate, pretrain-am, train, enhance, evaluate,
inspect-features, selftest. Every run echoes its fully resolved config
next to the outputs; exit codes are 0 (success), 1 (user error),
2 (internal error or failing selftest).

Set MCSE_NUM_THREADS before launch to cap BLAS threading (it is applied
to OPENBLAS/OMP/MKL thread variables at import time).
"""

import os

_threads = os.environ.get("MCSE_NUM_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import json
import logging
import sys
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import nn
from .am import load_am, pretrain_am, save_am
from .config import ToolkitConfig, load_config, save_config
from .dsp import lps, stft
from .frontend import VARIANTS
from .metrics import evaluate_corpus
from .nn.checkpoint import load_archive
from .roomsim import iterate_manifest, load_example, make_dataset
from .tcn import build_model
from .training import run_training
from .wavio import read_wav, write_matrix_csv, write_spectrogram_csv, write_wav

log = logging.getLogger("mcse")


def _echo_config(cfg: ToolkitConfig, out_dir):
    save_config(cfg, Path(out_dir) / "config_used.yaml")


def _build_from_config(cfg: ToolkitConfig, variant: str, seed: int):
    return build_model(variant, cfg.frontend, cfg.tcn, cfg.frame, cfg.geometry, seed=seed)


def _load_model_state(model, ckpt_path):
    tensors = load_archive(ckpt_path)
    if any(k.startswith("model.") for k in tensors):
        tensors = {k[6:]: v for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(tensors)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    recipe = cfg.dataset
    if args.count is not None:
        recipe = replace(recipe, train_count=args.count)
    if args.dev_count is not None:
        recipe = replace(recipe, dev_count=args.dev_count)
    if args.seed is not None:
        recipe = replace(recipe, seed=args.seed)
    if recipe.train_count + recipe.dev_count <= 0:
        raise ValueError("requested dataset is empty; set --count/--dev-count > 0")
    cfg.dataset = recipe
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out)
    manifest = make_dataset(recipe, out)
    print(manifest)
    return 0


def cmd_pretrain_am(args) -> int:
    cfg = load_config(args.config)
    clean = [load_example(rec)[2].data.ravel()
             for rec in iterate_manifest(args.manifest, split="train")]
    if not clean:
        raise ValueError(f"manifest {args.manifest} has no training targets")
    model, codebook, history = pretrain_am(
        clean, cfg.frame, cfg.am, seed=args.seed,
        max_epochs=args.max_epochs,
    )
    out = Path(args.out)
    save_am(out, model, codebook)
    _echo_config(cfg, out.parent)
    print(f"{out} (final accuracy {history[-1]['accuracy']:.3f} "
          f"after {len(history)} epochs)")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    variant = args.variant or cfg.trainer.variant
    if variant not in VARIANTS:
        raise ValueError(f"invalid variant {variant!r}; valid: {', '.join(VARIANTS)}")
    trainer = replace(cfg.trainer, variant=variant)
    if args.epochs is not None:
        trainer = replace(trainer, epochs=args.epochs)
    if args.seed is not None:
        trainer = replace(trainer, seed=args.seed)
    am_model = codebook = None
    if variant == "Proposed":
        if not args.am_checkpoint:
            raise ValueError("--variant Proposed requires --am-checkpoint "
                             "(train one with `mcse pretrain-am`)")
        am_model, codebook = load_am(args.am_checkpoint)
    else:
        trainer = replace(trainer, beta=0.0)  # no auxiliary branch outside Proposed
    cfg.trainer = trainer
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out)
    model = _build_from_config(cfg, variant, trainer.seed)
    result = run_training(args.manifest, model, trainer, cfg.frame, out,
                          am_model=am_model, codebook=codebook,
                          bmuf=cfg.bmuf_or_none(), resume=args.resume)
    print(result.best_checkpoint)
    return 0


def cmd_enhance(args) -> int:
    cfg = load_config(args.config)
    wave = read_wav(args.infile, expect_rate=cfg.frame.sample_rate)
    if wave.channels != cfg.frontend.channels:
        raise ValueError(
            f"{args.infile}: {wave.channels} channel(s), model expects {cfg.frontend.channels}"
        )
    model = _build_from_config(cfg, args.variant, seed=0)
    _load_model_state(model, args.model)
    enhanced = model.enhance(wave)
    write_wav(args.out, enhanced[None, :], cfg.frame.sample_rate)
    if args.dump_mask:
        with nn.no_grad():
            mask_re, mask_im = model.mask_for(wave.data)
        mag = np.hypot(mask_re.data, mask_im.data)
        write_matrix_csv(args.dump_mask, mag, frame_major=False)
    print(args.out)
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    records = list(iterate_manifest(args.manifest, split=args.split))
    if not records:
        raise ValueError(f"manifest {args.manifest} has no '{args.split}' utterances")
    model = _build_from_config(cfg, args.variant, seed=0)
    _load_model_state(model, args.model)
    pesq_scores = None
    if args.pesq_scores:
        pesq_scores = {}
        for line in Path(args.pesq_scores).read_text().splitlines():
            utt, score = line.split(",")[:2]
            pesq_scores[utt.strip()] = float(score)
    examples = (load_example(rec) for rec in records)
    report = evaluate_corpus(model, examples, cfg.frame.sample_rate,
                             with_intelligibility=not args.no_intelligibility,
                             pesq_scores=pesq_scores)
    report.write_csv(args.out)
    if args.spectrogram_dump:
        dump = Path(args.spectrogram_dump)
        for rec in records:
            utt, mix, target = load_example(rec)
            enhanced = model.enhance(mix)
            p = cfg.frame
            for tag, sig in (("noisy", mix.data[0]), ("enhanced", enhanced),
                             ("target", target.data.ravel())):
                write_matrix_csv(dump / f"{utt}.{tag}.lps.csv",
                                 lps(stft(sig.astype(np.float64), p))[0])
    print(report.format_table())
    return 0


def cmd_inspect_features(args) -> int:
    cfg = load_config(args.config)
    wave = read_wav(args.infile, expect_rate=cfg.frame.sample_rate)
    model = _build_from_config(cfg, args.variant, seed=args.seed or 0)
    if args.model:
        _load_model_state(model, args.model)
    capture: dict = {}
    with nn.no_grad():
        model.frontend.eval()
        model.frontend(wave.data, capture=capture)
    if args.name not in capture:
        raise ValueError(f"unknown feature {args.name!r}; available: {sorted(capture)}")
    feats = capture[args.name]
    if args.panel >= feats.shape[0]:
        raise ValueError(f"panel {args.panel} out of range; {feats.shape[0]} panels")
    write_matrix_csv(args.out, feats[args.panel])
    print(args.out)
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest(fast=args.fast)
    width = max(len(name) for name, _ in results)
    failed = False
    for name, ok in results:
        print(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}")
        failed |= not ok
    return 2 if failed else 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcse",
        description="multi-channel speech enhancement: simulation, training, "
                    "enhancement, evaluation",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="synthesize a dataset with a manifest")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, help="training examples")
    p.add_argument("--dev-count", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("pretrain-am", help="train and freeze the acoustic model")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-epochs", type=int, default=60)
    p.set_defaults(func=cmd_pretrain_am)

    p = sub.add_parser("train", help="train an enhancement variant")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", help=f"one of: {', '.join(VARIANTS)}")
    p.add_argument("--am-checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance a multi-channel WAV")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--variant", default="Proposed")
    p.add_argument("--dump-mask", help="write the mask magnitude (bins x frames) CSV here")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", help="evaluate a model over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--variant", default="Proposed")
    p.add_argument("--split", default="dev")
    p.add_argument("--no-intelligibility", action="store_true")
    p.add_argument("--spectrogram-dump", help="directory for per-utterance LPS CSVs")
    p.add_argument("--pesq-scores", help="CSV of utt_id,score to merge into the report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect-features", help="dump a named frontend panel to CSV")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--name", required=True)
    p.add_argument("--config")
    p.add_argument("--variant", default="Proposed")
    p.add_argument("--panel", type=int, default=0)
    p.add_argument("--model")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_inspect_features)

    p = sub.add_parser("selftest", help="run the built-in verification suites")
    p.add_argument("--fast", action="store_true", help="skip the gradient suite")
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, NotImplementedError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
