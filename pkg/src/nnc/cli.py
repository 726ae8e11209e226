"""Command-line entry point.

Subcommands cover the whole pipeline: synth -> pretrain -> finetune ->
eval/map, plus gradcheck for the finite-difference suite.  Every run
writes resolved_config.json into its output directory so a result can
be traced back to the exact configuration that produced it.

Set NNC_THREADS to cap BLAS thread pools (useful for reproducible
timings and for keeping shared machines polite).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import ops
from .attention import ClassifierModel, ContrastiveModel
from .classifier import (evaluate, finetune, load_model_checkpoint,
                         load_pretrained_trunk, predict_map,
                         save_metrics, save_model_checkpoint, write_ppm)
from .config import (load_config, make_finetune_config, make_model_config,
                     make_pretrain_config, seed_streams, write_resolved)
from .contrastive import PretrainState, load_pretrain_checkpoint, pretrain_loop
from .data import load_scene, load_split, pca_reduce
from .synth import SynthSpec, write_dataset


def _limit_threads():
    value = os.environ.get("NNC_THREADS")
    if value:
        import threadpoolctl
        threadpoolctl.threadpool_limits(int(value))


def _prepared_scene(cfg, data_dir):
    scene = load_scene(data_dir)
    return pca_reduce(scene, cfg.pca_components)


def _build_models(cfg, bands):
    """Two independently-seeded twins: query gets trained, key trails it."""
    streams = seed_streams(cfg.seed)
    mc = make_model_config(cfg, bands)
    query = ContrastiveModel(mc, streams["init"])
    key = ContrastiveModel(mc, streams["init"])
    return query, key, streams


def cmd_synth(args):
    cfg = load_config(args.config, args.set)
    spec = SynthSpec(height=cfg.synth_height, width=cfg.synth_width,
                     bands=cfg.synth_bands, classes=cfg.synth_classes,
                     seed=cfg.seed, labels_per_class=cfg.synth_labels_per_class,
                     noise=cfg.synth_noise)
    write_dataset(args.out, spec)
    write_resolved(cfg, args.out, {"command": "synth"})
    print(f"dataset written to {args.out}")
    return 0


def cmd_pretrain(args):
    cfg = load_config(args.config, args.set)
    scene = _prepared_scene(cfg, args.data)
    query, key, streams = _build_models(cfg, scene.bands)
    pcfg = make_pretrain_config(cfg)
    state = PretrainState(query, key, streams, pcfg)
    if args.resume:
        load_pretrain_checkpoint(args.resume, state)
        print(f"resumed from {args.resume} at step {state.step}")
    write_resolved(cfg, args.out, {"command": "pretrain", "data": str(args.data)})
    final = pretrain_loop(scene, state, pcfg, args.out, patch_size=cfg.patch)
    print(f"pretraining finished at step {state.step}; checkpoint: {final}")
    return 0


def cmd_finetune(args):
    cfg = load_config(args.config, args.set)
    scene = _prepared_scene(cfg, args.data)
    train_mask, test_mask = load_split(args.data)
    streams = seed_streams(cfg.seed)
    mc = make_model_config(cfg, scene.bands)
    model = ClassifierModel(mc, scene.num_classes, streams["init"])
    if args.init != "none":
        load_pretrained_trunk(args.init, model)
        print(f"encoder initialized from {args.init}")
    ft = make_finetune_config(cfg)
    history = finetune(model, scene, train_mask, ft, streams["shuffle"],
                       patch_size=cfg.patch)
    out = Path(args.out)
    ckpt = save_model_checkpoint(out / "model_final", model)
    pred = predict_map(model, scene, patch_size=cfg.patch)
    metrics = evaluate(pred, scene.labels, test_mask, scene.num_classes)
    save_metrics(out, metrics)
    with open(out / "train_loss.json", "w") as fh:
        json.dump({"epoch_loss": history}, fh, indent=2)
    write_resolved(cfg, out, {"command": "finetune", "data": str(args.data),
                              "init": str(args.init)})
    print(f"model checkpoint: {ckpt}")
    print(f"test OA={metrics['oa']:.4f} AA={metrics['aa']:.4f} "
          f"kappa={metrics['kappa']:.4f}")
    return 0


def _restore_classifier(cfg, scene, path):
    streams = seed_streams(cfg.seed)
    mc = make_model_config(cfg, scene.bands)
    model = ClassifierModel(mc, scene.num_classes, streams["init"])
    load_model_checkpoint(path, model)
    return model


def cmd_eval(args):
    cfg = load_config(args.config, args.set)
    scene = _prepared_scene(cfg, args.data)
    _, test_mask = load_split(args.data)
    model = _restore_classifier(cfg, scene, args.model)
    pred = predict_map(model, scene, patch_size=cfg.patch)
    metrics = evaluate(pred, scene.labels, test_mask, scene.num_classes)
    save_metrics(args.out, metrics)
    write_resolved(cfg, args.out, {"command": "eval", "data": str(args.data),
                                   "model": str(args.model)})
    per_class = ["-" if v is None else f"{v:.4f}" for v in metrics["per_class"]]
    print(f"OA={metrics['oa']:.4f} AA={metrics['aa']:.4f} kappa={metrics['kappa']:.4f}")
    print("per-class accuracy: " + " ".join(per_class))
    return 0


def cmd_map(args):
    cfg = load_config(args.config, args.set)
    scene = _prepared_scene(cfg, args.data)
    model = _restore_classifier(cfg, scene, args.model)
    pred = predict_map(model, scene, patch_size=cfg.patch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "map.npy", pred)
    write_ppm(pred, out / "map.ppm")
    write_resolved(cfg, out, {"command": "map", "data": str(args.data),
                              "model": str(args.model)})
    print(f"classification map written to {out / 'map.ppm'}")
    return 0


def cmd_gradcheck(args):
    from .gradsuite import run_suite
    if args.corrupt:
        # prove the suite actually catches a wrong backward rule
        ops.CORRUPT_SIGMOID_BACKWARD = True
    try:
        results, ok = run_suite(tol=args.tol)
    finally:
        ops.CORRUPT_SIGMOID_BACKWARD = False
    total = sum(r.seconds for r in results)
    n_fail = sum(not r.passed for r in results)
    print(f"{len(results)} checks, {n_fail} failed, {total:.1f}s")
    return 0 if ok else 1


def _add_common(p):
    p.add_argument("--config", default=None, help="TOML config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field (repeatable)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nnc",
        description="momentum-contrast pretraining and joint classification "
                    "of hyperspectral + elevation imagery")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="dataset output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="contrastive pretraining on unlabeled pixels")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="train the classifier on labeled pixels")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", default="none",
                   help="'none' for random init, or a pretraining checkpoint directory")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a trained classifier on the test split")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="classifier checkpoint directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("map", help="render the full-scene classification map")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--corrupt", action="store_true",
                   help="sabotage one backward rule; the suite must then fail")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    _limit_threads()
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
