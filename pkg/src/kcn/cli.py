"""Command line entry point: ``kcn train | attack | detect | report``.

Every command exits 0 on success.  On failure it prints a one-line JSON
error record to stderr (and, when the output directory exists, writes it to
``error.json`` there) and exits nonzero: 2 for configuration or usage
problems, 1 for anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import attacks, detection, training
from .config import ConfigError, ExperimentConfig, dump_config, from_dict, load_config
from .data import DATASETS, IdxFormatError, denormalize
from .diffcore import default_dtype, load_checkpoint, no_grad, save_checkpoint
from .models import CLASSIFICATION_ONLY, WITH_RECONSTRUCTION, model_dtype
from .report import write_pgm_grid, write_report

log = logging.getLogger("kcn")

USAGE_ERRORS = (ConfigError, detection.SignalError, attacks.AttackError, FileNotFoundError, IdxFormatError)
VARIANTS = {"classification": CLASSIFICATION_ONLY, "classification+reconstruction": WITH_RECONSTRUCTION}


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.dataset_root is not None:
        cfg.dataset.root = args.dataset_root
    if args.subset_per_class is not None:
        cfg.dataset.subset_per_class = None if args.subset_per_class <= 0 else args.subset_per_class
    return cfg.validate()


def _config_for_checkpoint(args, meta: dict) -> ExperimentConfig:
    """The checkpoint's own settings, with attack/detection sections and overrides from the command line."""
    cfg = from_dict(meta["config"])
    if args.config:
        user = load_config(args.config)
        if user.model.kind != cfg.model.kind:
            raise ConfigError(f"config is for model kind {user.model.kind!r} but the checkpoint holds "
                              f"{cfg.model.kind!r}")
        cfg.attack, cfg.detection = user.attack, user.detection
        cfg.dataset.root = user.dataset.root
    if args.seed is not None:
        cfg.seed = args.seed
    if args.dataset_root is not None:
        cfg.dataset.root = args.dataset_root
    if args.subset_per_class is not None:
        cfg.dataset.subset_per_class = None if args.subset_per_class <= 0 else args.subset_per_class
    return cfg.validate()


def _test_set(cfg: ExperimentConfig, limit: Optional[int] = None) -> training.Split:
    _, test = training.load_splits(cfg)
    if limit is not None:
        test = training.Split(test.x[:limit], test.y[:limit])
    return test


def _recon_grid(model, cfg: ExperimentConfig, test: training.Split, path: Path, n: int = 10) -> None:
    spec = DATASETS[cfg.dataset.name]
    x, y = test.x[:n], test.y[:n]
    with no_grad():
        x_hat = model.reconstruct(x, y).data
    if spec.shape[0] != 1:
        return  # grids are single-channel PGM
    write_pgm_grid([denormalize(x, spec)[:, 0], denormalize(x_hat, spec)[:, 0]], path)


def cmd_train(args) -> dict:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    result = training.train(cfg, out, resume=args.resume)
    model, _, _ = training.load_model(out / training.BEST)
    _, test = training.load_splits(cfg)
    with default_dtype(model_dtype(model)):
        metrics = training.write_metrics(out, model, cfg, test)
        if model.has_decoder:
            _recon_grid(model, cfg, test, out / "reconstructions.pgm")
    return {"command": "train", "out": str(out), "best_epoch": result.best_epoch,
            "epochs_run": len(result.history), "stopped_early": result.stopped_early, **metrics}


def _save_attack_batch(path: Path, batch: attacks.AttackBatch, meta: dict) -> None:
    save_checkpoint(path, {"x": batch.x, "labels": batch.labels.astype(np.float64), "direction": batch.direction},
                    {"mode": batch.mode, "epsilons": list(batch.epsilons), **meta})


def load_attack_batch(path) -> attacks.AttackBatch:
    tensors, meta = load_checkpoint(path)
    return attacks.AttackBatch(meta["mode"], tensors["x"], tensors["labels"].astype(np.int64),
                               tensors["direction"], meta["epsilons"])


def cmd_attack(args) -> dict:
    _, meta = load_checkpoint(args.checkpoint)
    cfg = _config_for_checkpoint(args, meta)
    surrogate_path = args.surrogate or cfg.attack.surrogate_checkpoint
    if not surrogate_path:
        raise attacks.AttackError("black-box mode needs a surrogate checkpoint (--surrogate or "
                                  "attack.surrogate_checkpoint)")
    if not Path(surrogate_path).exists():
        raise FileNotFoundError(f"surrogate checkpoint {surrogate_path} does not exist")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, _, _ = training.load_model(args.checkpoint)
    surrogate, _, _ = training.load_model(surrogate_path, expect_kind="surrogate")
    surrogate.astype(model_dtype(model))
    test = _test_set(cfg, cfg.attack.max_examples)
    variant = VARIANTS[cfg.attack.loss_variant] if model.kind != "capsnet" else WITH_RECONSTRUCTION
    checksum = model.checksum()
    rows = []
    with default_dtype(model_dtype(model)):
        for mode in attacks.MODES:
            batch = attacks.attack_directions(model, test.x, test.y, mode, cfg.attack.grid, surrogate, variant,
                                              cfg.seed)
            _save_attack_batch(out / f"attack_{mode}.ckpt", batch,
                               {"model": model.kind, "config_hash": cfg.hash(), "seed": cfg.seed,
                                "loss_variant": variant if mode == attacks.WHITE else "surrogate-cross-entropy"})
            rows += attacks.epsilon_sweep(model, None, None, cfg.attack.grid, seed=cfg.seed, batch=batch)
    if model.checksum() != checksum:
        raise RuntimeError("attack modified model parameters")
    attacks.write_sweep_csv(rows, out / "sweep.csv", cfg.hash(), cfg.seed)
    return {"command": "attack", "out": str(out), "rows": len(rows),
            "accuracy": {f"{r.mode}@{r.epsilon:g}": r.accuracy for r in rows}}


def cmd_detect(args) -> dict:
    _, meta = load_checkpoint(args.checkpoint)
    cfg = _config_for_checkpoint(args, meta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, _, _ = training.load_model(args.checkpoint)
    signals = args.signals.split(",") if args.signals else detection.available_signals(model)
    for s in signals:
        if s not in detection.available_signals(model):
            raise detection.SignalError(f"signal {s!r} is not available for model kind {model.kind!r}")
    source = Path(args.attacks or out)
    batches = []
    for mode in attacks.MODES:
        path = source / f"attack_{mode}.ckpt"
        if not path.exists():
            raise FileNotFoundError(f"attack artifact {path} is missing; run the attack command first")
        batches.append(load_attack_batch(path))
    eps = cfg.detection.epsilon
    results, by_epsilon = [], []
    with default_dtype(model_dtype(model)):
        for batch in batches:
            if not any(np.isclose(eps, e) for e in batch.epsilons):
                raise ConfigError(f"detection epsilon {eps} is not in the attack grid {batch.epsilons}")
            for signal in signals:
                clean = detection.score_batch(model, batch.x, signal, seed=cfg.seed)
                for e in batch.epsilons:
                    pair = detection.ScoredPair(model.kind, signal, float(e), batch.mode, clean,
                                                detection.score_batch(model, batch.perturbed(e), signal,
                                                                      seed=cfg.seed))
                    res = detection.evaluate_pair(pair, cfg.detection.far)
                    by_epsilon.append({"model": model.kind, "signal": signal, "mode": batch.mode, "epsilon": e,
                                       "auc": res.curve.auc, "threshold": res.threshold, "far": res.far,
                                       "detection_rate": res.detection_rate,
                                       "mean_clean": float(clean.mean()),
                                       "mean_perturbed": float(pair.perturbed.mean())})
                    if np.isclose(e, eps):
                        results.append(res)
    tag = {"config_hash": cfg.hash(), "seed": cfg.seed}
    detection.write_csv(detection.roc_rows(results), out / "roc.csv", tag)
    detection.write_csv(by_epsilon, out / "auc_by_epsilon.csv", tag)
    detection.write_csv(detection.histogram_export([r.pair for r in results], cfg.detection.bins),
                        out / "histograms.csv", tag)
    auc = detection.auc_table(results, eps)
    detection.write_json({"epsilon": eps, "model": model.kind, "auc": auc, **tag}, out / "auc.json")
    detection.write_json({"far": cfg.detection.far, "epsilon": eps, **tag,
                          "thresholds": [{"signal": r.pair.signal, "mode": r.pair.mode, "threshold": r.threshold,
                                          "far": r.far, "detection_rate": r.detection_rate} for r in results]},
                         out / "thresholds.json")
    return {"command": "detect", "out": str(out), "epsilon": eps, "auc": auc}


def cmd_report(args) -> dict:
    summary = write_report(args.runs, args.out)
    return {"command": "report", "rows": len(summary["summary"]["rows"]), "missing": summary["summary"]["missing"]}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kcn", description="Kernelized capsule network experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_checkpoint=False):
        p.add_argument("--config", help="experiment YAML file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--dataset-root")
        p.add_argument("--subset-per-class", type=int, help="images per class; 0 uses the full dataset")
        if needs_checkpoint:
            p.add_argument("--checkpoint", required=True, help="trained model checkpoint")

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="FGSM epsilon sweeps in white- and black-box mode")
    common(p, needs_checkpoint=True)
    p.add_argument("--surrogate", help="surrogate CNN checkpoint for black-box mode")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("detect", help="score clean and perturbed sets, ROC/AUC, thresholds, histograms")
    common(p, needs_checkpoint=True)
    p.add_argument("--attacks", help="directory with attack artifacts (default: OUT)")
    p.add_argument("--signals", help="comma-separated subset of l2,entropy")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("report", help="summary tables from a directory of runs")
    p.add_argument("runs", help="directory whose subdirectories are runs")
    p.add_argument("--out", help="where to write tables (default: RUNS)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        result = args.func(args)
    except Exception as exc:  # report every failure as a record
        record = {"status": "error", "command": args.command, "error": type(exc).__name__, "message": str(exc)}
        if args.verbose:
            traceback.print_exc()
        print(json.dumps(record), file=sys.stderr)
        out = getattr(args, "out", None)
        if out and Path(out).is_dir():
            Path(out, "error.json").write_text(json.dumps(record, indent=2) + "\n")
        return 2 if isinstance(exc, USAGE_ERRORS) else 1
    print(json.dumps({"status": "ok", **result}, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
