"""Training loop, checkpoint persistence and clean-set metrics.

A run directory holds:

* ``last.ckpt``  model, optimizer and RNG state after the latest finished epoch
* ``model.ckpt`` the parameters with the best test accuracy so far
* ``train_log.jsonl`` one JSON record per epoch
* ``metrics.json`` clean test metrics of ``model.ckpt``
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import svgp
from .capsnet import CapsNetConfig
from .config import ExperimentConfig, from_dict
from .data import DATASETS, iterate_batches, load_dataset, normalize, subset_per_class
from .diffcore import Adam, default_dtype, load_checkpoint, no_grad, save_checkpoint
from .models import KCN, accuracy, build_model, model_dtype, predict_proba_batched

log = logging.getLogger(__name__)

LAST = "last.ckpt"
BEST = "model.ckpt"
TRAIN_LOG = "train_log.jsonl"
METRICS = "metrics.json"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Split:
    """Normalized images and labels."""

    x: np.ndarray
    y: np.ndarray


def load_splits(cfg: ExperimentConfig) -> Tuple[Split, Split]:
    """Raw-pixel training images (augmented later, then normalized per batch) and a normalized test set."""
    spec = DATASETS[cfg.dataset.name]
    out = []
    for split in ("train", "test"):
        x, y = load_dataset(cfg.dataset.name, cfg.dataset.root, split)
        if cfg.dataset.subset_per_class is not None:
            idx = subset_per_class(y, cfg.dataset.subset_per_class, cfg.dataset.subset_seed)
            x, y = x[idx], y[idx]
        out.append((x, y))
    (xtr, ytr), (xte, yte) = out
    dtype = np.dtype(cfg.dtype)
    return Split(xtr.astype(dtype), ytr), Split(normalize(xte, spec).astype(dtype), yte)


def capsnet_config(cfg: ExperimentConfig) -> CapsNetConfig:
    m = cfg.model
    return CapsNetConfig.for_dataset(cfg.dataset.name, routing_iterations=m.routing_iterations,
                                     unrolled_routing=m.unrolled_routing,
                                     init_std=None if m.init == "he" else m.init_std)


def create_model(cfg: ExperimentConfig, dataset_size: Optional[int], rng: np.random.Generator):
    kwargs = {}
    if cfg.model.kind in ("kcn", "kcn-gp"):
        feature_dim = capsnet_config(cfg).feature_dim
        kwargs = dict(num_inducing=cfg.gp.num_inducing, mc_train=cfg.gp.mc_train, mc_eval=cfg.gp.mc_eval,
                      dataset_size=dataset_size, gamma=1.0 / feature_dim)
    model = build_model(cfg.model.kind, capsnet_config(cfg), rng, recon_weight=cfg.recon_weight, **kwargs)
    if cfg.model.kind == "kcn-gp":
        assert not model.has_decoder, "kcn-gp must not own a decoder"
    return model.astype(np.dtype(cfg.dtype))


def init_inducing(model: KCN, cfg: ExperimentConfig, train: Split, rng: np.random.Generator,
                  set_gamma: bool = True) -> None:
    """Place Z on the capsule features of randomly chosen training images, optionally resetting gamma."""
    spec = DATASETS[cfg.dataset.name]
    head = model.head
    if cfg.gp.inducing_init == "data":
        idx = rng.choice(len(train.y), head.num_inducing, replace=len(train.y) < head.num_inducing)
        with no_grad(), default_dtype(model_dtype(model)):
            feats = model.features(normalize(train.x[idx], spec).astype(model_dtype(model))).data
        Z = feats.astype(np.float64)
    else:
        Z = rng.normal(0.0, 0.1, size=head.inducing.shape)
    gamma = None
    if set_gamma:
        gamma = svgp.median_heuristic_gamma(Z) if cfg.gp.gamma_init == "median" else 1.0 / Z.shape[1]
    head.set_inducing(Z, gamma)
    head.reset_variational()


def lr_at(cfg: ExperimentConfig, epoch: int) -> float:
    o = cfg.optim
    if o.lr_final is None or o.epochs <= 1:
        return o.lr
    return float(o.lr * (o.lr_final / o.lr) ** (epoch / (o.epochs - 1)))


# -- checkpoints -------------------------------------------------------------

def save_model(path, model, cfg: ExperimentConfig, extra: Optional[dict] = None) -> None:
    meta = {"kind": model.kind, "config": cfg.to_dict(), "config_hash": cfg.hash(), "seed": cfg.seed,
            "dataset_size": getattr(model, "_dataset_size", None), **(extra or {})}
    save_checkpoint(path, {f"model/{k}": v for k, v in model.state_dict().items()}, meta)


def load_model(path, expect_kind: Optional[str] = None):
    """Rebuild a model from a checkpoint; returns ``(model, config, metadata)``."""
    tensors, meta = load_checkpoint(path)
    cfg = from_dict(meta["config"])
    if expect_kind is not None and meta["kind"] != expect_kind:
        raise ValueError(f"{path} holds a {meta['kind']!r} model, expected {expect_kind!r}")
    model = create_model(cfg, meta.get("dataset_size"), np.random.default_rng(0))
    model.load_state_dict({k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")})
    return model, cfg, meta


def _save_state(path, model, opt: Adam, cfg: ExperimentConfig, rng: np.random.Generator, progress: dict) -> None:
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    tensors.update({f"optim/{k}": v for k, v in opt.state_dict().items()})
    meta = {"kind": model.kind, "config": cfg.to_dict(), "config_hash": cfg.hash(), "seed": cfg.seed,
            "dataset_size": getattr(model, "_dataset_size", None), "rng": rng.bit_generator.state,
            "progress": progress}
    save_checkpoint(path, tensors, meta)


def _restore_state(path, model, opt: Adam, rng: np.random.Generator) -> dict:
    tensors, meta = load_checkpoint(path)
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model/")})
    opt.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("optim/")})
    rng.bit_generator.state = meta["rng"]
    return meta["progress"]


# -- the loop ----------------------------------------------------------------

@dataclass
class TrainResult:
    model: object
    history: List[dict]
    best_accuracy: float
    best_epoch: int
    stopped_early: bool


def _write_log(out: Path, record: dict) -> None:
    with open(out / TRAIN_LOG, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def train_epoch(model, opt: Adam, train: Split, cfg: ExperimentConfig, rng: np.random.Generator) -> Dict[str, float]:
    spec = DATASETS[cfg.dataset.name]
    dtype = model_dtype(model)
    totals: Dict[str, float] = {}
    n_batches = 0
    for xb, yb, _ in iterate_batches(train.x, train.y, cfg.optim.batch_size, rng=rng, shuffle=True,
                                     augment=cfg.dataset.augment_shift, spec=spec):
        opt.zero_grad()
        try:
            loss, parts = model.loss(xb.astype(dtype), yb, rng)
            loss.backward()
        except FloatingPointError as exc:
            raise TrainingDiverged(f"non-finite value during step {n_batches}: {exc}") from None
        if not np.isfinite(parts["total"]):
            raise TrainingDiverged(f"loss became {parts['total']} at step {n_batches}")
        opt.step()
        for k, v in parts.items():
            totals[k] = totals.get(k, 0.0) + v
        n_batches += 1
    return {k: v / max(n_batches, 1) for k, v in totals.items()}


def train(cfg: ExperimentConfig, out_dir, resume: bool = False, max_epochs: Optional[int] = None) -> TrainResult:
    """Train ``cfg.model.kind`` and write checkpoints and logs under ``out_dir``.

    With ``resume`` the run continues from ``last.ckpt``.  ``max_epochs``
    stops after that many epochs in this call (used to test resumption).
    On divergence the previous ``last.ckpt`` and ``model.ckpt`` are left
    untouched and :class:`TrainingDiverged` is raised.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set, test_set = load_splits(cfg)
    rng = np.random.default_rng(cfg.seed)
    with default_dtype(np.dtype(cfg.dtype)):
        model = create_model(cfg, len(train_set.y), rng)
        opt = Adam(model.parameters(), lr=cfg.optim.lr)
        is_gp = isinstance(model, KCN)
        if resume:
            progress = _restore_state(out / LAST, model, opt, rng)
        else:
            (out / TRAIN_LOG).write_text("")
            if is_gp:
                init_inducing(model, cfg, train_set, rng)
            progress = {"epoch": 0, "best_accuracy": -1.0, "best_epoch": -1, "stale": 0, "history": []}
        history = progress["history"]
        stopped = False
        done_here = 0
        while progress["epoch"] < cfg.optim.epochs:
            if max_epochs is not None and done_here >= max_epochs:
                break
            epoch = progress["epoch"]
            if is_gp and cfg.gp.inducing_init == "data" and epoch == cfg.gp.warmup_epochs and epoch > 0:
                # gamma has been learned by now; resetting it can leave every input outside the kernel's reach
                init_inducing(model, cfg, train_set, rng, set_gamma=False)
                opt = Adam(model.parameters(), lr=cfg.optim.lr)
            opt.lr = lr_at(cfg, epoch)
            t0 = time.time()
            components = train_epoch(model, opt, train_set, cfg, rng)
            acc = accuracy(model, test_set.x, test_set.y, seed=cfg.seed)
            record = {"epoch": epoch, "lr": opt.lr, "test_accuracy": acc, "seconds": round(time.time() - t0, 3),
                      "config_hash": cfg.hash(), "seed": cfg.seed, **components}
            if is_gp:
                record["gamma"] = float(np.exp(model.head.log_gamma.data))
            history.append(record)
            _write_log(out, record)
            log.info("epoch %d  %s", epoch, json.dumps({k: record[k] for k in sorted(components)} | {"acc": acc}))
            progress["epoch"] = epoch + 1
            done_here += 1
            warm = is_gp and epoch < cfg.gp.warmup_epochs and cfg.gp.inducing_init == "data"
            if acc > progress["best_accuracy"] and not warm:
                progress.update(best_accuracy=acc, best_epoch=epoch, stale=0)
                save_model(out / BEST, model, cfg, {"epoch": epoch, "test_accuracy": acc})
            elif not warm:
                progress["stale"] += 1
            _save_state(out / LAST, model, opt, cfg, rng, progress)
            if cfg.optim.patience is not None and progress["stale"] >= cfg.optim.patience:
                stopped = True
                log.info("early stop after epoch %d (best %.4f at epoch %d)", epoch, progress["best_accuracy"],
                         progress["best_epoch"])
                break
    return TrainResult(model, history, progress["best_accuracy"], progress["best_epoch"], stopped)


def clean_metrics(model, x: np.ndarray, y: np.ndarray, seed: int = 0) -> dict:
    """Accuracy, mean predictive entropy (GP models) and mean l2 reconstruction error (decoder models)."""
    from .detection import ENTROPY, L2, available_signals, score_batch

    probs = predict_proba_batched(model, x, seed=seed)
    metrics = {"accuracy": float(np.mean(svgp.predict_class(probs) == y)), "n_examples": int(len(y)),
               "avg_entropy": None, "avg_l2": None}
    signals = available_signals(model)
    if ENTROPY in signals:
        metrics["avg_entropy"] = float(np.mean(svgp.predictive_entropy(probs)))
    if L2 in signals:
        metrics["avg_l2"] = float(np.mean(score_batch(model, x, L2, seed=seed)))
    return metrics


def write_metrics(out_dir, model, cfg: ExperimentConfig, test: Split) -> dict:
    with default_dtype(model_dtype(model)):
        metrics = clean_metrics(model, test.x, test.y, cfg.seed)
    metrics.update(kind=model.kind, dataset=cfg.dataset.name, config_hash=cfg.hash(), seed=cfg.seed)
    Path(out_dir, METRICS).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return metrics
