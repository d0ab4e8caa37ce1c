"""Perturbation detection from reconstruction error and predictive entropy.

Higher scores are more suspicious for both signals; an input is flagged when
its score exceeds the threshold.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import svgp
from .decoder import recon_error
from .diffcore import Tensor, default_dtype, no_grad
from .models import model_dtype, predict_proba_batched

L2 = "l2"
ENTROPY = "entropy"
SIGNALS = (L2, ENTROPY)


class SignalError(ValueError):
    """The requested signal is not defined for this model."""


def available_signals(model) -> List[str]:
    signals = []
    if getattr(model, "has_decoder", False):
        signals.append(L2)
    if model.kind in ("kcn", "kcn-gp"):
        signals.append(ENTROPY)
    return signals


def score_batch(model, images, signal: str, batch_size: int = 250, seed: int = 0) -> np.ndarray:
    """One score per image.

    ``l2`` reconstructs from the capsule of the predicted class;
    ``entropy`` is the entropy of the MC-averaged predictive distribution.
    """
    if signal not in SIGNALS:
        raise SignalError(f"unknown signal {signal!r}; expected one of {SIGNALS}")
    if signal not in available_signals(model):
        raise SignalError(f"signal {signal!r} is not available for model kind {model.kind!r}")
    images = np.asarray(images, dtype=model_dtype(model))
    probs = predict_proba_batched(model, images, batch_size, seed)
    if signal == ENTROPY:
        return svgp.predictive_entropy(probs)
    classes = svgp.predict_class(probs)
    scores = []
    with no_grad(), default_dtype(images.dtype):
        for start in range(0, len(images), batch_size):
            xb = images[start:start + batch_size]
            x_hat = model.reconstruct(xb, classes[start:start + batch_size])
            scores.append(recon_error(Tensor(xb), x_hat).data)
    return np.concatenate(scores).astype(np.float64) if scores else np.zeros(0)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def _nonempty(scores, what: str) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size == 0:
        raise ValueError(f"{what} scores are empty")
    if not np.all(np.isfinite(scores)):
        raise ValueError(f"{what} scores contain non-finite values")
    return scores


def _fraction_above(sorted_scores: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    return (sorted_scores.size - np.searchsorted(sorted_scores, thresholds, side="right")) / sorted_scores.size


def roc(neg_scores, pos_scores) -> RocCurve:
    """Threshold sweep over every observed score plus the two infinite sentinels; trapezoidal AUC."""
    neg = np.sort(_nonempty(neg_scores, "negative"))
    pos = np.sort(_nonempty(pos_scores, "positive"))
    thresholds = np.concatenate([[np.inf], np.unique(np.concatenate([neg, pos]))[::-1], [-np.inf]])
    fpr = _fraction_above(neg, thresholds)
    tpr = _fraction_above(pos, thresholds)
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(fpr, tpr, thresholds, auc)


def threshold_at_far(neg_scores, far: float) -> float:
    """Smallest threshold whose false-alarm rate on ``neg_scores`` is at most ``far``.

    With ``far = 1`` every input may be flagged, and the threshold sits just
    below the smallest negative score.
    """
    if not 0.0 < far <= 1.0:
        raise ValueError(f"far must lie in (0, 1], got {far}")
    neg = np.sort(_nonempty(neg_scores, "negative"))
    if far == 1.0:
        return float(np.nextafter(neg[0], -np.inf))
    ok = _fraction_above(neg, neg) <= far
    return float(neg[np.argmax(ok)])


def false_alarm_rate(neg_scores, threshold: float) -> float:
    neg = np.asarray(neg_scores, dtype=np.float64)
    return float(np.mean(neg > threshold))


def histogram(scores, bins: int, value_range: Optional[Sequence[float]] = None):
    """Fixed-width bin counts over ``value_range`` (default: the scores' own min and max)."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    if value_range is None and scores.size:
        value_range = (scores.min(), scores.max())
    counts, edges = np.histogram(scores, bins=bins, range=value_range)
    return counts, edges


@dataclass
class ScoredPair:
    """Clean and perturbed scores for one (signal, epsilon, mode), paired by example."""

    model: str
    signal: str
    epsilon: float
    mode: str
    clean: np.ndarray
    perturbed: np.ndarray


def histogram_export(pairs: Iterable[ScoredPair], bins: int) -> List[dict]:
    """Rows of binned counts; clean and perturbed sets of a pair share bin edges."""
    rows = []
    for p in pairs:
        pooled = np.concatenate([p.clean, p.perturbed])
        value_range = (pooled.min(), pooled.max())
        for flag, scores in ((0, p.clean), (1, p.perturbed)):
            counts, edges = histogram(scores, bins, value_range)
            for lo, hi, count in zip(edges[:-1], edges[1:], counts):
                rows.append({"model": p.model, "signal": p.signal, "epsilon": p.epsilon, "mode": p.mode,
                             "perturbed": flag, "bin_left": float(lo), "bin_right": float(hi), "count": int(count)})
    return rows


@dataclass
class DetectionResult:
    pair: ScoredPair
    curve: RocCurve
    threshold: float
    far: float
    detection_rate: float


def evaluate_pair(pair: ScoredPair, far: float = 0.05) -> DetectionResult:
    curve = roc(pair.clean, pair.perturbed)
    t = threshold_at_far(pair.clean, far)
    achieved = false_alarm_rate(pair.clean, t)
    if achieved > far:
        raise AssertionError(f"threshold {t} gives false-alarm rate {achieved} > {far}")
    return DetectionResult(pair, curve, t, achieved, float(np.mean(pair.perturbed > t)))


def auc_table(results: Iterable[DetectionResult], epsilon: float) -> Dict[str, Dict[str, Optional[float]]]:
    """``{"<model>-<signal>": {"white": auc, "black": auc}}`` at one epsilon."""
    table: Dict[str, Dict[str, Optional[float]]] = {}
    for r in results:
        if not np.isclose(r.pair.epsilon, epsilon):
            continue
        row = table.setdefault(f"{r.pair.model}-{r.pair.signal}", {"white": None, "black": None})
        row[r.pair.mode] = r.curve.auc
    return table


def write_csv(rows: Sequence[dict], path, extra: Optional[dict] = None) -> None:
    extra = extra or {}
    with open(Path(path), "w", newline="") as fh:
        if not rows:
            fh.write(",".join(extra) + "\n" if extra else "")
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]) + list(extra))
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, **extra})


def roc_rows(results: Iterable[DetectionResult]) -> List[dict]:
    rows = []
    for r in results:
        for f, t, th in zip(r.curve.fpr, r.curve.tpr, r.curve.thresholds):
            rows.append({"model": r.pair.model, "signal": r.pair.signal, "epsilon": r.pair.epsilon,
                         "mode": r.pair.mode, "threshold": float(th), "fpr": float(f), "tpr": float(t)})
    return rows


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
