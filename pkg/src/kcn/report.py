"""Summary tables across run directories, and image grid export."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .attacks import read_sweep_csv

MODEL_ORDER = ("capsnet", "kcn-gp", "kcn")
DETECTION_ROWS = ("capsnet-l2", "kcn-l2", "kcn-entropy", "kcn-gp-entropy")
SUMMARY_COLUMNS = ("dataset", "model", "accuracy", "avg_entropy", "avg_l2", "n_examples", "config_hash", "seed")


def _runs(root: Path) -> List[Path]:
    return sorted(p.parent for p in root.glob("*/metrics.json"))


def summary_table(root) -> dict:
    """Accuracy, mean entropy and mean l2 on the clean test set, one row per trained model.

    Values that do not apply (entropy for the CapsNet, l2 for KCN-GP) are
    ``None``; expected models without a run are listed under ``missing``.
    """
    root = Path(root)
    rows = []
    for run in _runs(root):
        m = json.loads((run / "metrics.json").read_text())
        if m.get("kind") == "surrogate":
            continue
        rows.append({k: m.get(k) for k in SUMMARY_COLUMNS if k not in ("model", "dataset")} |
                    {"model": m["kind"], "dataset": m["dataset"], "run": run.name})
    order = {k: i for i, k in enumerate(MODEL_ORDER)}
    rows.sort(key=lambda r: (r["dataset"], order.get(r["model"], len(order)), r["run"]))
    datasets = sorted({r["dataset"] for r in rows}) or ["mnist"]
    present = {(r["dataset"], r["model"]) for r in rows}
    missing = [f"{d}/{k}" for d in datasets for k in MODEL_ORDER if (d, k) not in present]
    return {"averaging_set": "clean test set", "rows": rows, "missing": missing}


def detection_table(root) -> dict:
    """AUC per detector row and attack mode at the detection epsilon, gaps as ``None``."""
    root = Path(root)
    table: Dict[str, Dict[str, Optional[float]]] = {r: {"white": None, "black": None} for r in DETECTION_ROWS}
    epsilons = set()
    for run in sorted(root.glob("*/auc.json")):
        d = json.loads(run.read_text())
        epsilons.add(d["epsilon"])
        for row, cols in d["auc"].items():
            table.setdefault(row, {"white": None, "black": None}).update(
                {k: v for k, v in cols.items() if v is not None})
    return {"epsilon": sorted(epsilons), "auc": table}


def curve_rows(root) -> List[dict]:
    rows = []
    for path in sorted(Path(root).glob("*/sweep.csv")):
        for r in read_sweep_csv(path):
            rows.append({"run": path.parent.name, "epsilon": r.epsilon, "mode": r.mode, "model": r.model,
                         "accuracy": r.accuracy, "n_examples": r.n_examples})
    return rows


def write_report(root, out_dir=None) -> dict:
    """Write ``summary.json/.csv``, ``detection_auc.json`` and ``curves.csv``; rerunning gives identical files."""
    root = Path(root)
    out = Path(out_dir or root)
    out.mkdir(parents=True, exist_ok=True)
    summary = summary_table(root)
    detection = detection_table(root)
    curves = curve_rows(root)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for r in summary["rows"]:
            writer.writerow(["" if r.get(k) is None else r[k] for k in SUMMARY_COLUMNS])
    (out / "detection_auc.json").write_text(json.dumps(detection, indent=2, sort_keys=True) + "\n")
    with open(out / "curves.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["run", "epsilon", "mode", "model", "accuracy", "n_examples"])
        writer.writeheader()
        writer.writerows(curves)
    return {"summary": summary, "detection": detection, "curves": len(curves)}


def write_pgm_grid(rows: List[np.ndarray], path, pad: int = 2) -> None:
    """Tile single-channel images in [0, 1] into a binary PGM; ``rows[i]`` is an (n, H, W) stack."""
    rows = [np.clip(np.asarray(r, dtype=np.float64).reshape(len(r), *np.shape(r)[-2:]), 0, 1) for r in rows]
    h, w = rows[0].shape[1:]
    ncol = max(len(r) for r in rows)
    canvas = np.zeros((len(rows) * (h + pad) + pad, ncol * (w + pad) + pad))
    for i, r in enumerate(rows):
        for j, img in enumerate(r):
            y0, x0 = pad + i * (h + pad), pad + j * (w + pad)
            canvas[y0:y0 + h, x0:x0 + w] = img
    data = np.round(canvas * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
