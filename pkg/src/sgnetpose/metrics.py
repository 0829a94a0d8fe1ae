"""Pixel-space displacement metrics with best-of-K selection.

All errors are squared pixels. Horizons beyond the prediction length are
capped, so with pred_len < 45 ``mse_45`` covers the whole horizon.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ShapeError

HORIZONS = (15, 30, 45)
CORNERS = ("top-left", "centroid")
METRIC_NAMES = ("mse_15", "mse_30", "mse_45", "fmse", "cmse", "cfmse")
METRIC_HEADER = ("metric", "value", "unit", "split", "config_hash")


def corner_points(boxes: np.ndarray, corner: str = "top-left") -> np.ndarray:
    """[..., 4] boxes -> [..., 2] tracked point."""
    boxes = np.asarray(boxes, dtype=np.float64)
    if corner == "top-left":
        return boxes[..., :2]
    if corner == "centroid":
        return (boxes[..., :2] + boxes[..., 2:]) / 2
    raise ConfigError(f"corner must be one of {CORNERS}, got {corner!r}")


def best_of_k(predictions: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pick, per sample, the candidate with the lowest full-horizon MSE.

    predictions [B, K, L, 4], targets [B, L, 4] (same units) ->
    (chosen [B, L, 4], index [B]). Ties go to the lowest k.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.ndim != 4 or predictions.shape[1] < 1:
        raise ShapeError(f"predictions must be [B, K>=1, L, 4], got {predictions.shape}")
    if predictions.shape[:1] + predictions.shape[2:] != targets.shape:
        raise ShapeError(f"predictions {predictions.shape} do not match targets {targets.shape}")
    err = ((predictions - targets[:, None]) ** 2).mean(axis=(2, 3))
    index = err.argmin(axis=1)
    return predictions[np.arange(len(index)), index], index


def per_sample_metrics(pred_px: np.ndarray, gt_px: np.ndarray, corner: str = "top-left") -> dict[str, np.ndarray]:
    """Each metric for every sample: [B, L, 4] chosen predictions vs ground truth."""
    pred_px = np.asarray(pred_px, dtype=np.float64)
    gt_px = np.asarray(gt_px, dtype=np.float64)
    if pred_px.shape != gt_px.shape or pred_px.ndim != 3 or pred_px.shape[-1] != 4:
        raise ShapeError(f"expected matching [B, L, 4] arrays, got {pred_px.shape} and {gt_px.shape}")
    sq = (pred_px - gt_px) ** 2
    csq = (corner_points(pred_px, corner) - corner_points(gt_px, corner)) ** 2
    length = sq.shape[1]
    out = {f"mse_{h}": sq[:, :min(h, length)].mean(axis=(1, 2)) for h in HORIZONS}
    out["fmse"] = sq[:, -1].mean(axis=1)
    out["cmse"] = csq.mean(axis=(1, 2))
    out["cfmse"] = csq[:, -1].mean(axis=1)
    return out


@dataclass
class MetricsReport:
    mse_15: float
    mse_30: float
    mse_45: float
    fmse: float
    cmse: float
    cfmse: float
    count: int
    config_hash: str = ""
    split: str = "test"
    corner: str = "top-left"

    def values(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRIC_HEADER)
        for name, value in self.values().items():
            # the corner rows name the tracked point, since "centroid" MSE defaults to the top-left corner
            unit = f"px^2 {self.corner}" if name.startswith("c") else "px^2"
            writer.writerow([name, f"{value:.6g}", unit, self.split, self.config_hash])
        writer.writerow(["count", str(self.count), "samples", self.split, self.config_hash])
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv(), encoding="utf-8")
        return path


class MetricAccumulator:
    """Collects per-sample metrics; the final means use exactly rounded sums,
    so the report does not depend on sample or batch order."""

    def __init__(self, corner: str = "top-left"):
        corner_points(np.zeros(4), corner)
        self.corner = corner
        self.values = {name: [] for name in METRIC_NAMES}

    @property
    def count(self) -> int:
        return len(self.values["mse_45"])

    def add(self, pred_px: np.ndarray, gt_px: np.ndarray) -> None:
        per = per_sample_metrics(pred_px, gt_px, self.corner)
        for name in METRIC_NAMES:
            self.values[name].extend(per[name].tolist())

    def report(self, config_hash: str = "", split: str = "test") -> MetricsReport:
        n = self.count
        if n == 0:
            raise DataError(f"cannot report metrics for an empty {split} split")
        means = {k: math.fsum(v) / n for k, v in self.values.items()}
        return MetricsReport(**means, count=n, config_hash=config_hash, split=split, corner=self.corner)
