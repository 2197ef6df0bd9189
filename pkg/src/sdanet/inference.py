"""Tiled prediction, dataset evaluation, heatmap export and raw density files."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image

from .checkpoint import load_checkpoint
from .data import DensityMap, load_image, load_sample, read_index, reassemble, tile_for_inference
from .errors import DataError
from .losses import Metrics, evaluate_metrics
from .model import ModelParams, forward

log = logging.getLogger(__name__)

DENSITY_FORMAT = "sdanet-density"


@dataclass
class Prediction:
    density: DensityMap
    count: float
    per_tile_counts: List[float] = field(default_factory=list)


def predict_array(params: ModelParams, image: np.ndarray) -> Prediction:
    """Run the fine head on each quarter tile of a ``(C, H, W)`` image and stitch."""
    if image.shape[0] != params.config.input_channels:
        raise ValueError(f"image has {image.shape[0]} channels, model expects "
                         f"{params.config.input_channels}")
    tiles, layout = tile_for_inference(image)
    maps = [forward(params, t[None]).D_F.data[0, 0] for t in tiles]
    grid = reassemble(maps, layout)
    return Prediction(DensityMap(grid), float(grid.sum()), [float(m.sum()) for m in maps])


def predict(checkpoint_path, image_path) -> Prediction:
    params, config = load_checkpoint(checkpoint_path)
    return predict_array(params, load_image(image_path, config.input_channels))


@dataclass
class EvalReport:
    metrics: Optional[Metrics]
    rows: List[dict]
    n_failed: int

    @property
    def partial(self) -> bool:
        return self.n_failed > 0

    def to_dict(self) -> dict:
        return {"rows": self.rows,
                "summary": {**(self.metrics.to_dict() if self.metrics else {"mae": None, "mse": None, "n": 0}),
                            "n_failed": self.n_failed, "partial": self.partial}}


def evaluate_params(params: ModelParams, annotation_paths) -> EvalReport:
    """Per-image prediction; failures are recorded per row rather than raised."""
    if not annotation_paths:
        raise DataError("dataset split is empty; nothing to evaluate")
    rows, pairs, failed = [], [], 0
    for path in annotation_paths:
        try:
            sample = load_sample(path, params.config.input_channels)
            pred = predict_array(params, sample.image)
        except (DataError, ValueError) as exc:
            log.warning("evaluation failed for %s: %s", path, exc)
            rows.append({"image_id": os.path.basename(path), "gt_count": None,
                         "pred_count": None, "error": str(exc)})
            failed += 1
            continue
        gt = float(sample.heads.shape[0])
        rows.append({"image_id": sample.image_id, "gt_count": gt,
                     "pred_count": pred.count, "error": None})
        pairs.append((pred.count, gt))
    metrics = evaluate_metrics(pairs) if pairs else None
    return EvalReport(metrics, rows, failed)


def evaluate(checkpoint_path, dataset_index, split: str = "test", report_path=None) -> EvalReport:
    params, _ = load_checkpoint(checkpoint_path)
    report = evaluate_params(params, read_index(dataset_index, split))
    if report_path is not None:
        with open(report_path, "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, indent=1)
    return report


def metrics_from_report(report: dict) -> Metrics:
    return evaluate_metrics((r["pred_count"], r["gt_count"])
                            for r in report["rows"] if r["error"] is None)


def heatmap_pixels(density) -> np.ndarray:
    grid = np.asarray(getattr(density, "grid", density), dtype=np.float64)
    top = grid.max() if grid.size else 0.0
    if not top > 0:
        return np.zeros(grid.shape, dtype=np.uint8)
    # floor keeps 255 exclusive to entries equal to the maximum
    return np.floor(np.clip(grid, 0.0, None) / top * 255.0).astype(np.uint8)


def export_heatmap(density, path):
    """8-bit grayscale image scaled so the map maximum becomes 255."""
    Image.fromarray(heatmap_pixels(density), mode="L").save(path)


def write_density(path, density):
    grid = np.asarray(getattr(density, "grid", density), dtype=np.float64)
    H, W = grid.shape
    header = {"format": DENSITY_FORMAT, "height": H, "width": W, "count": float(grid.sum())}
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        f.write(np.ascontiguousarray(grid, dtype="<f4").tobytes())


def read_density(path) -> Tuple[dict, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    nl = data.find(b"\n")
    if nl < 0:
        raise DataError(f"{path}: missing density header")
    header = json.loads(data[:nl])
    H, W = header["height"], header["width"]
    blob = data[nl + 1:]
    if len(blob) != 4 * H * W:
        raise DataError(f"{path}: blob has {len(blob)} bytes, expected {4 * H * W}")
    return header, np.frombuffer(blob, dtype="<f4").reshape(H, W).astype(np.float64)
