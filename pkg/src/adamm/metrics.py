"""Segmentation evaluation metrics and the 15-combination report table.

Empty-mask conventions follow common BraTS tooling: Dice/IoU of two empty
masks is 1.0, of one empty mask 0.0; HD95 of two empty masks is 0.0 and is
undefined (NaN) when exactly one mask is empty. Sensitivity is undefined for
an empty ground-truth mask.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .volumes import LabelVolume, derive_regions, enumerate_combinations

REGION_NAMES = ("WT", "TC", "ET")
METRIC_NAMES = ("dice", "iou", "sensitivity", "hd95")


def _as_bool(mask: np.ndarray, name: str) -> np.ndarray:
    mask = np.asarray(mask)
    return mask.astype(bool)


def _check_shapes(pred: np.ndarray, gt: np.ndarray):
    if pred.shape != gt.shape:
        raise ValueError(f"mask shape mismatch: {pred.shape} vs {gt.shape}")


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice overlap 2|X∩Y| / (|X|+|Y|); 1.0 if both masks are empty."""
    pred, gt = _as_bool(pred, "pred"), _as_bool(gt, "gt")
    _check_shapes(pred, gt)
    p, g = int(pred.sum()), int(gt.sum())
    if p + g == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / (p + g)


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union; 1.0 if both masks are empty."""
    pred, gt = _as_bool(pred, "pred"), _as_bool(gt, "gt")
    _check_shapes(pred, gt)
    union = int((pred | gt).sum())
    if union == 0:
        return 1.0
    return int((pred & gt).sum()) / union


def sensitivity(pred: np.ndarray, gt: np.ndarray) -> float:
    """TP / (TP + FN); NaN when the ground truth is empty."""
    pred, gt = _as_bool(pred, "pred"), _as_bool(gt, "gt")
    _check_shapes(pred, gt)
    positives = int(gt.sum())
    if positives == 0:
        return float("nan")
    return int((pred & gt).sum()) / positives


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background 6-neighbor.

    Voxels on the volume faces count their out-of-volume neighbors as
    background, so a mask touching the border contributes its face.
    """
    mask = _as_bool(mask, "mask")
    padded = np.pad(mask, 1, constant_values=False)
    interior = np.ones_like(mask)
    for axis in range(mask.ndim):
        lo = [slice(1, -1)] * mask.ndim
        hi = [slice(1, -1)] * mask.ndim
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        interior &= padded[tuple(lo)] & padded[tuple(hi)]
    return mask & ~interior


def hd95(pred: np.ndarray, gt: np.ndarray, spacing=(1.0, 1.0, 1.0), method="pooled") -> float:
    """95th-percentile symmetric boundary distance in physical units.

    Boundary points of both masks are compared with directed
    nearest-neighbor distances both ways. ``method="pooled"`` (default)
    takes the 95th percentile of the two directed distance sets pooled
    together; ``method="maxdir"`` takes the max of the per-direction
    percentiles. Percentiles interpolate linearly between order statistics.

    Returns 0.0 when both masks are empty and NaN when exactly one is.
    """
    pred, gt = _as_bool(pred, "pred"), _as_bool(gt, "gt")
    _check_shapes(pred, gt)
    p, g = pred.any(), gt.any()
    if not p and not g:
        return 0.0
    if p != g:
        return float("nan")
    spacing = np.asarray(spacing, dtype=np.float64)
    pts_a = np.argwhere(boundary_voxels(pred)) * spacing
    pts_b = np.argwhere(boundary_voxels(gt)) * spacing
    d_ab, _ = cKDTree(pts_b).query(pts_a, k=1)
    d_ba, _ = cKDTree(pts_a).query(pts_b, k=1)
    if method == "pooled":
        return float(np.percentile(np.concatenate([d_ab, d_ba]), 95))
    if method == "maxdir":
        return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))
    raise ValueError(f"unknown hd95 method {method!r}")


@dataclass
class RegionMetrics:
    dice: float
    iou: float
    sensitivity: float
    hd95: float

    def as_dict(self):
        return {m: getattr(self, m) for m in METRIC_NAMES}


@dataclass
class MetricsRecord:
    """Four metrics for each of the WT/TC/ET regions of one case."""

    wt: RegionMetrics
    tc: RegionMetrics
    et: RegionMetrics

    def region(self, name: str) -> RegionMetrics:
        return getattr(self, name.lower())


def evaluate_case(seg_probs: np.ndarray, labels: LabelVolume, threshold: float = 0.5,
                  spacing=(1.0, 1.0, 1.0), hd95_method: str = "pooled") -> MetricsRecord:
    """Binarize a (3, D, H, W) probability map and score WT/TC/ET regions."""
    seg_probs = np.asarray(seg_probs)
    if seg_probs.shape != labels.shape:
        raise ValueError(f"shape mismatch: {seg_probs.shape} vs {labels.shape}")
    pred_bin = LabelVolume((seg_probs > threshold).astype(np.float32))
    pred_regions = derive_regions(pred_bin)
    gt_regions = derive_regions(labels)
    out = {}
    for name in REGION_NAMES:
        pm = getattr(pred_regions, name.lower())
        gm = getattr(gt_regions, name.lower())
        out[name.lower()] = RegionMetrics(
            dice=dice(pm, gm),
            iou=iou(pm, gm),
            sensitivity=sensitivity(pm, gm),
            hd95=hd95(pm, gm, spacing=spacing, method=hd95_method),
        )
    return MetricsRecord(**out)


@dataclass
class SweepTable:
    """Per-combination metrics plus Avg./Std. columns per region and metric."""

    rows: list  # (code, MetricsRecord), in enumerate_combinations order
    avg: dict  # (region, metric) -> float
    std: dict  # (region, metric) -> float
    hd95_excluded: dict  # region -> count of undefined hd95 entries

    def row(self, code: str) -> MetricsRecord:
        for c, rec in self.rows:
            if c == code:
                return rec
        raise KeyError(code)


def sweep_aggregate(records) -> SweepTable:
    """Aggregate one MetricsRecord per combination into a report table.

    Args:
        records: mapping code -> MetricsRecord covering all 15 combinations,
            or an iterable of (code, MetricsRecord) pairs.

    Means and standard deviations are taken across the 15 combinations
    (population std). Undefined (NaN) hd95 entries are left out of the
    aggregates; their count is reported per region.
    """
    if hasattr(records, "items"):
        records = dict(records)
    else:
        records = dict(records)
    order = [c.code for c in enumerate_combinations()]
    missing = [c for c in order if c not in records]
    if missing:
        raise ValueError(f"missing combinations: {missing}")
    rows = [(code, records[code]) for code in order]

    avg, std, excluded = {}, {}, {}
    for region in REGION_NAMES:
        excluded[region] = 0
        for metric in METRIC_NAMES:
            values = np.array([getattr(rec.region(region), metric) for _, rec in rows])
            keep = ~np.isnan(values)
            if metric == "hd95":
                excluded[region] = int((~keep).sum())
            values = values[keep]
            avg[(region, metric)] = float(values.mean()) if values.size else float("nan")
            std[(region, metric)] = float(values.std()) if values.size else float("nan")
    return SweepTable(rows=rows, avg=avg, std=std, hd95_excluded=excluded)


def table_to_csv(table: SweepTable) -> str:
    """One row per combination x region, then Avg./Std. summary rows."""
    buf = io.StringIO()
    buf.write("combination,region,dice,iou,sensitivity,hd95\n")
    for code, rec in table.rows:
        for region in REGION_NAMES:
            m = rec.region(region)
            buf.write(
                f"{code},{region},{m.dice:.6f},{m.iou:.6f},{m.sensitivity:.6f},{m.hd95:.6f}\n"
            )
    for region in REGION_NAMES:
        for label, stats in (("Avg.", table.avg), ("Std.", table.std)):
            vals = ",".join(f"{stats[(region, met)]:.6f}" for met in METRIC_NAMES)
            buf.write(f"{label},{region},{vals}\n")
    return buf.getvalue()


def table_to_text(table: SweepTable) -> str:
    """Fixed-width table: combinations as columns, Avg./Std. at the right."""
    codes = [code for code, _ in table.rows]
    buf = io.StringIO()
    header = f"{'region/metric':<18}" + "".join(f"{c:>7}" for c in codes)
    header += f"{'Avg.':>9}{'Std.':>9}"
    buf.write(header + "\n")
    buf.write("-" * len(header) + "\n")
    for region in REGION_NAMES:
        for metric in METRIC_NAMES:
            cells = []
            for _, rec in table.rows:
                v = getattr(rec.region(region), metric)
                cells.append("    n/a" if math.isnan(v) else f"{v:7.3f}")
            line = f"{region + ' ' + metric:<18}" + "".join(cells)
            line += f"{table.avg[(region, metric)]:9.3f}{table.std[(region, metric)]:9.3f}"
            buf.write(line + "\n")
        if table.hd95_excluded[region]:
            buf.write(
                f"{region} hd95: {table.hd95_excluded[region]} undefined case(s) excluded\n"
            )
    return buf.getvalue()
