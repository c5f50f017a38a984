"""Lip-sync and facial-dynamics errors on vertex sequences shaped ``(T, V, 3)``."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

UNITS = {"lve": "m^2", "mve": "m", "ufve": "m", "fdd": "m", "lvd": "m"}


class MetricError(ValueError):
    pass


def _check(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[-1] != 3:
        raise MetricError(f"pred/gt must share a (T, V, 3) shape, got {pred.shape} and {gt.shape}")
    return pred, gt


def _mask(mask, name):
    mask = np.asarray(mask, dtype=np.int64).reshape(-1)
    if mask.size == 0:
        raise MetricError(f"{name} mask is empty")
    return mask


def lve(pred, gt, lip_mask) -> float:
    """Mean over frames of the largest squared lip-vertex distance."""
    pred, gt = _check(pred, gt)
    m = _mask(lip_mask, "lip")
    sq = np.sum((pred[:, m] - gt[:, m]) ** 2, axis=-1)
    return float(sq.max(axis=1).mean())


def lvd(pred, gt, lip_mask) -> float:
    """Mean over frames of the largest lip-vertex distance."""
    pred, gt = _check(pred, gt)
    m = _mask(lip_mask, "lip")
    d = np.linalg.norm(pred[:, m] - gt[:, m], axis=-1)
    return float(d.max(axis=1).mean())


def mve(pred, gt) -> float:
    pred, gt = _check(pred, gt)
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def ufve(pred, gt, upper_mask) -> float:
    pred, gt = _check(pred, gt)
    m = _mask(upper_mask, "upper-face")
    return float(np.linalg.norm(pred[:, m] - gt[:, m], axis=-1).mean())


def dynamics(seq, mask) -> np.ndarray:
    """Per masked vertex: std over time of |position - temporal mean position|."""
    seq = np.asarray(seq, dtype=np.float64)[:, mask]
    disp = np.linalg.norm(seq - seq.mean(axis=0, keepdims=True), axis=-1)
    return disp.std(axis=0)


def fdd(pred, gt, upper_mask) -> float:
    """Mean over upper-face vertices of (pred dynamics - gt dynamics); signed."""
    pred, gt = _check(pred, gt)
    if pred.shape[0] < 2:
        raise MetricError("fdd needs at least two frames")
    m = _mask(upper_mask, "upper-face")
    return float((dynamics(pred, m) - dynamics(gt, m)).mean())


def motion_std_map(sequences, template=None) -> np.ndarray:
    """Per-vertex std, over all frames of all sequences, of the displacement norm.

    Displacements are taken against ``template`` when given, else against each
    sequence's first frame.
    """
    norms = []
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.float64)
        ref = seq[0] if template is None else np.asarray(template, dtype=np.float64)
        norms.append(np.linalg.norm(seq - ref, axis=-1))
    if not norms:
        raise MetricError("motion_std_map needs at least one sequence")
    return np.concatenate(norms, axis=0).std(axis=0)


@dataclass
class MetricsReport:
    lve: float
    mve: float
    ufve: float
    fdd: float
    lvd: float
    convention: str = ""
    split: str = ""
    frame_errors: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in UNITS}


def evaluate_sequence(pred, gt, lip_mask, upper_mask, convention: str = "", split: str = "") -> MetricsReport:
    pred, gt = _check(pred, gt)
    m = _mask(lip_mask, "lip")
    return MetricsReport(
        lve=lve(pred, gt, lip_mask), mve=mve(pred, gt), ufve=ufve(pred, gt, upper_mask),
        fdd=fdd(pred, gt, upper_mask) if pred.shape[0] >= 2 else 0.0, lvd=lvd(pred, gt, lip_mask),
        convention=convention, split=split,
        frame_errors=np.sum((pred[:, m] - gt[:, m]) ** 2, axis=-1).max(axis=1),
    )


def average_reports(reports: list[MetricsReport], convention: str = "", split: str = "") -> MetricsReport:
    """Sequence-level mean of each metric."""
    if not reports:
        raise MetricError("no reports to average")
    vals = {k: float(np.mean([getattr(r, k) for r in reports])) for k in UNITS}
    return MetricsReport(**vals, convention=convention, split=split,
                         frame_errors=np.concatenate([r.frame_errors for r in reports]))


def write_report_csv(path, reports: list[MetricsReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value", "units", "convention", "split"])
        for r in reports:
            for k, unit in UNITS.items():
                w.writerow([k, repr(getattr(r, k)), unit, r.convention, r.split])


def write_std_map_csv(path, std_map: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vertex_index", "std_m"])
        for i, v in enumerate(np.asarray(std_map)):
            w.writerow([i, repr(float(v))])
