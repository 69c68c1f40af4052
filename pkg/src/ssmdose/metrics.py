"""Dose Score, DVH Score, Homogeneity Index and DVH curves.

Conventions (the metrics are swappable; these are the defaults):

* Dose Score: mean absolute voxel error inside the body mask.
* ``D_x``: the minimum dose received by the hottest x% of a structure, i.e.
  the ``(100 - x)``-th percentile of its voxel doses with inclusive linear
  interpolation between order statistics.
* DVH Score: mean absolute difference of DVH summary metrics, over all
  metrics of all structures. Targets contribute D1, D95, D99; organs at risk
  contribute the mean dose and D1.
* HI: ``(D2 - D98) / D50`` over the PTV.

Sums use :func:`math.fsum` so results are correctly rounded and do not depend
on summation order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DVH_LEVELS = 256
TARGET_METRICS = ("D1", "D95", "D99")
OAR_METRICS = ("mean", "D1")


class EmptyStructureError(ValueError):
    pass


def _masked(dose, mask, name: str) -> np.ndarray:
    dose = np.asarray(dose, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    dose = dose.reshape(mask.shape) if dose.size == mask.size else dose
    if dose.shape != mask.shape:
        raise ValueError(f"{name}: dose shape {dose.shape} != mask shape {mask.shape}")
    if not mask.any():
        raise EmptyStructureError(f"{name}: empty mask")
    return dose[mask]


def percentile(values, q: float) -> float:
    """Inclusive linear-interpolation percentile, q in [0, 100]."""
    s = np.sort(np.asarray(values, dtype=np.float64).ravel())
    pos = (s.size - 1) * (q / 100.0)
    lo = int(math.floor(pos))
    hi = min(lo + 1, s.size - 1)
    frac = pos - lo
    return float(s[lo] + (s[hi] - s[lo]) * frac)


def d_x(values, x: float) -> float:
    """Minimum dose to the hottest ``x`` percent."""
    return percentile(values, 100.0 - x)


def dose_score(pred, gt, body_mask) -> float:
    p = _masked(pred, body_mask, "dose_score")
    g = _masked(gt, body_mask, "dose_score")
    return math.fsum(np.abs(p - g).tolist()) / p.size


@dataclass
class DvhCurve:
    thresholds: np.ndarray
    volume_fraction: np.ndarray


def dvh_curve(dose, mask, levels: int = DVH_LEVELS, max_dose: float | None = None) -> DvhCurve:
    """Fraction of structure voxels receiving at least each of ``levels`` uniform doses in [0, max].

    ``max_dose`` defaults to the maximum of the whole dose map.
    """
    vals = _masked(dose, mask, "dvh_curve")
    top = float(np.max(dose)) if max_dose is None else float(max_dose)
    thresholds = np.linspace(0.0, top, levels)
    s = np.sort(vals)
    # voxels >= d  ==  n - (number strictly below d)
    below = np.searchsorted(s, thresholds, side="left")
    return DvhCurve(thresholds, (s.size - below) / s.size)


def dvh_metrics(dose, mask, kind: str) -> dict[str, float]:
    vals = _masked(dose, mask, "dvh_metrics")
    if kind == "target":
        return {"D1": d_x(vals, 1), "D95": d_x(vals, 95), "D99": d_x(vals, 99)}
    if kind == "oar":
        return {"mean": math.fsum(vals.tolist()) / vals.size, "D1": d_x(vals, 1)}
    raise ValueError(f"dvh_metrics: kind must be 'target' or 'oar', got {kind!r}")


def dvh_score(pred, gt, structures: Sequence[tuple[np.ndarray, str]]) -> float:
    if not structures:
        raise ValueError("dvh_score: need at least one structure")
    diffs = []
    for mask, kind in structures:
        mp, mg = dvh_metrics(pred, mask, kind), dvh_metrics(gt, mask, kind)
        diffs.extend(abs(mp[k] - mg[k]) for k in mp)
    return math.fsum(diffs) / len(diffs)


def homogeneity_index(dose, ptv_mask) -> float:
    vals = _masked(dose, ptv_mask, "homogeneity_index")
    d50 = d_x(vals, 50)
    if d50 == 0:
        raise ValueError("homogeneity_index: D50 is zero, index undefined")
    return (d_x(vals, 2) - d_x(vals, 98)) / d50


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    dose_score: float
    dvh_score: float
    hi: float
    per_structure: dict[str, dict[str, float]] = field(default_factory=dict)


def structures_of(structure_image: np.ndarray, names: Iterable[str]) -> list[tuple[str, np.ndarray, str]]:
    """(name, mask, kind) for the PTV and each non-empty organ mask of a structure stack."""
    out = []
    for ch, name in enumerate(names):
        if ch == 0:
            continue
        mask = structure_image[ch] > 0.5
        if mask.any():
            out.append((name, mask, "target" if ch == 1 else "oar"))
    return out


def evaluate(pred, gt, body_mask, structure_image, names: Sequence[str]) -> MetricReport:
    structs = structures_of(structure_image, names)
    ptv = structure_image[1] > 0.5
    per = {}
    for name, mask, kind in structs:
        mp, mg = dvh_metrics(pred, mask, kind), dvh_metrics(gt, mask, kind)
        per[name] = {k: abs(mp[k] - mg[k]) for k in mp}
    return MetricReport(
        dose_score=dose_score(pred, gt, body_mask),
        dvh_score=dvh_score(pred, gt, [(m, k) for _, m, k in structs]),
        hi=homogeneity_index(pred, ptv),
        per_structure=per,
    )


def write_metric_csv(path, rows: Sequence[tuple[str, MetricReport]]) -> dict[str, tuple[float, float]]:
    """Per-sample rows then ``mean`` and ``std`` rows; returns {metric: (mean, std)}."""
    cols = ("dose_score", "dvh_score", "hi")
    summary = {}
    for c in cols:
        vals = np.array([getattr(r, c) for _, r in rows])
        summary[c] = (float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("sample_id",) + cols)
        for sid, r in rows:
            w.writerow((sid,) + tuple(f"{getattr(r, c):.6f}" for c in cols))
        w.writerow(("mean",) + tuple(f"{summary[c][0]:.6f}" for c in cols))
        w.writerow(("std",) + tuple(f"{summary[c][1]:.6f}" for c in cols))
    return summary


def write_dvh_csv(path, curves: Sequence[tuple[str, str, DvhCurve]]) -> None:
    """Rows of (sample_id, structure, threshold, fraction)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("sample_id", "structure", "threshold", "fraction"))
        for sid, name, c in curves:
            for d, v in zip(c.thresholds, c.volume_fraction):
                w.writerow((sid, name, f"{d:.6f}", f"{v:.6f}"))
