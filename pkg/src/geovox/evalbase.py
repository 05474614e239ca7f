"""Rule-based reconstruction baselines and categorical volume metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import AIR, N_CATEGORIES
from .errors import BaselineError, ShapeError
from .sparsity import MASK, ConditionVolume

K = N_CATEGORIES


def _majority(labels: np.ndarray) -> int:
    counts = np.bincount(labels.astype(np.int64), minlength=K + 1)
    return int(np.argmax(counts))  # argmax returns the first (lowest id) on ties


def baseline_depthwise(cond: ConditionVolume) -> np.ndarray:
    """Fill each depth slice with the majority of its observed non-air labels."""
    lab = cond.labels
    known = lab != MASK
    if not known.any():
        raise BaselineError("condition has no labeled voxels")
    nz = lab.shape[2]
    slice_major = np.zeros(nz, dtype=np.int64)
    for z in range(nz):
        s = lab[:, :, z]
        obs = s[(s != MASK) & (s != AIR)]
        if obs.size:
            slice_major[z] = _majority(obs)
    have = np.nonzero(slice_major)[0]
    if have.size == 0:
        fill = np.full(nz, _majority(lab[known]), dtype=np.int64)
    else:
        fill = slice_major.copy()
        for z in range(nz):
            if fill[z]:
                continue
            below = have[have < z]
            fill[z] = slice_major[below[-1]] if below.size else slice_major[have[have > z][0]]
    out = np.where(known, lab, fill[None, None, :])
    return out.astype(np.uint8)


def baseline_polygonal(cond: ConditionVolume) -> np.ndarray:
    """Copy each unobserved voxel from the laterally nearest borehole at the same depth.

    Distance ties go to the borehole with the smaller (x, then y).
    """
    if not cond.borehole_columns:
        raise BaselineError("polygonal baseline needs at least one borehole")
    lab = cond.labels
    nx, ny, _ = lab.shape
    holes = np.array(sorted(cond.borehole_columns), dtype=np.int64)
    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    d2 = (ix[..., None] - holes[:, 0]) ** 2 + (iy[..., None] - holes[:, 1]) ** 2
    nearest = np.argmin(d2, axis=2)  # first minimum = smallest (x, y) among ties
    src = lab[holes[nearest, 0], holes[nearest, 1], :]
    out = np.where(lab != MASK, lab, src)
    if np.any(out == MASK):
        raise BaselineError("borehole columns are not fully observed")
    return out.astype(np.uint8)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def confusion_matrix(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """9x9 counts, rows = truth category, columns = predicted category."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    idx = (truth.astype(np.int64).ravel() - 1) * K + (pred.astype(np.int64).ravel() - 1)
    return np.bincount(idx, minlength=K * K).reshape(K, K)


@dataclass
class MetricsReport:
    confusion: np.ndarray
    acc_incl_air: float
    acc_excl_air: float
    miou_excl_air: float
    recall: np.ndarray  # per category, nan where the category is absent from truth
    iou: np.ndarray  # per category, nan where union is empty
    proportions: np.ndarray

    def to_dict(self) -> dict:
        def clean(a):
            return [None if not np.isfinite(v) else float(v) for v in a]

        return {
            "acc_incl_air": self.acc_incl_air,
            "acc_excl_air": self.acc_excl_air,
            "miou_excl_air": self.miou_excl_air,
            "per_category": {
                str(k + 1): {"proportion": float(self.proportions[k]), "recall": clean(self.recall)[k],
                             "iou": clean(self.iou)[k]}
                for k in range(K)
            },
            "confusion": self.confusion.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return metrics_from_confusion(np.asarray(d["confusion"], dtype=np.int64))


def metrics_from_confusion(cm: np.ndarray, air_id: int = AIR) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    diag = np.diag(cm).astype(np.float64)
    rows = cm.sum(axis=1).astype(np.float64)
    cols = cm.sum(axis=0).astype(np.float64)
    a = air_id - 1
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = diag / rows
        iou = diag / (rows + cols - diag)
    non_air_rows = np.delete(np.arange(K), a)
    n_excl = rows[non_air_rows].sum()
    acc_excl = diag[non_air_rows].sum() / n_excl if n_excl else float("nan")
    present = [k for k in non_air_rows if rows[k] > 0]
    # sequential sum in category order keeps the value reproducible to the last bit
    miou = float(sum(float(iou[k]) for k in present) / len(present)) if present else float("nan")
    return MetricsReport(
        confusion=cm,
        acc_incl_air=float(diag.sum() / total) if total else float("nan"),
        acc_excl_air=float(acc_excl),
        miou_excl_air=miou,
        recall=recall,
        iou=iou,
        proportions=rows / total if total else np.zeros(K),
    )


def compute_metrics(pred: np.ndarray, truth: np.ndarray, air_id: int = AIR) -> MetricsReport:
    return metrics_from_confusion(confusion_matrix(pred, truth), air_id)


def aggregate(reports: list[MetricsReport]) -> MetricsReport:
    """Pool confusion matrices over cases (voxel-weighted), in list order."""
    cm = np.zeros((K, K), dtype=np.int64)
    for r in reports:
        cm += r.confusion
    return metrics_from_confusion(cm)
