"""Reference-free IoU estimation from mean calibrated confidence."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .uncertainty import bootstrap_pearson


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def n_pred_pos(self) -> int:
        return self.tp + self.fp

    @property
    def n_pred_neg(self) -> int:
        return self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / (self.tp + self.fp + self.fn + self.tn)

    @classmethod
    def from_masks(cls, pred, ref) -> "ConfusionCounts":
        pred = np.asarray(pred).astype(bool)
        ref = np.asarray(ref).astype(bool)
        if pred.shape != ref.shape:
            raise ValueError(f"mask shapes differ: {pred.shape} vs {ref.shape}")
        tp = int(np.count_nonzero(pred & ref))
        fp = int(np.count_nonzero(pred & ~ref))
        fn = int(np.count_nonzero(~pred & ref))
        return cls(tp, fp, fn, pred.size - tp - fp - fn)


def iou_from_counts(c: ConfusionCounts) -> float:
    """TP / (TP + FP + FN)."""
    union = c.tp + c.fp + c.fn
    if union == 0:
        raise ValueError("IoU undefined: prediction and reference are both empty")
    return c.tp / union


def estimate_iou(mean_conf: float, n_p: int, n_n: int, num_classes: int = 2, beta: float = 1.0) -> float:
    """Estimate IoU without reference data.

    ``n_p``/``n_n`` are predicted positive/negative pixel counts. Accuracy is
    approximated by ``max(mean_conf, 1/C)`` and false negatives by
    ``(1 - accuracy)**beta * n_n``; ``beta = 1`` is the parameter-free relation.
    """
    if n_p < 0 or n_n < 0:
        raise ValueError("counts must be non-negative")
    if n_p + n_n == 0:
        raise ValueError("no pixels")
    if not 0.0 <= mean_conf <= 1.0:
        raise ValueError("mean_conf must lie in [0, 1]")
    acc = max(float(mean_conf), 1.0 / num_classes)
    err = 1.0 - acc
    if err == 0.0:
        return 1.0
    fn = err**beta * n_n
    est = 1.0 - err * (n_p + n_n) / (n_p + fn)
    if est < 0:
        warnings.warn(f"negative IoU estimate {est:.3f} (mean_conf={mean_conf:.3f})", RuntimeWarning, stacklevel=2)
    return est


@dataclass
class EstimatorReport:
    n: int
    rmse: float
    r2: float
    pearson: float
    pearson_lo: float
    pearson_hi: float
    mean_bias: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def evaluate_estimator(pairs, n_boot: int = 1000, seed: int = 0) -> EstimatorReport:
    """Agreement between (estimated, actual) IoU pairs.

    ``r2`` is the coefficient of determination of the estimates as
    predictions of the actual values; ``mean_bias`` is mean(estimated - actual).
    """
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) < 3:
        raise ValueError("need at least 3 (estimated, actual) pairs")
    est, act = arr[:, 0], arr[:, 1]
    ss_tot = np.sum((act - act.mean()) ** 2)
    if ss_tot == 0:
        raise ValueError("actual IoU values are constant: R^2 undefined")
    resid = est - act
    r2 = 1.0 - np.sum(resid**2) / ss_tot
    if np.ptp(est) == 0:
        r, lo, hi = float("nan"), float("nan"), float("nan")
    else:
        r, lo, hi = bootstrap_pearson(est, act, n_boot, seed)
    return EstimatorReport(len(arr), float(np.sqrt(np.mean(resid**2))), float(r2), r, lo, hi, float(resid.mean()))


FIELDS = ("tile_id", "mean_conf", "n_p", "n_n", "est_iou", "actual_iou")


def write_estimates_csv(rows, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r[k]) for k in FIELDS})


def plot_estimates(rows, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [r for r in rows if r.get("actual_iou") is not None]
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    if rows:
        sizes = np.array([r["n_p"] for r in rows], dtype=float)
        sizes = 10 + 60 * sizes / max(sizes.max(), 1)
        ax.scatter([r["actual_iou"] for r in rows], [r["est_iou"] for r in rows], s=sizes, alpha=0.6)
    ax.plot([0, 1], [0, 1], "k--", lw=1)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("observed IoU")
    ax.set_ylabel("estimated IoU")
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
