"""Entropy-based confidence, kernel-ridge confidence calibration, ECE and
reliability diagrams."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PROB_FLOOR = 1e-12


class CalibrationError(ValueError):
    pass


def confidence(probs, axis: int = 0) -> np.ndarray:
    """``1 + sum_c p_c log_C p_c`` per pixel, with ``0 log 0 = 0``.

    ``probs`` holds class probabilities along ``axis``.
    """
    p = np.asarray(probs, dtype=np.float64)
    c = p.shape[axis]
    if c < 2:
        raise ValueError("need at least two classes")
    if np.any(np.abs(p.sum(axis=axis) - 1.0) > 1e-6):
        raise ValueError("probabilities are not normalized along the class axis")
    plogp = np.where(p > 0, p * np.log(np.maximum(p, PROB_FLOOR)), 0.0)
    conf = 1.0 + plogp.sum(axis=axis) / np.log(c)
    return np.clip(conf, 0.0, 1.0)


def _bin_index(conf: np.ndarray, bins: int) -> np.ndarray:
    return np.minimum((conf * bins).astype(np.int64), bins - 1)


def _binned(conf, correct, bins: int):
    conf = np.asarray(conf, dtype=np.float64).ravel()
    correct = np.asarray(correct, dtype=np.float64).ravel()
    if conf.size == 0:
        raise ValueError("empty input")
    if conf.shape != correct.shape:
        raise ValueError("conf and correct differ in length")
    if np.any((conf < 0) | (conf > 1)):
        raise ValueError("confidences must lie in [0, 1]")
    idx = _bin_index(conf, bins)
    count = np.bincount(idx, minlength=bins).astype(np.float64)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=bins)
    occupied = count > 0
    return count, conf_sum, acc_sum, occupied


def ece(conf, correct, bins: int = 100) -> float:
    """Expected calibration error over ``bins`` equally spaced confidence bins."""
    count, conf_sum, acc_sum, occ = _binned(conf, correct, bins)
    n = count.sum()
    gap = np.abs(acc_sum[occ] / count[occ] - conf_sum[occ] / count[occ])
    return float(np.sum(count[occ] / n * gap))


@dataclass
class ReliabilityBin:
    bin_center: float
    mean_conf: float
    accuracy: float
    fraction: float


def reliability_data(conf, correct, bins: int = 100) -> list[ReliabilityBin]:
    count, conf_sum, acc_sum, occ = _binned(conf, correct, bins)
    n = count.sum()
    rows = []
    for i in np.flatnonzero(occ):
        rows.append(ReliabilityBin((i + 0.5) / bins, conf_sum[i] / count[i], acc_sum[i] / count[i], count[i] / n))
    return rows


def write_reliability_csv(rows, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_center", "mean_conf", "accuracy", "fraction"])
        for r in rows:
            w.writerow([f"{r.bin_center:.6f}", f"{r.mean_conf:.6f}", f"{r.accuracy:.6f}", f"{r.fraction:.8f}"])


def plot_reliability(rows, path, title: str = "", ece_value: float | None = None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    width = rows[1].bin_center - rows[0].bin_center if len(rows) > 1 else 0.01
    ax.bar([r.bin_center for r in rows], [r.accuracy for r in rows], width=min(width, 0.05),
           color="tab:blue", alpha=0.7, label="accuracy")
    ax.plot([0, 1], [0, 1], "k--", lw=1, label="ideal")
    ax.plot([r.mean_conf for r in rows], [r.accuracy for r in rows], ".", color="tab:red", ms=3, label="bins")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("confidence")
    ax.set_ylabel("accuracy")
    if ece_value is not None:
        title = f"{title} ECE={ece_value:.4f}".strip()
    ax.set_title(title)
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)


# --------------------------------------------------------------------------
# calibration

def _rbf(a, b, bandwidth):
    d = a[:, None] - b[None, :]
    return np.exp(-0.5 * (d / bandwidth) ** 2)


def _pav(y: np.ndarray) -> np.ndarray:
    """Pool-adjacent-violators for a non-decreasing fit with unit weights."""
    vals, wts, sizes = [], [], []
    for v in y:
        vals.append(float(v)); wts.append(1.0); sizes.append(1)
        while len(vals) > 1 and vals[-2] > vals[-1]:
            w = wts[-2] + wts[-1]
            v = (vals[-2] * wts[-2] + vals[-1] * wts[-1]) / w
            s = sizes[-2] + sizes[-1]
            vals[-2:], wts[-2:], sizes[-2:] = [v], [w], [s]
    return np.repeat(vals, sizes)


@dataclass
class Calibrator:
    """Kernel ridge regression from raw confidence to empirical accuracy."""

    bin_conf: np.ndarray
    bin_acc: np.ndarray
    bins: int = 100
    bandwidth: float = 0.1
    ridge: float = 1e-3
    monotone: bool = False
    _alpha: np.ndarray = field(default=None, repr=False)
    _grid: np.ndarray = field(default=None, repr=False)
    _grid_vals: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.bin_conf = np.asarray(self.bin_conf, dtype=np.float64)
        self.bin_acc = np.asarray(self.bin_acc, dtype=np.float64)
        k = _rbf(self.bin_conf, self.bin_conf, self.bandwidth)
        self._alpha = np.linalg.solve(k + self.ridge * np.eye(len(k)), self.bin_acc)
        if self.monotone:
            self._grid = np.linspace(0.0, 1.0, 1001)
            self._grid_vals = np.clip(_pav(self._raw(self._grid)), 0.0, 1.0)

    def _raw(self, x):
        return _rbf(x, self.bin_conf, self.bandwidth) @ self._alpha

    def __call__(self, conf) -> np.ndarray:
        conf = np.asarray(conf, dtype=np.float64)
        flat = conf.ravel()
        if self.monotone:
            out = np.interp(flat, self._grid, self._grid_vals)
        else:
            out = np.empty_like(flat)
            step = 200_000
            for i in range(0, flat.size, step):
                out[i:i + step] = self._raw(flat[i:i + step])
        return np.clip(out, 0.0, 1.0).reshape(conf.shape)

    def to_json(self) -> dict:
        return {
            "kind": "kernel_ridge_rbf",
            "bins": self.bins,
            "bandwidth": self.bandwidth,
            "ridge": self.ridge,
            "monotone": self.monotone,
            "bin_conf": self.bin_conf.tolist(),
            "bin_acc": self.bin_acc.tolist(),
        }

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "Calibrator":
        d = json.loads(Path(path).read_text())
        return cls(d["bin_conf"], d["bin_acc"], d["bins"], d["bandwidth"], d["ridge"], d.get("monotone", False))


def fit_calibrator(conf, correct, bins: int = 100, bandwidth: float = 0.1, ridge: float = 1e-3,
                   monotone: bool = False) -> Calibrator:
    """Fit R on per-bin (mean confidence, accuracy) pairs from validation data."""
    count, conf_sum, acc_sum, occ = _binned(conf, correct, bins)
    if occ.sum() < 2:
        raise CalibrationError("all confidences fall into a single bin; calibrate on more (or more varied) data")
    return Calibrator(conf_sum[occ] / count[occ], acc_sum[occ] / count[occ], bins, bandwidth, ridge, monotone)


# --------------------------------------------------------------------------
# comparison of two confidence estimates

def _pearson_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    am = a - a.mean(axis=-1, keepdims=True)
    bm = b - b.mean(axis=-1, keepdims=True)
    den = np.sqrt((am**2).sum(-1) * (bm**2).sum(-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        return (am * bm).sum(-1) / den


def bootstrap_pearson(a, b, n_boot: int = 1000, seed: int = 0):
    """Pearson r of paired samples and its 2.5th/97.5th bootstrap percentiles."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("inputs differ in length")
    if a.size < 3:
        raise ValueError("need at least 3 pairs")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise ValueError("zero-variance input: correlation undefined")
    r = float(_pearson_rows(a, b))
    rng = np.random.default_rng(seed)
    chunk = max(1, 4_000_000 // a.size)
    boots = []
    for start in range(0, n_boot, chunk):
        k = min(chunk, n_boot - start)
        idx = rng.integers(0, a.size, size=(k, a.size))
        boots.append(_pearson_rows(a[idx], b[idx]))
    boots = np.concatenate(boots) if boots else np.array([r])
    lo, hi = np.nanpercentile(boots, [2.5, 97.5])
    return r, float(lo), float(hi)


def compare_confidences(conf_a, conf_b, n_boot: int = 1000, seed: int = 0):
    """Correlation between two per-pixel confidence estimates (e.g. MC dropout vs softmax)."""
    return bootstrap_pearson(conf_a, conf_b, n_boot, seed)
