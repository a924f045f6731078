"""Anomaly decisions and evaluation metrics.

Reconstruction errors become flags against a threshold; flags against
labels become the confusion metrics; histograms over a 16x16 spatial grid
feed the Jensen-Shannon-divergence-based distribution errors used to judge
generated trajectories against real ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geodata import haversine_m

GRID_SIZE = 16
LENGTH_BINS = 32


class ScoringError(ValueError):
    pass


def reconstruction_error(x0, x0_hat):
    """Mean squared error over the position channels (x, y).

    Mean rather than sum, so a threshold transfers across input lengths.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    if x0.shape != x0_hat.shape:
        raise ScoringError(f"shape mismatch {x0.shape} vs {x0_hat.shape}")
    d = x0[..., :2] - x0_hat[..., :2]
    return float(np.mean(d * d))


def classify(scores, lam):
    """Flag anomalous where score >= lam (boundary inclusive)."""
    if lam < 0.0:
        raise ScoringError("lambda must be >= 0")
    return np.asarray(scores, dtype=np.float64) >= lam


def percentile_lambda(scores, pct):
    """The score at the given percentile, for percentile-mode thresholds."""
    if not (0.0 <= pct <= 100.0):
        raise ScoringError(f"percentile {pct} outside [0, 100]")
    return float(np.quantile(np.asarray(scores, dtype=np.float64), pct / 100.0))


@dataclass
class ConfusionMetrics:
    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    undefined: list = field(default_factory=list)

    def as_dict(self):
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
                "accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1,
                "undefined": list(self.undefined)}


def confusion_metrics(flags, labels):
    """ACC / precision / recall / F1 from boolean flags vs boolean labels.

    Ratios with zero denominators are reported as 0 and named in
    `undefined`.
    """
    flags = np.asarray(flags, dtype=bool)
    labels = np.asarray(labels, dtype=bool)
    if flags.shape != labels.shape:
        raise ScoringError("flags/labels length mismatch")
    tp = int(np.sum(flags & labels))
    fp = int(np.sum(flags & ~labels))
    fn = int(np.sum(~flags & labels))
    tn = int(np.sum(~flags & ~labels))
    n = tp + fp + fn + tn
    undefined = []

    def ratio(num, den, name):
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    acc = ratio(tp + tn, n, "accuracy")
    p = ratio(tp, tp + fp, "precision")
    r = ratio(tp, tp + fn, "recall")
    f1 = ratio(2.0 * p * r, p + r, "f1") if (p + r) > 0 else (undefined.append("f1") or 0.0)
    return ConfusionMetrics(tp=tp, fp=fp, fn=fn, tn=tn, accuracy=acc,
                            precision=p, recall=r, f1=f1, undefined=undefined)


def roc_auc(scores, labels):
    """Rank-based AUC (Mann-Whitney); ties share average ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ScoringError("roc_auc needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def regression_errors(y, y_hat):
    """MSE / RMSE / MAE / MAPE (percent). MAPE terms with |y| <= 1e-9 are
    excluded and counted."""
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.size == 0:
        raise ScoringError("empty input")
    if y.shape != y_hat.shape:
        raise ScoringError("length mismatch")
    d = y - y_hat
    mse = float(np.mean(d * d))
    ok = np.abs(y) > 1e-9
    mape = float(np.mean(np.abs(d[ok] / y[ok])) * 100.0) if np.any(ok) else 0.0
    return {
        "mse": mse,
        "rmse": math.sqrt(mse),
        "mae": float(np.mean(np.abs(d))),
        "mape_pct": mape,
        "mape_excluded": int(np.sum(~ok)),
    }


def jsd(p, q):
    """Jensen-Shannon divergence, natural log, with 0*log(0) := 0.

    Bounded by [0, ln 2]; symmetric in its arguments.
    """
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise ScoringError("distribution length mismatch")
    for name, dist in (("p", p), ("q", q)):
        if np.any(dist < 0.0):
            raise ScoringError(f"{name} has negative mass")
        if abs(dist.sum() - 1.0) > 1e-9:
            raise ScoringError(f"{name} does not sum to 1 (got {dist.sum()!r})")
    m = 0.5 * (p + q)

    def kl(a, b):
        mask = a > 0.0
        return float(np.sum(a[mask] * np.log(a[mask] / b[mask])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


@dataclass
class GeoGrid:
    """16x16 occupancy grid over a fixed bounding box, normalized to a
    probability distribution over cells."""

    lat_lo: float
    lat_hi: float
    lon_lo: float
    lon_hi: float
    counts: np.ndarray
    clamped: int = 0

    @classmethod
    def bbox_of(cls, trajs):
        if not trajs:
            raise ScoringError("empty dataset has no bounding box")
        lat_lo = min(float(t.lat.min()) for t in trajs)
        lat_hi = max(float(t.lat.max()) for t in trajs)
        lon_lo = min(float(t.lon.min()) for t in trajs)
        lon_hi = max(float(t.lon.max()) for t in trajs)
        return lat_lo, lat_hi, lon_lo, lon_hi

    @classmethod
    def from_points(cls, trajs, bbox):
        lat_lo, lat_hi, lon_lo, lon_hi = bbox
        grid = cls(lat_lo, lat_hi, lon_lo, lon_hi,
                   counts=np.zeros((GRID_SIZE, GRID_SIZE)))
        for t in trajs:
            grid.add(t.lat, t.lon)
        return grid

    def _cells(self, lat, lon):
        lat = np.asarray(lat, dtype=np.float64)
        lon = np.asarray(lon, dtype=np.float64)
        lat_span = max(self.lat_hi - self.lat_lo, 1e-12)
        lon_span = max(self.lon_hi - self.lon_lo, 1e-12)
        i = np.floor((lat - self.lat_lo) / lat_span * GRID_SIZE).astype(int)
        j = np.floor((lon - self.lon_lo) / lon_span * GRID_SIZE).astype(int)
        out = np.sum((i < 0) | (i >= GRID_SIZE) | (j < 0) | (j >= GRID_SIZE))
        self.clamped += int(out)
        return np.clip(i, 0, GRID_SIZE - 1), np.clip(j, 0, GRID_SIZE - 1)

    def add(self, lat, lon):
        i, j = self._cells(lat, lon)
        np.add.at(self.counts, (i, j), 1.0)

    def distribution(self):
        total = self.counts.sum()
        if total == 0:
            raise ScoringError("empty grid has no distribution")
        return (self.counts / total).ravel()


def _endpoint_distribution(trajs, bbox, which):
    grid = GeoGrid(bbox[0], bbox[1], bbox[2], bbox[3],
                   counts=np.zeros((GRID_SIZE, GRID_SIZE)))
    idx = 0 if which == "origin" else -1
    grid.add(np.array([t.lat[idx] for t in trajs]),
             np.array([t.lon[idx] for t in trajs]))
    return grid.distribution()


def _length_distribution(trajs, edges):
    lengths = [t.length_m() for t in trajs]
    counts, _ = np.histogram(lengths, bins=edges)
    total = counts.sum()
    if total == 0:
        # every length fell outside the reference range; put the mass in
        # the nearest edge bin so the comparison stays defined
        counts = np.zeros(len(edges) - 1)
        counts[0] = 1.0
        total = 1.0
    return counts / total


def geo_distribution_errors(real, generated):
    """Density / trip / length errors between two trajectory sets.

    Density compares 16x16 point-count distributions; trip averages the JSD
    of origin-cell and destination-cell distributions; length compares
    per-trajectory total haversine length histograms over 32 equal-width
    bins spanning the real data's range. The real dataset fixes the
    bounding box; generated points outside are clamped to boundary cells
    and counted.
    """
    if not real or not generated:
        raise ScoringError("both datasets must be non-empty")
    bbox = GeoGrid.bbox_of(real)
    g_real = GeoGrid.from_points(real, bbox)
    g_gen = GeoGrid.from_points(generated, bbox)
    density = jsd(g_real.distribution(), g_gen.distribution())

    trip = 0.5 * (jsd(_endpoint_distribution(real, bbox, "origin"),
                      _endpoint_distribution(generated, bbox, "origin"))
                  + jsd(_endpoint_distribution(real, bbox, "destination"),
                        _endpoint_distribution(generated, bbox, "destination")))

    real_lengths = [t.length_m() for t in real]
    lo, hi = min(real_lengths), max(real_lengths)
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, LENGTH_BINS + 1)
    length = jsd(_length_distribution(real, edges),
                 _length_distribution(generated, edges))

    return {"density": density, "trip": trip, "length": length,
            "clamped_points": g_gen.clamped}


def bearing_change_histogram(trajs, bins=36):
    """Histogram of absolute per-step heading changes (degrees), the
    evidence pattern used to expose spoofed tracks."""
    from .geodata import derive_kinematics, wrap_angle

    deltas = []
    for t in trajs:
        t = t if t.psi is not None else derive_kinematics(t)
        deltas.append(np.abs(np.degrees(wrap_angle(np.diff(t.psi)))))
    if not deltas:
        raise ScoringError("no trajectories")
    all_d = np.concatenate(deltas)
    counts, edges = np.histogram(all_d, bins=bins, range=(0.0, 180.0))
    return counts, edges
