"""Radius-weighted prediction from prototype distances.

A prototype contributes iff its scaled distance s*d_k is within the
radius r; contributing prototypes are weighted by a Gaussian of standard
deviation r/3 in scaled-distance units (absolute distance in the
exponent, matching the training-side kernel). When nothing is in range
the nearest prototype's label is returned as a fallback.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .prototypes import PrototypeSet


@dataclass
class InferenceConfig:
    r: float = 3.0

    def __post_init__(self):
        if self.r <= 0.0:
            raise ValueError(f"InferenceConfig: r must be positive, got {self.r}")


@dataclass
class Prediction:
    y_hat: float
    used_fallback: bool
    weights: np.ndarray
    contributing: list[int] = field(default_factory=list)


def _weighted_label_mean(weights: np.ndarray, labels: np.ndarray) -> float:
    # single shared formula so explanation records can rebuild bit-equal values
    return float(np.dot(weights, labels) / np.sum(weights))


def predict(d: np.ndarray, pset: PrototypeSet, cfg: InferenceConfig) -> Prediction:
    """Weighted average of prototype labels within radius r of the sample.

    d is the (n_p,) distance vector; the scale s comes from the trained
    set. Weights are exactly zero beyond the radius, so an exact zero-sum
    test selects the fallback path.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 1 or d.shape[0] != pset.n_p:
        raise ValueError(f"predict: distance vector {d.shape} vs {pset.n_p} prototypes")
    if pset.n_p == 0:
        raise ValueError("predict: empty prototype set")
    sd = pset.s * d
    r = cfg.r
    inside = sd <= r
    w = np.where(inside, np.exp(-sd / (2.0 * (r / 3.0) ** 2)), 0.0)
    if np.sum(w) == 0.0:
        k = int(np.argmin(d))
        return Prediction(y_hat=float(pset.labels[k]), used_fallback=True,
                          weights=w, contributing=[])
    y_hat = _weighted_label_mean(w, pset.labels)
    return Prediction(y_hat=y_hat, used_fallback=False, weights=w,
                      contributing=[int(i) for i in np.flatnonzero(w > 0.0)])


@dataclass
class MetricsReport:
    n: int
    mae: float
    mae_std: float
    fallback_rate: float
    mean_predictor_mae: float


def predict_dataset(model, dataset, chunk: int = 256) -> list:
    """Predictions for every sample; model must expose distance_table()."""
    preds = []
    for start in range(0, len(dataset.labels), chunk):
        table = model.distance_table(dataset.images[start:start + chunk])
        for row in table:
            preds.append(predict(row, model.pset, model.infer))
    return preds


def evaluate(model, dataset, chunk: int = 256) -> MetricsReport:
    """MAE, its std over samples, fallback rate, and the mean-predictor
    baseline MAE on the same split."""
    preds = predict_dataset(model, dataset, chunk=chunk)
    return metrics_from_predictions(dataset.labels, preds)


def metrics_from_predictions(y_true: np.ndarray, preds: list) -> MetricsReport:
    y_true = np.asarray(y_true, dtype=np.float64)
    y_hat = np.array([p.y_hat for p in preds])
    err = np.abs(y_hat - y_true)
    baseline = np.mean(np.abs(y_true - y_true.mean()))
    return MetricsReport(
        n=len(preds),
        mae=float(err.mean()),
        mae_std=float(err.std()),
        fallback_rate=float(np.mean([p.used_fallback for p in preds])),
        mean_predictor_mae=float(baseline),
    )


def spearman_rho(x: np.ndarray, y: np.ndarray) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    rx = _rankdata(x)
    ry = _rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt(np.sum(rx * rx) * np.sum(ry * ry))
    if denom == 0.0:
        return 0.0
    return float(np.sum(rx * ry) / denom)


def _rankdata(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks
