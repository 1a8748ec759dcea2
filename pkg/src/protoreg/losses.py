"""Training losses: label-calibrated distance metric loss and the mirror
consistency triplet loss.

The metric loss pushes the scaled latent distance s*d_k toward the label
difference |y_k - y| for every prototype, weighted by a label-neighborhood
kernel exp(-|dy|/(2 sigma^2)) + alpha. Note the exponent uses the absolute
difference, not its square. The consistency loss is a per-patch triplet
hinge between an image's latent and the latent of its mirrored version.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DTensor, take
from .prototypes import PrototypeSet


@dataclass
class MetricLossConfig:
    sigma: float = 1.0
    alpha: float = 0.05

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise ValueError(f"MetricLossConfig: sigma must be positive, got {self.sigma}")
        if self.alpha < 0.0:
            raise ValueError(f"MetricLossConfig: alpha must be >= 0, got {self.alpha}")


@dataclass
class ConsistencyConfig:
    beta: float = 10.0
    gamma: float = 0.1
    transform: np.ndarray | None = None   # patch-index permutation, set per grid

    def __post_init__(self):
        if self.beta < 0.0:
            raise ValueError(f"ConsistencyConfig: beta must be >= 0, got {self.beta}")
        if self.gamma <= 0.0:
            raise ValueError(f"ConsistencyConfig: gamma must be positive, got {self.gamma}")


def train_weight(label_diff: float, cfg: MetricLossConfig) -> float:
    """Neighborhood weight exp(-|dy| / (2 sigma^2)) + alpha."""
    return float(np.exp(-np.abs(label_diff) / (2.0 * cfg.sigma ** 2)) + cfg.alpha)


def metric_loss(d: DTensor, pset: PrototypeSet, y, cfg: MetricLossConfig) -> DTensor:
    """Sum_k |s*d_k - |y_k - y|| * w_k, averaged over the batch.

    d is (n_p,) for a single sample or (b, n_p) for a batch; y is the
    matching scalar or (b,) array of ground-truth labels.
    """
    single = d.ndim == 1
    db = d.reshape((1,) + d.shape) if single else d
    yb = np.atleast_1d(np.asarray(y, dtype=np.float64))
    delta = np.abs(pset.labels[None, :] - yb[:, None])        # (b, n_p)
    w = np.exp(-delta / (2.0 * cfg.sigma ** 2)) + cfg.alpha
    s = pset.s_tensor()
    per_sample = ((db * s - delta).abs() * w).sum(axis=-1)    # (b,)
    return per_sample.mean()


def consistency_loss(Z: DTensor, Z_t: DTensor, cfg: ConsistencyConfig) -> DTensor:
    """Triplet hinge over patch positions of Z against transformed Z_t.

    For each patch i (anchor z_i), the positive is the transformed image's
    patch at cfg.transform[i] and the negative its patch at the same
    position i; triplets where those coincide (transform[i] == i) are
    skipped. The per-image loss is sum_i max(d_pos - d_neg + gamma, 0),
    averaged over the batch. Z and Z_t are latent grids (h, w, c) or
    (b, h, w, c).
    """
    if cfg.transform is None:
        raise ValueError("consistency_loss: cfg.transform is not set")
    t = np.asarray(cfg.transform, dtype=np.intp)
    m = t.shape[0]
    if sorted(t.tolist()) != list(range(m)):
        raise ValueError("consistency_loss: transform must be a bijection on patch indices")
    single = Z.ndim == 3
    if single:
        Z = Z.reshape((1,) + Z.shape)
        Z_t = Z_t.reshape((1,) + Z_t.shape)
    b = Z.shape[0]
    c = Z.shape[-1]
    if Z.shape[1] * Z.shape[2] != m:
        raise ValueError(f"consistency_loss: transform length {m} vs grid {Z.shape[1:3]}")
    z = Z.reshape((b, m, c))
    zt = Z_t.reshape((b, m, c))
    pos = take(zt, t, axis=1)
    d_pos = (z - pos).square().sum(axis=-1).sqrt()            # (b, m)
    d_neg = (z - zt).square().sum(axis=-1).sqrt()
    mask = (t != np.arange(m)).astype(np.float64)             # excluded fixed points
    hinge = (d_pos - d_neg + cfg.gamma).relu() * mask
    return hinge.sum(axis=-1).mean()


def total_loss(L_m: DTensor, L_c: DTensor | float, beta: float) -> DTensor:
    """Weighted sum of the metric and consistency terms."""
    if isinstance(L_c, DTensor):
        return L_m + L_c * beta
    return L_m + float(L_c) * beta
