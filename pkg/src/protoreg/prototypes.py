"""Learned prototype set, sample-to-prototype distances, and projection.

Prototypes are latent grids trained alongside the encoder. Each carries a
fixed label assigned on a uniform grid over the training label range. The
distance scale s is learned through its log, which keeps it positive.
Projection snaps every prototype onto the closest training latent
(bit-exact copy) so it can be shown as a real image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DTensor, ShapeError, pairwise_dist
from .transport import OTConfig, TransportPlan, emd, pairwise_cost, sinkhorn_log


@dataclass
class PrototypeSet:
    protos: DTensor            # (n_p, grid_h, grid_w, c)
    labels: np.ndarray         # (n_p,) fixed, ascending
    log_s: DTensor             # scalar; s = exp(log_s) > 0

    @property
    def n_p(self) -> int:
        return self.protos.shape[0]

    @property
    def s(self) -> float:
        return float(np.exp(self.log_s.data))

    def s_tensor(self) -> DTensor:
        return self.log_s.exp()


@dataclass
class DistanceVector:
    d: DTensor                          # (n_p,) or (batch, n_p)
    plans: TransportPlan | None = None  # per-prototype plans when requested
    cost: DTensor | None = None


@dataclass
class ProjectionEntry:
    proto_index: int
    sample_id: int
    distance: float


@dataclass
class ProjectionLog:
    entries: list[ProjectionEntry] = field(default_factory=list)

    def source_of(self, proto_index: int) -> int:
        return self.entries[proto_index].sample_id


def init_prototypes(n_p: int, label_min: float, label_max: float,
                    shape: tuple, rng_seed: int = 0) -> PrototypeSet:
    """Uniformly spaced fixed labels over [label_min, label_max]; prototype
    tensors start uniform in (0.2, 0.8), inside the sigmoid codomain."""
    if n_p < 2:
        raise ValueError(f"init_prototypes: need n_p >= 2, got {n_p}")
    if not label_min < label_max:
        raise ValueError(f"init_prototypes: empty label range [{label_min}, {label_max}]")
    k = np.arange(n_p, dtype=np.float64)
    labels = label_min + k * (label_max - label_min) / (n_p - 1)
    rng = np.random.default_rng(np.random.SeedSequence([0x9207, rng_seed]))
    protos = rng.uniform(0.2, 0.8, size=(n_p,) + tuple(shape))
    return PrototypeSet(
        protos=DTensor(protos, requires_grad=True),
        labels=labels,
        log_s=DTensor(0.0, requires_grad=True),
    )


def distances(Z, pset: PrototypeSet, ot: OTConfig,
              keep_plans: bool = False) -> DistanceVector:
    """Transport distance from latent(s) Z to every prototype.

    Z is a latent grid (h, w, c) or a batch (b, h, w, c). All prototype
    (and batch) problems are solved in one vectorized Sinkhorn loop with a
    shared iteration schedule. Plans are retained when an explanation
    needs them.
    """
    Z = Z if isinstance(Z, DTensor) else DTensor(Z)
    single = Z.ndim == 3
    if single:
        Z = Z.reshape((1,) + Z.shape)
    if Z.shape[-3:] != pset.protos.shape[-3:]:
        raise ShapeError(f"distances: latent {Z.shape} vs prototypes {pset.protos.shape}")
    b = Z.shape[0]
    zb = Z.reshape((b, 1) + Z.shape[-3:])
    pb = pset.protos.reshape((1,) + pset.protos.shape)
    C = pairwise_cost(zb, pb)                        # (b, n_p, m, m)
    plan = sinkhorn_log(C, ot)
    d = emd(C, plan)                                 # (b, n_p)
    if single:
        d = d.reshape((pset.n_p,))
    return DistanceVector(d=d, plans=plan if keep_plans else None,
                          cost=C if keep_plans else None)


def avgpool_distance(Z, pset: PrototypeSet) -> DistanceVector:
    """Ablation metric: Euclidean distance between spatially mean-pooled
    latent vectors instead of transport matching."""
    Z = Z if isinstance(Z, DTensor) else DTensor(Z)
    single = Z.ndim == 3
    if single:
        Z = Z.reshape((1,) + Z.shape)
    if Z.shape[-3:] != pset.protos.shape[-3:]:
        raise ShapeError(f"avgpool_distance: latent {Z.shape} vs prototypes {pset.protos.shape}")
    b = Z.shape[0]
    c = Z.shape[-1]
    zp = Z.mean(axis=(1, 2)).reshape((b, 1, 1, c))
    pp = pset.protos.mean(axis=(1, 2)).reshape((1, pset.n_p, 1, c))
    d = pairwise_dist(zp, pp).reshape((b, pset.n_p))
    if single:
        d = d.reshape((pset.n_p,))
    return DistanceVector(d=d)


def _distance_table(latents: np.ndarray, pset: PrototypeSet, ot: OTConfig,
                    use_ot: bool, chunk: int = 128) -> np.ndarray:
    """(n_samples, n_p) distances with no gradient tracking."""
    n = latents.shape[0]
    out = np.empty((n, pset.n_p))
    protos = DTensor(pset.protos.data)
    frozen = PrototypeSet(protos=protos, labels=pset.labels, log_s=DTensor(pset.log_s.data))
    for start in range(0, n, chunk):
        zs = DTensor(latents[start:start + chunk])
        dv = distances(zs, frozen, ot) if use_ot else avgpool_distance(zs, frozen)
        out[start:start + chunk] = dv.d.data
    return out


def project(pset: PrototypeSet, train_latents: list, ot: OTConfig,
            use_ot: bool = True) -> ProjectionLog:
    """Replace each prototype with its closest training latent, bit-exact.

    train_latents is a list of (latent ndarray, sample_id). The metric is
    the one the model trains with (transport, or mean-pooled in that
    ablation). Ties break toward the lowest sample_id.
    """
    if not train_latents:
        raise ValueError("project: empty training latent list")
    order = sorted(range(len(train_latents)), key=lambda i: train_latents[i][1])
    lat = np.stack([np.asarray(train_latents[i][0], dtype=np.float64) for i in order])
    ids = [int(train_latents[i][1]) for i in order]
    table = _distance_table(lat, pset, ot, use_ot)   # (n, n_p)
    log = ProjectionLog()
    new = np.empty_like(pset.protos.data)
    for k in range(pset.n_p):
        best = int(np.argmin(table[:, k]))           # first hit = lowest sample_id
        new[k] = lat[best]
        log.entries.append(ProjectionEntry(proto_index=k, sample_id=ids[best],
                                           distance=float(table[best, k])))
    pset.protos.data = new
    return log
