"""Explanation artifacts: nearest-prototype reports, matching-matrix
exports, reshuffled prototypes, and patch-matching accuracy.

The prediction report is not a post-hoc approximation: the listed weights
and labels are the exact terms of the prediction formula, so rebuilding
the weighted mean from a record reproduces the predicted value bit for
bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import DTensor
from .inference import Prediction, _weighted_label_mean, predict
from .model import Model
from .pgmio import write_pgm
from .synthdata import Dataset, mirror_permutation, mirror_transform
from .transport import pairwise_cost, sinkhorn_log


class ExplainError(RuntimeError):
    pass


@dataclass
class ExplanationEntry:
    proto_index: int
    label: float
    scaled_distance: float
    weight: float
    source_sample_id: int


@dataclass
class ExplanationRecord:
    sample_id: int
    prediction: Prediction
    n_p: int
    entries: list = field(default_factory=list)   # contributing, ascending s*d
    nearest: list = field(default_factory=list)   # top_k nearest, ascending s*d

    def reconstruct_prediction(self) -> float:
        """Rebuild the predicted value from the stored weights and labels;
        bit-equal to prediction.y_hat."""
        if self.prediction.used_fallback:
            return self.entries[0].label
        w = np.zeros(self.n_p)
        labels = np.zeros(self.n_p)
        for e in self.entries:
            w[e.proto_index] = e.weight
            labels[e.proto_index] = e.label
        return _weighted_label_mean(w, labels)


def explain_prediction(model: Model, image: np.ndarray, sample_id: int,
                       top_k: int = 4, out_dir=None,
                       train_set: Dataset | None = None) -> ExplanationRecord:
    """Explain one prediction: contributing prototypes, their weights and
    source training images, plus per-prototype matching matrices.

    Requires a projected model (a projection log), since unprojected
    prototypes have no source image to show. With out_dir set, writes the
    CSV/text report, copies of the source prototype images (needs
    train_set), matching-matrix exports and reshuffled prototypes for the
    top_k nearest.
    """
    if model.projection_log is None:
        raise ExplainError("prototype not visualizable: model has no projection log; "
                           "explain requires a projected checkpoint")
    dv = model.distance_vector(image, keep_plans=model.use_ot)
    d = dv.d.data
    pred = predict(d, model.pset, model.infer)
    sd = model.pset.s * d

    def _entry(k: int) -> ExplanationEntry:
        return ExplanationEntry(
            proto_index=k, label=float(model.pset.labels[k]),
            scaled_distance=float(sd[k]), weight=float(pred.weights[k]),
            source_sample_id=model.projection_log.source_of(k))

    by_sd = sorted(range(model.pset.n_p), key=lambda k: (sd[k], k))
    nearest = [_entry(k) for k in by_sd[:top_k]]
    if pred.used_fallback:
        entries = [_entry(int(np.argmin(d)))]
    else:
        entries = [_entry(k) for k in by_sd if pred.weights[k] > 0.0]
    record = ExplanationRecord(sample_id=sample_id, prediction=pred,
                               n_p=model.pset.n_p, entries=entries, nearest=nearest)

    if out_dir is not None:
        _write_report(model, record, image, out_dir, train_set, dv)
    return record


def _write_report(model: Model, record: ExplanationRecord, image: np.ndarray,
                  out_dir, train_set: Dataset | None, dv) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sid = record.sample_id
    write_pgm(out / f"sample_{sid:05d}.pgm", image)

    with open(out / f"explanation_{sid:05d}.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["rank", "proto_index", "label", "scaled_distance", "weight",
                     "source_sample_id"])
        for rank, e in enumerate(record.nearest):
            wr.writerow([rank, e.proto_index, f"{e.label:.17g}",
                         f"{e.scaled_distance:.17g}", f"{e.weight:.17g}",
                         e.source_sample_id])

    pred = record.prediction
    lines = [f"sample_id: {sid}",
             f"prediction: {pred.y_hat:.17g}",
             f"used_fallback: {str(pred.used_fallback).lower()}",
             f"n_contributing: {len(pred.contributing)}",
             "",
             "nearest prototypes (ascending scaled distance):"]
    for rank, e in enumerate(record.nearest):
        lines.append(f"  {rank}: prototype {e.proto_index} label {e.label:.6g} "
                     f"s*d {e.scaled_distance:.6g} weight {e.weight:.6g} "
                     f"source sample {e.source_sample_id}")
    (out / f"explanation_{sid:05d}.txt").write_text("\n".join(lines) + "\n")

    ids_to_pos = None
    if train_set is not None:
        ids_to_pos = {int(i): pos for pos, i in enumerate(train_set.ids)}
    grid_h, grid_w = model.encoder_config.grid_shape
    img_h = model.encoder_config.input_shape[0]
    patch_px = img_h // grid_h
    for e in record.nearest:
        if ids_to_pos is not None and e.source_sample_id in ids_to_pos:
            proto_img = train_set.images[ids_to_pos[e.source_sample_id]]
            write_pgm(out / f"prototype_{e.proto_index:03d}_sample_{e.source_sample_id:05d}.pgm",
                      proto_img)
        else:
            proto_img = None
        if dv.plans is not None:
            q = dv.plans.Q.data[0, e.proto_index]
            c = dv.cost.data[0, e.proto_index]
            export_plan(c, q, out / f"match_{sid:05d}_proto_{e.proto_index:03d}")
            if proto_img is not None:
                reshuffled, amap = reshuffled_prototype(q, proto_img, (grid_w, grid_h),
                                                        patch_px, mirror_aware=True)
                write_pgm(out / f"reshuffled_{sid:05d}_proto_{e.proto_index:03d}.pgm",
                          reshuffled)
                np.savetxt(out / f"argmax_{sid:05d}_proto_{e.proto_index:03d}.csv",
                           amap.reshape(grid_h, grid_w), fmt="%d", delimiter=",")


def reshuffled_prototype(Q: np.ndarray, proto_image: np.ndarray, grid: tuple,
                         patch_px: int, mirror_aware: bool = True):
    """Rebuild the prototype with each patch placed at the image position
    it matches best.

    For each image-patch row i of Q, the prototype patch argmax_j q_ij
    (ties toward the lowest j) is drawn at grid position i, horizontally
    flipped when the two patches sit on opposite sides of the vertical
    midline. Returns (image, argmax map).
    """
    grid_w, grid_h = grid
    m = grid_w * grid_h
    Q = np.asarray(Q, dtype=np.float64)
    if Q.shape != (m, m):
        raise ValueError(f"reshuffled_prototype: Q shape {Q.shape}, expected ({m}, {m})")
    img = np.asarray(proto_image, dtype=np.float64)
    if img.ndim == 3:
        img = img[:, :, 0]
    if img.shape != (grid_h * patch_px, grid_w * patch_px):
        raise ValueError(f"reshuffled_prototype: image {img.shape} vs grid {grid} x {patch_px}px")
    amap = np.argmax(Q, axis=1)
    out = np.zeros_like(img)
    mid = (grid_w - 1) / 2.0
    for i in range(m):
        j = int(amap[i])
        ri, ci = divmod(i, grid_w)
        rj, cj = divmod(j, grid_w)
        patch = img[rj * patch_px:(rj + 1) * patch_px, cj * patch_px:(cj + 1) * patch_px]
        if mirror_aware and (ci - mid) * (cj - mid) < 0.0:
            patch = patch[:, ::-1]
        out[ri * patch_px:(ri + 1) * patch_px, ci * patch_px:(ci + 1) * patch_px] = patch
    return out[:, :, None], amap


def matching_accuracy(Q: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of patch rows whose argmax matches the ground-truth
    correspondence (a bijection over patch indices)."""
    Q = np.asarray(Q, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.intp)
    m = Q.shape[0]
    if sorted(truth.tolist()) != list(range(m)):
        raise ValueError("matching_accuracy: truth must be a bijection on patch indices")
    return float(np.mean(np.argmax(Q, axis=1) == truth))


def mirror_matching_accuracy(model: Model, dataset: Dataset, limit: int = 64) -> float:
    """Mean patch-matching accuracy between each sample and its mirrored
    counterpart, scored against the exact mirror permutation."""
    grid_h, grid_w = model.encoder_config.grid_shape
    truth = mirror_permutation(grid_w, grid_h)
    n = min(limit, len(dataset))
    accs = []
    for i in range(n):
        img = dataset.images[i]
        z = DTensor(model.latent(img))
        zm = DTensor(model.latent(mirror_transform(img)))
        C = pairwise_cost(z.reshape((1,) + z.shape), zm.reshape((1,) + zm.shape))
        plan = sinkhorn_log(C, model.ot)
        accs.append(matching_accuracy(plan.Q.data[0], truth))
    return float(np.mean(accs))


def mirror_argmax_identity_rate(model: Model, dataset: Dataset, limit: int = 64) -> float:
    """Fraction of patch rows matched to the same spatial position across a
    sample and its mirrored counterpart (diagonal matching)."""
    grid_h, grid_w = model.encoder_config.grid_shape
    identity = np.arange(grid_h * grid_w)
    n = min(limit, len(dataset))
    rates = []
    for i in range(n):
        img = dataset.images[i]
        z = DTensor(model.latent(img))
        zm = DTensor(model.latent(mirror_transform(img)))
        C = pairwise_cost(z.reshape((1,) + z.shape), zm.reshape((1,) + zm.shape))
        plan = sinkhorn_log(C, model.ot)
        rates.append(matching_accuracy(plan.Q.data[0], identity))
    return float(np.mean(rates))


def export_plan(C: np.ndarray, Q: np.ndarray, path_prefix) -> None:
    """Write the cost and matching matrices as 17-significant-digit CSVs
    plus a max-normalized grayscale rendering of Q."""
    C = np.asarray(C, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if C.shape != Q.shape or C.ndim != 2:
        raise ValueError(f"export_plan: shapes {C.shape} and {Q.shape} must be equal 2-D")
    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(f"{prefix}_C.csv", C, fmt="%.17g", delimiter=",")
    np.savetxt(f"{prefix}_Q.csv", Q, fmt="%.17g", delimiter=",")
    peak = Q.max()
    heat = Q / peak if peak > 0.0 else Q
    write_pgm(f"{prefix}_Q.pgm", heat)


def load_plan_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=","))
