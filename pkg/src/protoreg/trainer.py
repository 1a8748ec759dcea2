"""End-to-end training loop with projection schedule and harnesses.

One optimization step at a time: SGD with momentum on the encoder
weights, the prototype tensors and log(s). At each projection epoch the
prototypes snap to their closest training latents and a checkpoint is
written; checkpoints exist only at those epochs, so every persisted
prototype maps to a real training image. All randomness derives from
(seed, epoch, sample_id) seed sequences, so reruns are bit-identical.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as configmod
from .autodiff import DTensor, zero_grads
from .checkpoint import Checkpoint, save_checkpoint
from .encoder import EncoderConfig, EncoderParams, encode, init_params
from .inference import InferenceConfig, evaluate, predict
from .losses import (ConsistencyConfig, MetricLossConfig, consistency_loss,
                     metric_loss, total_loss)
from .model import Model
from .prototypes import PrototypeSet, avgpool_distance, distances, init_prototypes, project
from .synthdata import AugmentConfig, Dataset, augment, mirror_permutation, mirror_transform
from .transport import OTConfig


class TrainingError(RuntimeError):
    pass


class TrainConfig:
    """Typed view over the full config mapping (see config.SCHEMA)."""

    def __init__(self, mapping: dict | None = None):
        cfg = dict(configmod.resolve()) if mapping is None else dict(mapping)
        for key in configmod.SCHEMA:
            if key not in cfg:
                cfg[key] = configmod.SCHEMA[key][1]
        unknown = set(cfg) - set(configmod.SCHEMA)
        if unknown:
            raise configmod.ConfigError(f"unknown config keys {sorted(unknown)}")
        self._cfg = cfg
        self._validate()

    def _validate(self):
        c = self._cfg
        if c["epochs"] < 1:
            raise configmod.ConfigError("epochs must be >= 1")
        if c["batch_size"] < 1:
            raise configmod.ConfigError("batch_size must be >= 1")
        if not 1 <= c["projection_start"] <= c["epochs"]:
            raise configmod.ConfigError(
                f"projection_start {c['projection_start']} must lie in [1, epochs={c['epochs']}] "
                "so at least one projection occurs before training ends")
        if c["projection_interval"] < 1:
            raise configmod.ConfigError("projection_interval must be >= 1")
        if c["n_prototypes"] < 2:
            raise configmod.ConfigError("n_prototypes must be >= 2")
        if not self.projection_epochs():
            raise configmod.ConfigError("no projection would occur before training ends")

    def __getattr__(self, key):
        try:
            return self._cfg[key]
        except KeyError:
            raise AttributeError(key)

    @property
    def mapping(self) -> dict:
        return dict(self._cfg)

    def with_overrides(self, **mods) -> "TrainConfig":
        new = dict(self._cfg)
        new.update(mods)
        return TrainConfig(new)

    def projection_epochs(self) -> list[int]:
        c = self._cfg
        return [e for e in range(1, c["epochs"] + 1)
                if e >= c["projection_start"]
                and (e - c["projection_start"]) % c["projection_interval"] == 0]

    def encoder_config(self) -> EncoderConfig:
        c = self._cfg
        return EncoderConfig(input_shape=(c["image_size"], c["image_size"]),
                             base_channels=tuple(c["base_channels"]), c_z=c["c_z"],
                             use_addon_head=c["use_addon_h"], seed=c["seed"])

    def ot_config(self) -> OTConfig:
        c = self._cfg
        return OTConfig(eps=c["ot_eps"], max_iters=c["ot_max_iters"],
                        marginal_tol=c["ot_marginal_tol"], grad_mode=c["ot_grad_mode"])

    def metric_config(self) -> MetricLossConfig:
        return MetricLossConfig(sigma=self._cfg["sigma"], alpha=self._cfg["alpha"])

    def consistency_config(self, grid_shape: tuple) -> ConsistencyConfig:
        gh, gw = grid_shape
        return ConsistencyConfig(beta=self._cfg["beta"], gamma=self._cfg["gamma"],
                                 transform=mirror_permutation(gw, gh))

    def infer_config(self) -> InferenceConfig:
        return InferenceConfig(r=self._cfg["radius"])

    def augment_config(self) -> AugmentConfig:
        c = self._cfg
        return AugmentConfig(max_rotation_deg=c["augment_rotation_deg"],
                             max_translation_px=c["augment_translation_px"],
                             scale_min=c["augment_scale_min"],
                             scale_max=c["augment_scale_max"],
                             enabled=c["augment"])


@dataclass
class TrainResult:
    model: Model                      # live state after the last epoch
    checkpoint: Checkpoint            # snapshot from the last projection
    log_rows: list = field(default_factory=list)
    checkpoint_paths: list = field(default_factory=list)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([0x7EA1, seed, epoch]))


def _augment_rng(seed: int, epoch: int, sample_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([0xA000, seed, epoch, sample_id]))


def _snapshot_model(model: Model) -> Model:
    params = EncoderParams()
    for name, t in model.encoder_params.items():
        params.weights[name] = DTensor(t.data.copy(), requires_grad=True)
    pset = PrototypeSet(protos=DTensor(model.pset.protos.data.copy(), requires_grad=True),
                        labels=model.pset.labels.copy(),
                        log_s=DTensor(np.array(model.pset.log_s.data).copy(), requires_grad=True))
    return Model(encoder_config=model.encoder_config, encoder_params=params, pset=pset,
                 ot=model.ot, infer=model.infer, use_ot=model.use_ot,
                 projection_log=model.projection_log)


def train(cfg: TrainConfig, train_set: Dataset, val_set: Dataset | None = None,
          out_dir=None) -> TrainResult:
    """Train on the dataset; returns the live model plus the last
    post-projection checkpoint (the state every downstream artifact uses)."""
    enc_cfg = cfg.encoder_config()
    grid = enc_cfg.grid_shape

    lmin = cfg.proto_label_min if cfg.proto_label_min is not None else float(train_set.labels.min())
    lmax = cfg.proto_label_max if cfg.proto_label_max is not None else float(train_set.labels.max())
    bad = (train_set.labels < lmin) | (train_set.labels > lmax)
    if np.any(bad):
        raise TrainingError(
            f"{int(bad.sum())} training labels outside the prototype label range "
            f"[{lmin}, {lmax}]")

    params = init_params(enc_cfg)
    pset = init_prototypes(cfg.n_prototypes, lmin, lmax, enc_cfg.latent_shape, cfg.seed)
    ot_cfg = cfg.ot_config()
    metric_cfg = cfg.metric_config()
    cons_cfg = cfg.consistency_config(grid)
    infer_cfg = cfg.infer_config()
    aug_cfg = cfg.augment_config()

    model = Model(encoder_config=enc_cfg, encoder_params=params, pset=pset,
                  ot=ot_cfg, infer=infer_cfg, use_ot=cfg.use_ot)

    opt_params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in opt_params]
    proto_slot = opt_params.index(pset.protos)
    lr, mu = cfg.learning_rate, cfg.momentum

    projection_epochs = set(cfg.projection_epochs())
    n = len(train_set)
    log_rows: list[dict] = []
    ck_paths: list = []
    last_ck: Checkpoint | None = None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for epoch in range(1, cfg.epochs + 1):
        perm = _epoch_rng(cfg.seed, epoch).permutation(n)
        sums = {"L_m": 0.0, "L_c": 0.0, "L_total": 0.0, "mae": 0.0}
        for start in range(0, n, cfg.batch_size):
            batch = perm[start:start + cfg.batch_size]
            imgs = train_set.images[batch]
            if aug_cfg.enabled:
                imgs = np.stack([
                    augment(img, _augment_rng(cfg.seed, epoch, int(sid)), aug_cfg)
                    for img, sid in zip(imgs, train_set.ids[batch])])
            x = DTensor(imgs)
            z = encode(x, params, enc_cfg)
            dv = distances(z, pset, ot_cfg) if cfg.use_ot else avgpool_distance(z, pset)
            y = train_set.labels[batch]
            L_m = metric_loss(dv.d, pset, y, metric_cfg)
            if cfg.use_consistency:
                mirrored = np.stack([mirror_transform(img) for img in imgs])
                z_t = encode(DTensor(mirrored), params, enc_cfg)
                L_c = consistency_loss(z, z_t, cons_cfg)
                loss = total_loss(L_m, L_c, cons_cfg.beta)
                lc_val = float(L_c.data)
            else:
                loss = L_m
                lc_val = 0.0
            lval = float(loss.data)
            if not np.isfinite(lval):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}")

            # running train-MAE from this batch's (pre-update) distances
            for row, yi in zip(dv.d.data, y):
                sums["mae"] += abs(predict(row, pset, infer_cfg).y_hat - yi)

            zero_grads(opt_params)
            loss.backward()
            for p, v in zip(opt_params, velocity):
                if p.grad is None:
                    continue
                v *= mu
                v += p.grad
                p.data -= lr * v
            bsz = len(batch)
            sums["L_m"] += float(L_m.data) * bsz
            sums["L_c"] += lc_val * bsz
            sums["L_total"] += lval * bsz

        row = {"epoch": epoch,
               "L_m": sums["L_m"] / n,
               "L_c": sums["L_c"] / n,
               "L_total": sums["L_total"] / n,
               "train_MAE": sums["mae"] / n,
               "s": pset.s}
        log_rows.append(row)

        if epoch in projection_epochs:
            latents = model.latents(train_set.images)
            plog = project(pset, list(zip(latents, train_set.ids.tolist())), ot_cfg,
                           use_ot=cfg.use_ot)
            model.projection_log = plog
            velocity[proto_slot][:] = 0.0
            snap = _snapshot_model(model)
            eval_set = val_set if val_set is not None else train_set
            rep = evaluate(snap, eval_set)
            last_ck = Checkpoint(
                model=snap, cfg=cfg.mapping, epoch=epoch,
                metrics={"eval_mae": rep.mae, "eval_mae_std": rep.mae_std,
                         "eval_fallback_rate": rep.fallback_rate,
                         "eval_mean_predictor_mae": rep.mean_predictor_mae},
                rng={"scheme": "seedseq", "seed": cfg.seed},
            )
            if out is not None:
                path = out / f"checkpoint_ep{epoch:04d}.ckpt"
                save_checkpoint(path, last_ck)
                ck_paths.append(path)

    if last_ck is None:
        raise TrainingError("training ended without a projection checkpoint")
    if out is not None:
        save_checkpoint(out / "checkpoint_final.ckpt", last_ck)
        with open(out / "training_log.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["epoch", "L_m", "L_c", "L_total", "train_MAE", "s"])
            for r in log_rows:
                wr.writerow([r["epoch"], f"{r['L_m']:.17g}", f"{r['L_c']:.17g}",
                             f"{r['L_total']:.17g}", f"{r['train_MAE']:.17g}",
                             f"{r['s']:.17g}"])
    return TrainResult(model=model, checkpoint=last_ck, log_rows=log_rows,
                       checkpoint_paths=ck_paths)


def kfold_split(n_or_dataset, k: int, seed: int = 0) -> list:
    """Disjoint, exhaustive, size-balanced (train, test) index pairs."""
    n = n_or_dataset if isinstance(n_or_dataset, int) else len(n_or_dataset)
    if k < 2:
        raise ValueError(f"kfold_split: k must be >= 2, got {k}")
    if k > n:
        raise ValueError(f"kfold_split: k={k} exceeds n={n}")
    perm = np.random.default_rng(np.random.SeedSequence([0xF01D, seed])).permutation(n)
    folds = np.array_split(perm, k)
    out = []
    for i, fold in enumerate(folds):
        train_idx = np.sort(np.concatenate([f for j, f in enumerate(folds) if j != i]))
        out.append((train_idx, np.sort(fold)))
    return out


ABLATION_VARIANTS = [
    ("full", {}),
    ("no_consistency", {"use_consistency": False}),
    ("no_addon", {"use_addon_h": False}),
    ("no_consistency_no_addon", {"use_consistency": False, "use_addon_h": False}),
    # the consistency loss acts on patch distances, so it is off for avgpool
    ("avgpool", {"use_ot": False, "use_consistency": False}),
]


@dataclass
class AblationReport:
    rows: list                     # dicts: variant, MAE_mean, MAE_std, fallback_rate
    table_text: str


def run_ablation_table(cfg: TrainConfig, dataset: Dataset, out_dir=None) -> AblationReport:
    """Train and evaluate the five ablation variants on fold 0 of the
    k-fold split, identical data order and seeds across variants."""
    train_idx, test_idx = kfold_split(len(dataset), cfg.k_folds, cfg.seed)[0]
    train_ds, test_ds = dataset.subset(train_idx), dataset.subset(test_idx)
    rows = []
    for name, mods in ABLATION_VARIANTS:
        vcfg = cfg.with_overrides(**mods)
        res = train(vcfg, train_ds, val_set=test_ds)
        rep = evaluate(res.checkpoint.model, test_ds)
        rows.append({"variant": name, "MAE_mean": rep.mae, "MAE_std": rep.mae_std,
                     "fallback_rate": rep.fallback_rate})
    width = max(len(r["variant"]) for r in rows)
    lines = [f"{'variant':<{width}}  {'MAE_mean':>10}  {'MAE_std':>10}  {'fallback_rate':>13}"]
    for r in rows:
        lines.append(f"{r['variant']:<{width}}  {r['MAE_mean']:>10.4f}  "
                     f"{r['MAE_std']:>10.4f}  {r['fallback_rate']:>13.4f}")
    text = "\n".join(lines) + "\n"
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation_table.txt").write_text(text)
    return AblationReport(rows=rows, table_text=text)


SWEEP_PARAMETERS = ("beta", "sigma", "n_p", "c_z", "r")


@dataclass
class SweepReport:
    parameter: str
    rows: list                     # dicts: parameter, value, mode, mae, match_accuracy

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["parameter", "value", "mode", "mae", "match_accuracy"])
            for r in self.rows:
                acc = "" if r["match_accuracy"] is None else f"{r['match_accuracy']:.17g}"
                wr.writerow([r["parameter"], f"{r['value']:.17g}", r["mode"],
                             f"{r['mae']:.17g}", acc])


def run_sweep(cfg: TrainConfig, dataset: Dataset, parameter: str, values,
              checkpoint=None, out_dir=None) -> SweepReport:
    """Hyperparameter sweep harness.

    beta: one training per value, reports test MAE and mirror-pair
    patch-matching accuracy. sigma: one training per value, evaluated both
    at the fixed config radius and at r = 3*sigma. n_p / c_z: one training
    per value, MAE only. r: re-evaluates an existing checkpoint across
    radii with zero retraining (checkpoint required).
    """
    from .explain import mirror_matching_accuracy

    if parameter not in SWEEP_PARAMETERS:
        raise ValueError(f"run_sweep: unknown parameter {parameter!r}, "
                         f"expected one of {SWEEP_PARAMETERS}")
    values = list(values)
    if not values:
        raise ValueError("run_sweep: empty value list")
    rows = []

    if parameter == "r":
        if checkpoint is None:
            raise ValueError("run_sweep: the r sweep re-evaluates a trained "
                             "checkpoint; pass one (no retraining happens)")
        model = checkpoint.model
        base_r = model.infer.r
        for v in values:
            model.infer = InferenceConfig(r=float(v))
            rep = evaluate(model, dataset)
            rows.append({"parameter": "r", "value": float(v), "mode": "fixed",
                         "mae": rep.mae, "match_accuracy": None})
        model.infer = InferenceConfig(r=base_r)
    else:
        train_idx, test_idx = kfold_split(len(dataset), cfg.k_folds, cfg.seed)[0]
        train_ds, test_ds = dataset.subset(train_idx), dataset.subset(test_idx)
        key = {"beta": "beta", "sigma": "sigma", "n_p": "n_prototypes", "c_z": "c_z"}[parameter]
        for v in values:
            vcfg = cfg.with_overrides(**{key: type(cfg.mapping[key])(v)})
            res = train(vcfg, train_ds, val_set=test_ds)
            model = res.checkpoint.model
            if parameter == "sigma":
                for mode, r in (("fixed_r", cfg.radius), ("r_3sigma", 3.0 * float(v))):
                    model.infer = InferenceConfig(r=r)
                    rep = evaluate(model, test_ds)
                    rows.append({"parameter": parameter, "value": float(v), "mode": mode,
                                 "mae": rep.mae, "match_accuracy": None})
            else:
                rep = evaluate(model, test_ds)
                acc = mirror_matching_accuracy(model, test_ds) if parameter == "beta" else None
                rows.append({"parameter": parameter, "value": float(v), "mode": "default",
                             "mae": rep.mae, "match_accuracy": acc})

    report = SweepReport(parameter=parameter, rows=rows)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        report.to_csv(Path(out_dir) / f"sweep_{parameter}.csv")
    return report
