"""Deterministic synthetic phantom images with a continuous aging label.

Each sample renders a mirror-symmetric head phantom whose structures
change with the label: a fixed outer skull ellipse, a bright cortical
band that thickens, a dark central ventricle that shrinks, and a stack of
horizontal texture stripes whose count grows stepwise. One lateral half
is multiplicatively darkened (the occluded hemisphere); which half stays
visible is a fair coin flip from the sample's own random stream, so
mirroring a left-visible rendering reproduces the right-visible rendering
of the same anatomy exactly (noise aside).

All randomness is derived per sample from (seed, sample_id), so datasets
regenerate bit-identically in any order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pgmio import read_pgm, write_pgm

LEFT, RIGHT = "left", "right"


@dataclass
class SynthConfig:
    n_samples: int = 2000
    image_size: int = 32
    label_min: float = 0.0
    label_max: float = 30.0
    noise_std: float = 0.02
    occlusion_strength: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if not self.label_min < self.label_max:
            raise ValueError(f"SynthConfig: empty label range [{self.label_min}, {self.label_max}]")
        if self.noise_std < 0.0:
            raise ValueError(f"SynthConfig: noise_std must be >= 0, got {self.noise_std}")


@dataclass
class SampleRecord:
    sample_id: int
    image: np.ndarray      # (h, w, 1) floats in [0, 1]
    label: float
    side: str              # which hemisphere is visible
    seed: int


@dataclass
class Dataset:
    images: np.ndarray     # (n, h, w, 1)
    labels: np.ndarray     # (n,)
    sides: list
    ids: np.ndarray        # (n,) sample ids
    seed: int

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(images=self.images[idx], labels=self.labels[idx],
                       sides=[self.sides[i] for i in idx], ids=self.ids[idx],
                       seed=self.seed)


def _sample_rng(seed: int, sample_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([0x5A3D, seed, sample_id]))


def _ellipse_mask(size: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0


def render_phantom(label: float, side: str, cfg: SynthConfig,
                   noise: np.ndarray | None = None) -> np.ndarray:
    """Render one phantom at the given label with one visible hemisphere.

    The base anatomy is exactly fliplr-symmetric; only the occlusion and
    the optional additive noise break the symmetry.
    """
    n = cfg.image_size
    u = (label - cfg.label_min) / (cfg.label_max - cfg.label_min)
    c = (n - 1) / 2.0
    img = np.full((n, n), 0.05)

    # skull: fixed-size ring, brain tissue inside
    sk_ry, sk_rx = 0.46 * n, 0.40 * n
    ring_w = 0.05 * n
    outer = _ellipse_mask(n, c, c, sk_ry, sk_rx)
    inner = _ellipse_mask(n, c, c, sk_ry - ring_w, sk_rx - ring_w)
    img[inner] = 0.35

    # horizontal texture stripes, count steps up with the label
    n_stripes = 1 + int(np.floor(u * 4.999))
    span = 0.52 * n
    for s in range(n_stripes):
        frac = (s + 1) / (n_stripes + 1)
        row = int(round(c - span / 2 + frac * span))
        stripe = np.zeros((n, n), dtype=bool)
        stripe[row, :] = True
        img[stripe & inner] = 0.6

    # cortical band: thickness grows affinely with the label
    thick = (0.03 + 0.11 * u) * n
    band_outer = _ellipse_mask(n, c, c, sk_ry - ring_w, sk_rx - ring_w)
    band_inner = _ellipse_mask(n, c, c, sk_ry - ring_w - thick, sk_rx - ring_w - thick)
    img[band_outer & ~band_inner] = 0.75

    # ventricle: dark ellipse whose area shrinks affinely with the label
    area = (0.045 - 0.035 * u) * n * n
    v_rx = np.sqrt(area / (np.pi * 1.4))
    v_ry = 1.4 * v_rx
    img[_ellipse_mask(n, c, c, v_ry, v_rx)] = 0.08

    img[outer & ~inner] = 0.85

    # occlude the hemisphere opposite the visible one
    factor = 1.0 - cfg.occlusion_strength
    half = n // 2
    if side == LEFT:
        img[:, half:] *= factor
    elif side == RIGHT:
        img[:, :half] *= factor
    else:
        raise ValueError(f"render_phantom: unknown side {side!r}")

    if noise is not None:
        img = img + noise
    return np.clip(img, 0.0, 1.0)[:, :, None]


def make_sample(sample_id: int, cfg: SynthConfig) -> SampleRecord:
    """Regenerable from (sample_id, seed, config) alone, bit-identically."""
    rng = _sample_rng(cfg.seed, sample_id)
    label = float(rng.uniform(cfg.label_min, cfg.label_max))
    side = LEFT if rng.random() < 0.5 else RIGHT
    noise = None
    if cfg.noise_std > 0.0:
        noise = rng.normal(0.0, cfg.noise_std, size=(cfg.image_size, cfg.image_size))
    image = render_phantom(label, side, cfg, noise)
    return SampleRecord(sample_id=sample_id, image=image, label=label,
                        side=side, seed=cfg.seed)


def generate(cfg: SynthConfig, out_dir=None) -> Dataset:
    """Generate the dataset; when out_dir is given, also persist PGM images,
    the CSV manifest and the config as key=value lines."""
    records = [make_sample(i, cfg) for i in range(cfg.n_samples)]
    ds = Dataset(
        images=np.stack([r.image for r in records]),
        labels=np.array([r.label for r in records]),
        sides=[r.side for r in records],
        ids=np.arange(cfg.n_samples),
        seed=cfg.seed,
    )
    if out_dir is not None:
        out = Path(out_dir)
        (out / "images").mkdir(parents=True, exist_ok=True)
        rows = []
        for r in records:
            rel = f"images/sample_{r.sample_id:05d}.pgm"
            write_pgm(out / rel, r.image)
            rows.append((r.sample_id, rel, r.label, r.side, r.seed))
        with open(out / "manifest.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["sample_id", "path", "label", "side", "seed"])
            for row in rows:
                wr.writerow([row[0], row[1], f"{row[2]:.17g}", row[3], row[4]])
        with open(out / "synth_config.cfg", "w") as fh:
            for key, val in (("n_samples", cfg.n_samples), ("image_size", cfg.image_size),
                             ("label_min", cfg.label_min), ("label_max", cfg.label_max),
                             ("noise_std", cfg.noise_std),
                             ("occlusion_strength", cfg.occlusion_strength),
                             ("seed", cfg.seed)):
                fh.write(f"{key} = {val}\n")
    return ds


def load_manifest(path) -> Dataset:
    """Load a dataset back from its CSV manifest; image paths are relative
    to the manifest's directory."""
    base = Path(path).parent
    ids, labels, sides, images, seeds = [], [], [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ids.append(int(row["sample_id"]))
            labels.append(float(row["label"]))
            sides.append(row["side"])
            seeds.append(int(row["seed"]))
            images.append(read_pgm(base / row["path"]))
    if not ids:
        raise ValueError(f"load_manifest: no samples in {path}")
    seed = seeds[0]
    return Dataset(images=np.stack(images), labels=np.array(labels),
                   sides=sides, ids=np.array(ids), seed=seed)


# ---------------------------------------------------------------------------
# geometric transforms


@dataclass
class AugmentConfig:
    max_rotation_deg: float = 15.0
    max_translation_px: float = 6.0
    scale_min: float = 0.95
    scale_max: float = 1.05
    enabled: bool = True


def affine_warp(image: np.ndarray, angle_deg: float, tx: float, ty: float,
                scale: float) -> np.ndarray:
    """Rotate/scale about the image center then translate, bilinear with
    zero fill. The identity parameters reproduce the input exactly."""
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 3
    if squeeze:
        img = img[:, :, 0]
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = np.deg2rad(angle_deg)
    cos_t, sin_t = np.cos(th), np.sin(th)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # invert: out = R(th) * s * (in - c) + c + t
    ys = (yy - cy - ty) / scale
    xs = (xx - cx - tx) / scale
    src_y = cos_t * ys + sin_t * xs + cy
    src_x = -sin_t * ys + cos_t * xs + cx

    y0 = np.floor(src_y).astype(np.intp)
    x0 = np.floor(src_x).astype(np.intp)
    fy = src_y - y0
    fx = src_x - x0
    out = np.zeros_like(img)
    for dy in (0, 1):
        for dx in (0, 1):
            yi = y0 + dy
            xi = x0 + dx
            wgt = (fy if dy else 1.0 - fy) * (fx if dx else 1.0 - fx)
            valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            vals = np.where(valid, img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)], 0.0)
            out += wgt * vals
    out = np.clip(out, 0.0, 1.0)
    return out[:, :, None] if squeeze else out


def augment(image: np.ndarray, rng: np.random.Generator,
            cfg: AugmentConfig | None = None) -> np.ndarray:
    """Random small affine within the configured ranges; returns the input
    unchanged when disabled."""
    cfg = cfg or AugmentConfig()
    if not cfg.enabled:
        return image
    angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
    tx = rng.uniform(-cfg.max_translation_px, cfg.max_translation_px)
    ty = rng.uniform(-cfg.max_translation_px, cfg.max_translation_px)
    scale = rng.uniform(cfg.scale_min, cfg.scale_max)
    return affine_warp(image, angle, tx, ty, scale)


def mirror_transform(image: np.ndarray) -> np.ndarray:
    """Flip about the vertical midline; involutive and bit-exact."""
    return np.ascontiguousarray(image[:, ::-1])


def mirror_permutation(grid_w: int, grid_h: int) -> np.ndarray:
    """Patch-index permutation matching mirror_transform on the latent grid:
    (row, col) -> (row, grid_w - 1 - col), row-major indexing."""
    rows, cols = np.mgrid[0:grid_h, 0:grid_w]
    return (rows * grid_w + (grid_w - 1 - cols)).reshape(-1)
