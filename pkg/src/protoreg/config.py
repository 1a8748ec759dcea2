"""Line-based `key = value` configuration with one global key schema.

Files may carry any subset of the known keys (synthesis, encoder,
training, transport, loss and inference settings share one namespace);
an unknown key is an error. `#` starts a comment; blank lines are
skipped. CLI `--set key=value` overrides take precedence over the file.
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_int_tuple(s: str) -> tuple:
    return tuple(int(p) for p in s.split(",") if p.strip())


def _parse_opt_float(s: str):
    v = s.strip().lower()
    if v in ("", "none"):
        return None
    return float(s)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


# key -> (parser, default); insertion order is the canonical file order
SCHEMA = {
    "seed": (int, 0),
    # synthesis
    "n_samples": (int, 2000),
    "image_size": (int, 32),
    "label_min": (float, 0.0),
    "label_max": (float, 30.0),
    "noise_std": (float, 0.02),
    "occlusion_strength": (float, 0.6),
    # encoder
    "base_channels": (_parse_int_tuple, (8, 16, 32)),
    "c_z": (int, 32),
    # training
    "epochs": (int, 60),
    "batch_size": (int, 16),
    "learning_rate": (float, 0.02),
    "momentum": (float, 0.9),
    "projection_start": (int, 30),
    "projection_interval": (int, 10),
    "use_consistency": (_parse_bool, True),
    "use_addon_h": (_parse_bool, True),
    "use_ot": (_parse_bool, True),
    "k_folds": (int, 5),
    "n_prototypes": (int, 16),
    "proto_label_min": (_parse_opt_float, None),
    "proto_label_max": (_parse_opt_float, None),
    "augment": (_parse_bool, True),
    "augment_rotation_deg": (float, 15.0),
    "augment_translation_px": (float, 6.0),
    "augment_scale_min": (float, 0.95),
    "augment_scale_max": (float, 1.05),
    # transport
    "ot_eps": (float, 0.1),
    "ot_max_iters": (int, 25),
    "ot_marginal_tol": (float, 1e-6),
    "ot_grad_mode": (str, "unrolled"),
    # losses
    "sigma": (float, 1.0),
    "alpha": (float, 0.05),
    "beta": (float, 10.0),
    "gamma": (float, 0.1),
    # inference
    "radius": (float, 3.0),
}


def parse_kv_text(text: str) -> dict:
    """Raw key -> string-value pairs from `key = value` lines."""
    out: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected `key = value`, got {raw!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def resolve(raw: dict | None = None, overrides: dict | None = None) -> dict:
    """Typed config mapping from raw strings plus overrides, with defaults
    filled in. Raises ConfigError for unknown keys or bad values."""
    merged: dict[str, str] = {}
    for source in (raw or {}), (overrides or {}):
        for k, v in source.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = v
    cfg = {}
    for key, (parser, default) in SCHEMA.items():
        if key in merged:
            try:
                cfg[key] = parser(merged[key])
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"bad value for {key!r}: {merged[key]!r} ({exc})")
        else:
            cfg[key] = default
    return cfg


def load_config(path, overrides: dict | None = None) -> dict:
    return resolve(parse_kv_text(Path(path).read_text()), overrides)


def to_text(cfg: dict) -> str:
    """Canonical serialization: every schema key, schema order."""
    lines = [f"{key} = {_fmt(cfg[key])}" for key in SCHEMA]
    return "\n".join(lines) + "\n"


def from_text(text: str) -> dict:
    return resolve(parse_kv_text(text))
