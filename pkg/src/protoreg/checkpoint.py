"""Versioned binary checkpoint container.

Layout: magic "EXPERTCK", format version (u32 LE), a count-prefixed list
of named tensor blocks (u32 name length, name bytes, u32 ndim, u64 dims,
little-endian float64 payload), then a count-prefixed list of named text
blocks (u32 name length, name bytes, u64 byte length, utf-8 payload).
Text blocks hold the config snapshot, the projection log, stored metrics
and the RNG derivation state. Checkpoints are written only straight
after a prototype projection, so every stored prototype is traceable to
a training image.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import config as configmod
from .autodiff import DTensor
from .encoder import EncoderConfig, EncoderParams
from .inference import InferenceConfig
from .model import Model
from .prototypes import ProjectionEntry, ProjectionLog, PrototypeSet
from .transport import OTConfig

MAGIC = b"EXPERTCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: Model
    cfg: dict                 # full config snapshot (typed mapping)
    epoch: int
    metrics: dict             # name -> float (stored evaluation numbers)
    rng: dict                 # RNG derivation state


def _pack_name(name: str) -> bytes:
    nb = name.encode("utf-8")
    return struct.pack("<I", len(nb)) + nb


def _tensor_block(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    head = _pack_name(name) + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return head + arr.astype("<f8").tobytes()


def _text_block(name: str, text: str) -> bytes:
    tb = text.encode("utf-8")
    return _pack_name(name) + struct.pack("<Q", len(tb)) + tb


def _projection_log_text(log: ProjectionLog | None) -> str:
    if log is None:
        return ""
    lines = ["proto_index,sample_id,distance"]
    for e in log.entries:
        lines.append(f"{e.proto_index},{e.sample_id},{e.distance:.17g}")
    return "\n".join(lines) + "\n"


def _projection_log_from_text(text: str) -> ProjectionLog | None:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) <= 1:
        return None
    log = ProjectionLog()
    for ln in lines[1:]:
        k, sid, dist = ln.split(",")
        log.entries.append(ProjectionEntry(int(k), int(sid), float(dist)))
    return log


def _kv_text(d: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in d.items())


def _kv_parse(text: str) -> dict:
    out = {}
    for ln in text.splitlines():
        if not ln.strip():
            continue
        k, v = ln.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def save_checkpoint(path, ck: Checkpoint) -> None:
    model = ck.model
    tensors: list[tuple[str, np.ndarray]] = []
    for name, t in model.encoder_params.items():
        tensors.append((f"enc.{name}", t.data))
    tensors.append(("protos", model.pset.protos.data))
    tensors.append(("proto_labels", model.pset.labels))
    tensors.append(("log_s", np.asarray(model.pset.log_s.data)))

    texts = [
        ("config", configmod.to_text(ck.cfg)),
        ("projection_log", _projection_log_text(model.projection_log)),
        ("metrics", _kv_text({k: f"{v:.17g}" for k, v in ck.metrics.items()})),
        ("rng", _kv_text({**ck.rng, "epoch": ck.epoch})),
    ]

    blob = MAGIC + struct.pack("<I", VERSION)
    blob += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        blob += _tensor_block(name, arr)
    blob += struct.pack("<I", len(texts))
    for name, text in texts:
        blob += _text_block(name, text)
    with open(path, "wb") as fh:
        fh.write(blob)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("truncated checkpoint file")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def name(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    rd = _Reader(raw)
    if rd.take(8) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version = rd.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(rd.u32()):
        name = rd.name()
        ndim = rd.u32()
        shape = tuple(rd.u64() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(rd.take(8 * count), dtype="<f8").reshape(shape)
        tensors[name] = np.array(arr)  # writable copy
    texts: dict[str, str] = {}
    for _ in range(rd.u32()):
        name = rd.name()
        texts[name] = rd.take(rd.u64()).decode("utf-8")

    cfg = configmod.from_text(texts["config"])
    enc_cfg = EncoderConfig(
        input_shape=(cfg["image_size"], cfg["image_size"]),
        base_channels=tuple(cfg["base_channels"]),
        c_z=cfg["c_z"],
        use_addon_head=cfg["use_addon_h"],
        seed=cfg["seed"],
    )
    params = EncoderParams()
    for name, arr in tensors.items():
        if name.startswith("enc."):
            params.weights[name[4:]] = DTensor(arr, requires_grad=True)
    pset = PrototypeSet(
        protos=DTensor(tensors["protos"], requires_grad=True),
        labels=tensors["proto_labels"],
        log_s=DTensor(tensors["log_s"], requires_grad=True),
    )
    model = Model(
        encoder_config=enc_cfg,
        encoder_params=params,
        pset=pset,
        ot=OTConfig(eps=cfg["ot_eps"], max_iters=cfg["ot_max_iters"],
                    marginal_tol=cfg["ot_marginal_tol"], grad_mode=cfg["ot_grad_mode"]),
        infer=InferenceConfig(r=cfg["radius"]),
        use_ot=cfg["use_ot"],
        projection_log=_projection_log_from_text(texts.get("projection_log", "")),
    )
    rng = _kv_parse(texts.get("rng", ""))
    epoch = int(rng.pop("epoch", 0))
    metrics = {k: float(v) for k, v in _kv_parse(texts.get("metrics", "")).items()}
    return Checkpoint(model=model, cfg=cfg, epoch=epoch, metrics=metrics, rng=rng)
