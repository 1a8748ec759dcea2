"""Bundled trained model: encoder, prototype set, configs, projection log.

Latents for projection and for the bit-equality contract are always
computed one image at a time: BLAS results can differ across batch
shapes, and projected prototypes must equal an independent single-image
re-encode bit for bit. Batched encoding is used elsewhere for speed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DTensor
from .encoder import EncoderConfig, EncoderParams, encode
from .inference import InferenceConfig
from .prototypes import (DistanceVector, PrototypeSet, ProjectionLog,
                         avgpool_distance, distances)
from .transport import OTConfig


@dataclass
class Model:
    encoder_config: EncoderConfig
    encoder_params: EncoderParams
    pset: PrototypeSet
    ot: OTConfig
    infer: InferenceConfig
    use_ot: bool = True
    projection_log: ProjectionLog | None = None

    def parameters(self) -> list[DTensor]:
        return self.encoder_params.tensors() + [self.pset.protos, self.pset.log_s]

    def latent(self, image: np.ndarray) -> np.ndarray:
        """Single-image latent, no gradient tracking, reproducible bitwise."""
        return encode(DTensor(image), self.encoder_params, self.encoder_config).data

    def latents(self, images: np.ndarray) -> np.ndarray:
        """Per-sample latents for a stack of images (bit-equal to latent())."""
        return np.stack([self.latent(img) for img in images])

    def latents_batched(self, images: np.ndarray, chunk: int = 128) -> np.ndarray:
        """Faster batched encoding; same values up to BLAS summation order."""
        outs = []
        for start in range(0, images.shape[0], chunk):
            z = encode(DTensor(images[start:start + chunk]),
                       self.encoder_params, self.encoder_config)
            outs.append(z.data)
        return np.concatenate(outs, axis=0)

    def distance_vector(self, image: np.ndarray, keep_plans: bool = False) -> DistanceVector:
        z = DTensor(self.latent(image))
        if self.use_ot:
            return distances(z, self.pset, self.ot, keep_plans=keep_plans)
        return avgpool_distance(z, self.pset)

    def distance_table(self, images: np.ndarray, chunk: int = 64) -> np.ndarray:
        """(n, n_p) scaled-free distances for a stack of images."""
        rows = []
        for start in range(0, images.shape[0], chunk):
            z = DTensor(self.latents_batched(images[start:start + chunk]))
            dv = distances(z, self.pset, self.ot) if self.use_ot \
                else avgpool_distance(z, self.pset)
            rows.append(dv.d.data)
        return np.concatenate(rows, axis=0)
