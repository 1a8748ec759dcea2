"""Convolutional feature extractor mapping images to latent patch grids.

The extractor is a base stack of strided 3x3 convolutions with ReLU
(one 2x downsample per stage) followed by an optional add-on head of two
1x1 convolutions whose final activation is a sigmoid, so latent entries
land strictly inside (0, 1). Weights use fan-in-scaled uniform init.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DTensor, ShapeError, conv2d


@dataclass
class EncoderConfig:
    input_shape: tuple = (32, 32)
    base_channels: tuple = (8, 16, 32)
    c_z: int = 32
    use_addon_head: bool = True
    seed: int = 0

    @property
    def num_downsamples(self) -> int:
        return len(self.base_channels)

    @property
    def grid_shape(self) -> tuple:
        h, w = self.input_shape
        f = 2 ** self.num_downsamples
        if h % f or w % f:
            raise ValueError(
                f"EncoderConfig: input {self.input_shape} not divisible by 2^{self.num_downsamples}")
        return (h // f, w // f)

    @property
    def latent_channels(self) -> int:
        return self.c_z if self.use_addon_head else self.base_channels[-1]

    @property
    def latent_shape(self) -> tuple:
        return self.grid_shape + (self.latent_channels,)


@dataclass
class EncoderParams:
    """Named weight tensors, in application order."""

    weights: dict = field(default_factory=dict)

    def tensors(self) -> list[DTensor]:
        return list(self.weights.values())

    def items(self):
        return self.weights.items()


def _fan_in_uniform(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    fan_in = int(np.prod(shape[:-1]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: EncoderConfig, rng_seed: int | None = None) -> EncoderParams:
    """Deterministic fan-in uniform initialization; biases start at zero."""
    seed = config.seed if rng_seed is None else rng_seed
    rng = np.random.default_rng(np.random.SeedSequence([0xE4C0DE, seed]))
    params = EncoderParams()
    c_in = 1
    for i, c_out in enumerate(config.base_channels):
        params.weights[f"g{i}.w"] = DTensor(_fan_in_uniform(rng, (3, 3, c_in, c_out)), requires_grad=True)
        params.weights[f"g{i}.b"] = DTensor(np.zeros(c_out), requires_grad=True)
        c_in = c_out
    if config.use_addon_head:
        params.weights["h0.w"] = DTensor(_fan_in_uniform(rng, (1, 1, c_in, config.c_z)), requires_grad=True)
        params.weights["h0.b"] = DTensor(np.zeros(config.c_z), requires_grad=True)
        params.weights["h1.w"] = DTensor(_fan_in_uniform(rng, (1, 1, config.c_z, config.c_z)), requires_grad=True)
        params.weights["h1.b"] = DTensor(np.zeros(config.c_z), requires_grad=True)
    return params


def encode(image, params: EncoderParams, config: EncoderConfig) -> DTensor:
    """Map an image (h, w, 1) or batch (n, h, w, 1) to its latent grid.

    Output is (grid_h, grid_w, latent_channels), batched accordingly;
    with the add-on head every entry is in (0, 1).
    """
    x = image if isinstance(image, DTensor) else DTensor(image)
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or x.shape[1:] != tuple(config.input_shape) + (1,):
        raise ShapeError(
            f"encode: image shape {image.shape}, expected {tuple(config.input_shape) + (1,)}")
    w = params.weights
    for i in range(len(config.base_channels)):
        x = conv2d(x, w[f"g{i}.w"], w[f"g{i}.b"], stride=2, padding="same").relu()
    if config.use_addon_head:
        x = conv2d(x, w["h0.w"], w["h0.b"], stride=1, padding="valid").relu()
        x = conv2d(x, w["h1.w"], w["h1.b"], stride=1, padding="valid").sigmoid()
    if squeeze:
        x = x.reshape(x.shape[1:])
    return x
