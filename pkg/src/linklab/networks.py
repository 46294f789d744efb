"""Miniature style-based generator, mapping network, discriminator and Adam.

All parameters of one model live in a single flat mapping whose keys are
prefixed by the owning network (`mapping.`, `generator.`, `discriminator.`).
The forward functions accept either numpy arrays or tape-tracked tensors for
the parameters, so the same code serves training (under a tape) and
evaluation (plain arrays).

Layout of images is (..., H, W, C) with values in [-1, 1].
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from typing import Protocol, Union

import numpy as np

from .autodiff import (
    NonFiniteError,
    Tensor,
    affine,
    as_tensor,
    avg_pool,
    broadcast,
    leaky_relu,
    reshape,
    tanh,
    upsample_nearest,
)
from .models import IMAGE_CHANNELS, IMAGE_SIZE, ModelConfig


SLOPE = 0.2
NUM_BLOCKS = 3
CONST_SIZE = 4
GENERATOR_PREFIXES = ("mapping.", "generator.")
DISCRIMINATOR_PREFIXES = ("discriminator.",)

ParamValue = Union[np.ndarray, Tensor]
Params = Mapping[str, ParamValue]


class DimensionMismatchError(ValueError):
    """Raised when an input does not have the dimension a network expects."""

    def __init__(self, *, what: str, expected: tuple[int, ...], actual: tuple[int, ...]) -> None:
        super().__init__(f"{what}: expected shape {expected}, got {actual}")
        self.what = what
        self.expected = expected
        self.actual = actual


class ParameterShapeError(ValueError):
    """Raised when a parameter array does not match its declared shape."""

    def __init__(self, *, name: str, expected: tuple[int, ...], actual: tuple[int, ...]) -> None:
        super().__init__(f"parameter {name}: expected shape {expected}, got {actual}")
        self.name = name
        self.expected = expected
        self.actual = actual


class GeneratorFn(Protocol):
    """Differentiable map from a batch of w vectors to a batch of images."""

    def __call__(self, w: Tensor) -> Tensor: ...


# ---------------------------------------------------------------------
# Parameter layout and initialization
# ---------------------------------------------------------------------


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Declared shapes in canonical (checkpoint) order."""
    c = config.channels
    shapes: dict[str, tuple[int, ...]] = {
        "mapping.fc0.weight": (config.d_z, config.d_w),
        "mapping.fc0.bias": (config.d_w,),
        "mapping.fc1.weight": (config.d_w, config.d_w),
        "mapping.fc1.bias": (config.d_w,),
        "generator.const": (CONST_SIZE, CONST_SIZE, c),
    }
    for k in range(NUM_BLOCKS):
        resolution = CONST_SIZE * 2**k
        if config.spatial_bias:
            shapes[f"generator.block{k}.spatial"] = (resolution, resolution, c)
        shapes[f"generator.block{k}.style.weight"] = (config.d_w, c)
        shapes[f"generator.block{k}.style.bias"] = (c,)
        shapes[f"generator.block{k}.mix.weight"] = (c, c)
        shapes[f"generator.block{k}.mix.bias"] = (c,)
    shapes["generator.to_rgb.weight"] = (c, IMAGE_CHANNELS)
    shapes["generator.to_rgb.bias"] = (IMAGE_CHANNELS,)

    in_channels = IMAGE_CHANNELS
    for k in range(NUM_BLOCKS):
        shapes[f"discriminator.block{k}.weight"] = (in_channels, c)
        shapes[f"discriminator.block{k}.bias"] = (c,)
        in_channels = c
    final = IMAGE_SIZE // 2**NUM_BLOCKS
    shapes["discriminator.out.weight"] = (final * final * c, 1)
    shapes["discriminator.out.bias"] = (1,)
    return shapes


def _frozen(array: np.ndarray) -> np.ndarray:
    out = np.array(array, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ModelState:
    """Parameters of mapping network, generator and discriminator."""

    config: ModelConfig
    params: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self) -> None:
        expected = parameter_shapes(self.config)
        if list(self.params) != list(expected):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ValueError(f"parameter set mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ParameterShapeError(name=name, expected=shape, actual=self.params[name].shape)

    def subset(self, prefixes: tuple[str, ...]) -> dict[str, np.ndarray]:
        return {name: value for name, value in self.params.items() if name.startswith(prefixes)}

    def updated(self, values: Mapping[str, np.ndarray]) -> ModelState:
        merged = dict(self.params)
        for name, value in values.items():
            merged[name] = _frozen(value)
        return replace(self, params=merged)


def init_params(seed: int, config: ModelConfig | None = None) -> ModelState:
    """Deterministic init: fan-in scaled normal weights, zero biases, N(0, 1) constant."""
    config = config or ModelConfig()
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        if name == "generator.const":
            value = rng.standard_normal(shape)
        elif name.endswith(".weight"):
            value = rng.standard_normal(shape) * (config.init_gain / np.sqrt(shape[0]))
        else:
            value = np.zeros(shape)
        params[name] = _frozen(value)
    return ModelState(config=config, params=params)


# ---------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------


def _batched(x: Tensor, rank: int, what: str, expected: tuple[int, ...]) -> tuple[Tensor, bool]:
    """Promote a single example to a batch of one."""
    if x.ndim == rank and x.shape == expected:
        return reshape(x, (1, *x.shape)), True
    if x.ndim == rank + 1 and x.shape[1:] == expected:
        return x, False
    raise DimensionMismatchError(what=what, expected=expected, actual=x.shape)


def map_latent(params: Params, z: ParamValue) -> Tensor:
    """Mapping network: two affine + leaky_relu layers, z -> w."""
    weight = params["mapping.fc0.weight"]
    x, single = _batched(as_tensor(z), 1, "z", (weight.shape[0],))
    h = leaky_relu(affine(x, weight, params["mapping.fc0.bias"]), SLOPE)
    w = leaky_relu(affine(h, params["mapping.fc1.weight"], params["mapping.fc1.bias"]), SLOPE)
    return reshape(w, w.shape[1:]) if single else w


def generate(params: Params, w: ParamValue) -> Tensor:
    """Synthesis network: learned constant, three modulated 1x1 blocks, tanh RGB."""
    style_weight = params["generator.block0.style.weight"]
    latent, single = _batched(as_tensor(w), 1, "w", (style_weight.shape[0],))
    batch = latent.shape[0]

    const = params["generator.const"]
    channels = const.shape[-1]
    x = broadcast(const, (batch, *const.shape))
    for k in range(NUM_BLOCKS):
        if k > 0:
            x = upsample_nearest(x, 2)
        spatial = params.get(f"generator.block{k}.spatial")
        if spatial is not None:
            x = x + spatial
        style = 1.0 + affine(
            latent, params[f"generator.block{k}.style.weight"], params[f"generator.block{k}.style.bias"]
        )
        x = x * reshape(style, (batch, 1, 1, channels))
        x = leaky_relu(
            affine(x, params[f"generator.block{k}.mix.weight"], params[f"generator.block{k}.mix.bias"]),
            SLOPE,
        )
    image = tanh(affine(x, params["generator.to_rgb.weight"], params["generator.to_rgb.bias"]))
    return reshape(image, image.shape[1:]) if single else image


def discriminate(params: Params, x: ParamValue) -> Tensor:
    """Discriminator: three (avg_pool, per-pixel affine, leaky_relu) blocks and a linear head."""
    images, single = _batched(as_tensor(x), 3, "image", (IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS))
    batch = images.shape[0]
    h = images
    for k in range(NUM_BLOCKS):
        h = avg_pool(h)
        h = leaky_relu(
            affine(h, params[f"discriminator.block{k}.weight"], params[f"discriminator.block{k}.bias"]),
            SLOPE,
        )
    flat = reshape(h, (batch, int(np.prod(h.shape[1:]))))
    logits = affine(flat, params["discriminator.out.weight"], params["discriminator.out.bias"])
    return reshape(logits, ()) if single else reshape(logits, (batch,))


class Synthesizer:
    """Read-only generator view over a parameter snapshot, used outside training.

    Calls with numpy inputs run without a tape in chunks; calling the object
    with a Tensor gives the differentiable generator for linkreg and inversion.
    """

    def __init__(self, params: Mapping[str, np.ndarray], *, chunk_size: int = 250) -> None:
        self.params = {name: value for name, value in params.items() if name.startswith(GENERATOR_PREFIXES)}
        self.chunk_size = chunk_size
        self.d_z = self.params["mapping.fc0.weight"].shape[0]
        self.d_w = self.params["mapping.fc1.weight"].shape[1]

    @classmethod
    def from_state(cls, state: ModelState, *, chunk_size: int = 250) -> Synthesizer:
        return cls(state.params, chunk_size=chunk_size)

    def __call__(self, w: Tensor) -> Tensor:
        return generate(self.params, w)

    def _chunked(self, fn, inputs: np.ndarray) -> np.ndarray:
        parts = [
            fn(self.params, inputs[start : start + self.chunk_size]).numpy()
            for start in range(0, inputs.shape[0], self.chunk_size)
        ]
        return np.concatenate(parts, axis=0)

    def map(self, z: np.ndarray) -> np.ndarray:
        return self._chunked(map_latent, np.atleast_2d(z))

    def images(self, w: np.ndarray) -> np.ndarray:
        return self._chunked(generate, np.atleast_2d(w))

    def sample_w(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.map(rng.standard_normal((n, self.d_z)))

    def mean_w(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.sample_w(n, rng).mean(axis=0)


# ---------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    """Per-parameter moments plus hyperparameters; `step` counts applied updates."""

    lr: float
    beta1: float
    beta2: float
    eps: float
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    v: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @classmethod
    def create(
        cls,
        params: Mapping[str, np.ndarray],
        *,
        lr: float,
        beta1: float = 0.0,
        beta2: float = 0.99,
        eps: float = 1e-8,
    ) -> AdamState:
        zeros = {name: np.zeros_like(value, dtype=np.float64) for name, value in params.items()}
        return cls(
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            m=zeros,
            v={name: np.zeros_like(value) for name, value in zeros.items()},
        )


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new parameter values and state."""
    if state.lr <= 0:
        raise ValueError("lr must be > 0")
    for name, grad in grads.items():
        if name not in params or name not in state.m:
            raise KeyError(f"no parameter or moment named {name}")
        if grad.shape != params[name].shape or state.m[name].shape != grad.shape:
            raise ParameterShapeError(name=name, expected=params[name].shape, actual=grad.shape)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(where=f"gradient of {name}")

    step = state.step + 1
    bias1 = 1.0 - state.beta1**step
    bias2 = 1.0 - state.beta2**step
    new_params = dict(params)
    m = dict(state.m)
    v = dict(state.v)
    for name, grad in grads.items():
        m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * grad
        v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * grad * grad
        update = state.lr * (m[name] / bias1) / (np.sqrt(v[name] / bias2) + state.eps)
        new_params[name] = params[name] - update
    return new_params, replace(state, step=step, m=m, v=v)
