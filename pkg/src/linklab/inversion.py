"""Latent optimization in w and local edits by resampling linked fragments."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .autodiff import GradientTape, NonFiniteError, reduce_mean, square
from .linkreg import InvalidLinkError, PerturbationMode, build_perturbation
from .models import IMAGE_CHANNELS, IMAGE_SIZE, InversionResultV1, LatentPartition, LinkSpec
from .networks import AdamState, DimensionMismatchError, Synthesizer, adam_step


LOGGER = logging.getLogger("linklab.inversion")

IMAGE_SHAPE = (IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS)


class InversionDivergedError(RuntimeError):
    """Raised when the reconstruction loss becomes non-finite."""

    def __init__(self, *, step: int) -> None:
        super().__init__(f"inversion diverged at step {step}")
        self.step = step


@dataclass(frozen=True)
class InversionResult:
    """Best-so-far latent; `trajectory[k]` is the MSE of the iterate before update k."""

    w: np.ndarray
    trajectory: list[float]
    reconstruction: np.ndarray = field(repr=False)
    best_step: int

    @property
    def steps(self) -> int:
        return len(self.trajectory)

    @property
    def final_mse(self) -> float:
        return min(self.trajectory)

    def to_contract(self) -> InversionResultV1:
        return InversionResultV1(
            w=[float(value) for value in self.w],
            trajectory=list(self.trajectory),
            steps=self.steps,
            best_step=self.best_step,
            final_mse=self.final_mse,
        )


def invert(
    generator: Synthesizer,
    target: np.ndarray,
    steps: int = 500,
    lr: float = 0.03,
    *,
    beta1: float = 0.9,
    beta2: float = 0.999,
    mean_samples: int = 1000,
    rng: np.random.Generator | None = None,
    logger: logging.Logger | None = None,
) -> InversionResult:
    """Adam on w from the empirical mean of mapped z draws, minimizing pixel MSE to `target`."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    target = np.asarray(target, dtype=np.float64)
    if target.shape != IMAGE_SHAPE:
        raise DimensionMismatchError(what="target", expected=IMAGE_SHAPE, actual=target.shape)
    if target.min() < -1.0 or target.max() > 1.0:
        raise ValueError("target values must lie in [-1, 1]")

    rng = rng or np.random.default_rng(0)
    params = {"w": generator.mean_w(mean_samples, rng)}
    adam = AdamState.create(params, lr=lr, beta1=beta1, beta2=beta2)

    trajectory: list[float] = []
    best_step = 0
    best_w = params["w"]
    best_image = None
    for step in range(steps):
        try:
            with GradientTape() as tape:
                latent = tape.watch(params["w"])
                image = generator(latent)
                loss = reduce_mean(square(image - target))
            (grad,) = tape.gradient(loss, [latent])
            value = loss.item()
            if not np.isfinite(value):
                raise InversionDivergedError(step=step)
            trajectory.append(value)
            if value < trajectory[best_step] or best_image is None:
                best_step, best_w, best_image = step, params["w"], image.numpy()
            params, adam = adam_step(params, {"w": grad}, adam)
        except NonFiniteError as err:
            raise InversionDivergedError(step=step) from err

    (logger or LOGGER).info(
        "inversion_complete",
        extra={"steps": steps, "best_step": best_step, "final_mse": trajectory[best_step]},
    )
    return InversionResult(
        w=np.array(best_w, dtype=np.float64),
        trajectory=trajectory,
        reconstruction=np.array(best_image),
        best_step=best_step,
    )


# ---------------------------------------------------------------------
# Editing
# ---------------------------------------------------------------------


def _fragment_bounds(partition: LatentPartition, index: int) -> tuple[int, int]:
    if not 1 <= index <= partition.k:
        raise InvalidLinkError(f"fragment index {index} outside 1..{partition.k}")
    return partition.bounds(index)


def resample_fragment(w: np.ndarray, partition: LatentPartition, index: int, values: np.ndarray) -> np.ndarray:
    """Copy of w with fragment `index` replaced by `values`."""
    start, stop = _fragment_bounds(partition, index)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (stop - start,):
        raise DimensionMismatchError(what=f"fragment {index} values", expected=(stop - start,), actual=values.shape)
    edited = np.array(w, dtype=np.float64)
    edited[..., start:stop] = values
    return edited


def draw_fragment(partition: LatentPartition, link: LinkSpec, rng: np.random.Generator) -> np.ndarray:
    """alpha-scaled N(0, I) values for the link's fragment."""
    start, stop = _fragment_bounds(partition, link.fragment)
    draw = build_perturbation(partition, link.fragment, PerturbationMode.LINKED, rng)
    return link.alpha * draw[start:stop]


def resample_links(
    w: np.ndarray, links: Sequence[LinkSpec], partition: LatentPartition, rng: np.random.Generator
) -> np.ndarray:
    """Replace every linked fragment with a fresh draw, in link order."""
    edited = np.array(w, dtype=np.float64)
    for link in links:
        edited = resample_fragment(edited, partition, link.fragment, draw_fragment(partition, link, rng))
    return edited


def local_edit(
    generator: Synthesizer,
    w: np.ndarray,
    link: LinkSpec,
    partition: LatentPartition,
    rng: np.random.Generator,
) -> np.ndarray:
    """G(w) with the link's fragment resampled."""
    return local_edit_many(generator, w, [link], partition, rng)


def local_edit_many(
    generator: Synthesizer,
    w: np.ndarray,
    links: Sequence[LinkSpec],
    partition: LatentPartition,
    rng: np.random.Generator,
) -> np.ndarray:
    edited = resample_links(w, links, partition, rng)
    return generator.images(edited)[0] if edited.ndim == 1 else generator.images(edited)


def linear_edit(w: np.ndarray, direction: np.ndarray, step: float) -> np.ndarray:
    """w + step * direction."""
    w = np.asarray(w, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != w.shape[-1:]:
        raise DimensionMismatchError(what="direction", expected=w.shape[-1:], actual=direction.shape)
    if not np.linalg.norm(direction) > 0:
        raise ValueError("direction must be non-zero")
    return w + step * direction
