"""Latent partitioning, structured perturbations and the locality regularizer.

A link binds fragment i of w to an image region. Two perturbations test it:
- linked: N(0, I) on fragment i only; the image must not change outside
  the region (L1, weighted by lambda1).
- complement: N(0, I) everywhere except fragment i; the image must not
  change inside the region (L2, weighted by lambda2).

Losses are sums of squared differences over masked pixel-channels.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Union

import numpy as np

from .autodiff import (
    Tensor,
    as_tensor,
    concat,
    masked_sum_of_squares,
    reduce_sum,
    reshape,
    square,
    take_slice,
)
from .models import IMAGE_SIZE, LatentPartition, LinkSpec, RectRegion, SemanticRegion
from .networks import GeneratorFn
from .synthdata import DEFAULT_SEGMENT_THRESHOLD, rule_segment


LossValue = Union[float, Tensor]


class InvalidPartitionError(ValueError):
    """Raised when a partition does not cover the latent vector exactly."""


class InvalidLinkError(ValueError):
    """Raised for bad fragment indices, overlapping links or bad regions."""


class PerturbationMode(str, Enum):
    LINKED = "linked"
    COMPLEMENT = "complement"


# ---------------------------------------------------------------------
# Partition
# ---------------------------------------------------------------------


def check_partition(partition: LatentPartition, d_w: int) -> None:
    if partition.total != d_w:
        raise InvalidPartitionError(
            f"partition sizes {partition.sizes} sum to {partition.total}, expected {d_w}"
        )


def partition_latent(
    w: Union[np.ndarray, Tensor], partition: LatentPartition
) -> list[Union[np.ndarray, Tensor]]:
    """Split the last axis of w into the partition's contiguous fragments."""
    d_w = w.shape[-1]
    check_partition(partition, d_w)
    fragments: list[Union[np.ndarray, Tensor]] = []
    for index in range(1, partition.k + 1):
        start, stop = partition.bounds(index)
        key = (*([slice(None)] * (len(w.shape) - 1)), slice(start, stop))
        if isinstance(w, Tensor):
            fragments.append(take_slice(w, key))
        else:
            fragments.append(np.array(w[key]))
    return fragments


def fragment_mask(partition: LatentPartition, index: int) -> np.ndarray:
    """0/1 vector over w that is 1 exactly on fragment `index`."""
    if not 1 <= index <= partition.k:
        raise InvalidLinkError(f"fragment index {index} outside 1..{partition.k}")
    start, stop = partition.bounds(index)
    mask = np.zeros(partition.total)
    mask[start:stop] = 1.0
    return mask


def build_perturbation(
    partition: LatentPartition,
    index: int,
    mode: PerturbationMode | str,
    rng: np.random.Generator,
    *,
    batch: int | None = None,
) -> np.ndarray:
    """N(0, I) draw supported on fragment `index` (linked) or off it (complement)."""
    support = fragment_mask(partition, index)
    if PerturbationMode(mode) == PerturbationMode.COMPLEMENT:
        support = 1.0 - support
    shape = (partition.total,) if batch is None else (batch, partition.total)
    return np.where(support > 0, rng.standard_normal(shape), 0.0)


@dataclass(frozen=True)
class LinkPerturbation:
    """Paired draws for one link: `linked` and `complement`, each (B, d_w)."""

    linked: np.ndarray
    complement: np.ndarray


def draw_link_perturbation(
    partition: LatentPartition, link: LinkSpec, rng: np.random.Generator, batch: int = 1
) -> LinkPerturbation:
    linked = build_perturbation(partition, link.fragment, PerturbationMode.LINKED, rng, batch=batch)
    complement = build_perturbation(partition, link.fragment, PerturbationMode.COMPLEMENT, rng, batch=batch)
    return LinkPerturbation(linked=linked, complement=complement)


# ---------------------------------------------------------------------
# Region masks
# ---------------------------------------------------------------------


@dataclass(frozen=True)
class RegionMask:
    """Binary masks: `m2` selects the region, `m1` everything outside it.

    Shapes are (16, 16) for rectangles and (B, 16, 16) for per-instance
    semantic masks.
    """

    m1: np.ndarray
    m2: np.ndarray

    def with_channel_axis(self) -> tuple[np.ndarray, np.ndarray]:
        return self.m1[..., None], self.m2[..., None]

    def take(self, index: int) -> RegionMask:
        if self.m2.ndim == 2:
            return self
        return RegionMask(m1=self.m1[index], m2=self.m2[index])


def rect_mask(region: RectRegion) -> RegionMask:
    if (
        region.top < 0
        or region.left < 0
        or region.top + region.height > IMAGE_SIZE
        or region.left + region.width > IMAGE_SIZE
    ):
        raise InvalidLinkError(f"rect region {region.model_dump()} is outside the image")
    m2 = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    m2[region.top : region.top + region.height, region.left : region.left + region.width] = 1.0
    return RegionMask(m1=1.0 - m2, m2=m2)


def semantic_mask(
    images: np.ndarray, region: SemanticRegion, threshold: float = DEFAULT_SEGMENT_THRESHOLD
) -> RegionMask:
    """Per-instance masks from the rule-based segmenter."""
    batch = images.reshape(-1, IMAGE_SIZE, IMAGE_SIZE, images.shape[-1])
    m2 = np.stack([rule_segment(image, threshold)[region.label] for image in batch])
    return RegionMask(m1=1.0 - m2, m2=m2)


def mask_for(
    link: LinkSpec, images: np.ndarray, threshold: float = DEFAULT_SEGMENT_THRESHOLD
) -> RegionMask:
    if isinstance(link.region, RectRegion):
        return rect_mask(link.region)
    return semantic_mask(images, link.region, threshold)


# ---------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------


@dataclass(frozen=True)
class LocalityTerms:
    """L1/L2 for one link plus the images the discriminator also sees."""

    l1: Tensor
    l2: Tensor
    base: np.ndarray
    perturbed: np.ndarray
    masks: RegionMask
    perturbation: LinkPerturbation


LocalityFn = Callable[..., LocalityTerms]


def locality_losses(
    generator: GeneratorFn,
    w: Union[np.ndarray, Tensor],
    link: LinkSpec,
    masks: RegionMask | None,
    rng: np.random.Generator | None,
    *,
    partition: LatentPartition,
    perturbation: LinkPerturbation | None = None,
    threshold: float = DEFAULT_SEGMENT_THRESHOLD,
) -> LocalityTerms:
    """Locality losses for one link.

    L1 = ||M1 * (G(w + a p) - G(w))||^2 with p linked,
    L2 = ||M2 * (G(w + a p_bar) - G(w))||^2 with p_bar complement.
    Masks broadcast over colour channels. `masks=None` derives them from the
    unperturbed images (needed for semantic regions). Pass `perturbation`
    to reuse draws instead of sampling from `rng`.
    """
    latent = as_tensor(w)
    if latent.ndim == 1:
        latent = reshape(latent, (1, latent.shape[0]))
    check_partition(partition, latent.shape[1])
    batch = latent.shape[0]

    if perturbation is None:
        if rng is None:
            raise ValueError("either rng or perturbation is required")
        perturbation = draw_link_perturbation(partition, link, rng, batch)

    stacked = concat(
        [
            latent,
            latent + link.alpha * perturbation.linked,
            latent + link.alpha * perturbation.complement,
        ],
        axis=0,
    )
    images = generator(stacked)
    base = take_slice(images, slice(0, batch))
    linked_images = take_slice(images, slice(batch, 2 * batch))
    complement_images = take_slice(images, slice(2 * batch, 3 * batch))

    if masks is None:
        masks = mask_for(link, base.data, threshold)
    m1, m2 = masks.with_channel_axis()
    l1 = masked_sum_of_squares(linked_images - base, m1)
    l2 = masked_sum_of_squares(complement_images - base, m2)
    return LocalityTerms(
        l1=l1,
        l2=l2,
        base=base.data,
        perturbed=np.concatenate([linked_images.data, complement_images.data], axis=0),
        masks=masks,
        perturbation=perturbation,
    )


def reference_locality_losses(
    generator: GeneratorFn,
    w: Union[np.ndarray, Tensor],
    link: LinkSpec,
    masks: RegionMask | None,
    rng: np.random.Generator | None,
    *,
    partition: LatentPartition,
    perturbation: LinkPerturbation | None = None,
    threshold: float = DEFAULT_SEGMENT_THRESHOLD,
) -> LocalityTerms:
    """Differentiable stand-in for `locality_losses` built from elementwise ops.

    Each image set runs through the generator separately and the masked sums
    use sub, square, mul and reduce_sum instead of the fused primitive. Same
    signature and rng consumption, so it can replace `locality_losses` in
    `multi_link_loss` and `train_step`.
    """
    latent = as_tensor(w)
    if latent.ndim == 1:
        latent = reshape(latent, (1, latent.shape[0]))
    check_partition(partition, latent.shape[1])
    if perturbation is None:
        if rng is None:
            raise ValueError("either rng or perturbation is required")
        perturbation = draw_link_perturbation(partition, link, rng, latent.shape[0])

    base = generator(latent)
    linked = generator(latent + link.alpha * perturbation.linked)
    complement = generator(latent + link.alpha * perturbation.complement)
    if masks is None:
        masks = mask_for(link, base.data, threshold)
    m1, m2 = masks.with_channel_axis()
    return LocalityTerms(
        l1=reduce_sum(square(linked - base) * m1),
        l2=reduce_sum(square(complement - base) * m2),
        base=base.data,
        perturbed=np.concatenate([linked.data, complement.data], axis=0),
        masks=masks,
        perturbation=perturbation,
    )


def reg_loss(l1: LossValue, l2: LossValue, link: LinkSpec) -> LossValue:
    """L_reg = lambda1 * L1 + lambda2 * L2 (floats or tensors)."""
    return link.lambda1 * l1 + link.lambda2 * l2


@dataclass(frozen=True)
class MultiLinkLoss:
    total: Tensor
    terms: list[LocalityTerms]
    reg_terms: list[Tensor]

    @property
    def perturbed_images(self) -> np.ndarray:
        return np.concatenate([term.perturbed for term in self.terms], axis=0)


def check_disjoint(links: Sequence[LinkSpec]) -> None:
    fragments = [link.fragment for link in links]
    if len(set(fragments)) != len(fragments):
        raise InvalidLinkError(f"links reference overlapping fragments: {fragments}")


def multi_link_loss(
    generator: GeneratorFn,
    w: Union[np.ndarray, Tensor],
    links: Sequence[LinkSpec],
    partition: LatentPartition,
    rng: np.random.Generator | None,
    *,
    perturbations: Sequence[LinkPerturbation] | None = None,
    threshold: float = DEFAULT_SEGMENT_THRESHOLD,
    locality: LocalityFn = locality_losses,
) -> MultiLinkLoss:
    """Sum of per-link L_reg; links draw their perturbations from `rng` in link order.

    `locality` computes each link's terms; `reference_locality_losses` fits here too.
    """
    if not links:
        raise InvalidLinkError("at least one link is required")
    check_disjoint(links)
    if perturbations is not None and len(perturbations) != len(links):
        raise ValueError("one perturbation per link is required")

    terms: list[LocalityTerms] = []
    reg_terms: list[Tensor] = []
    for position, link in enumerate(links):
        term = locality(
            generator,
            w,
            link,
            None,
            rng,
            partition=partition,
            perturbation=None if perturbations is None else perturbations[position],
            threshold=threshold,
        )
        terms.append(term)
        reg_terms.append(as_tensor(reg_loss(term.l1, term.l2, link)))

    total = reg_terms[0]
    for term in reg_terms[1:]:
        total = total + term
    return MultiLinkLoss(total=total, terms=terms, reg_terms=reg_terms)


def brute_force_locality_losses(
    render: Callable[[np.ndarray], np.ndarray],
    w: np.ndarray,
    link: LinkSpec,
    masks: RegionMask,
    perturbation: LinkPerturbation,
) -> tuple[float, float]:
    """Reference L1/L2 from explicit per-pixel loops over materialized images.

    `render` maps one w vector to one (16, 16, 3) image array.
    """
    base = render(w)
    linked = render(w + link.alpha * perturbation.linked[0])
    complement = render(w + link.alpha * perturbation.complement[0])
    m1 = masks.take(0).m1
    m2 = masks.take(0).m2
    l1 = 0.0
    l2 = 0.0
    for row in range(IMAGE_SIZE):
        for col in range(IMAGE_SIZE):
            for channel in range(base.shape[-1]):
                if m1[row, col]:
                    l1 += float(linked[row, col, channel] - base[row, col, channel]) ** 2
                if m2[row, col]:
                    l2 += float(complement[row, col, channel] - base[row, col, channel]) ** 2
    return l1, l2


# ---------------------------------------------------------------------
# Link layout policy
# ---------------------------------------------------------------------


def default_link_weights(n_axes: int) -> tuple[float, float]:
    """(lambda1, lambda2) by fragment size, scaled from 512-d to 64-d latents."""
    if n_axes <= 8:
        return 0.01, 0.04
    if n_axes <= 16:
        return 0.01, 0.03
    return 0.01, 0.01


def suggest_axes(area_fraction: float) -> int:
    """Axis count for a region covering `area_fraction` of the image."""
    if not 0.0 < area_fraction <= 1.0:
        raise ValueError("area_fraction must be in (0, 1]")
    if area_fraction <= 0.25:
        return 8
    if area_fraction <= 0.5:
        return 16
    return 32


def quadrant_region(index: int) -> RectRegion:
    """Quadrants in row-major order: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right."""
    if not 0 <= index < 4:
        raise InvalidLinkError(f"quadrant index {index} outside 0..3")
    half = IMAGE_SIZE // 2
    return RectRegion(top=(index // 2) * half, left=(index % 2) * half, height=half, width=half)


def tokenized_links(d_w: int, grid: int = 2, alpha: float = 1.0) -> tuple[LatentPartition, list[LinkSpec]]:
    """Even partition of w with one rectangular link per grid cell."""
    cells = grid * grid
    if d_w % cells != 0 or IMAGE_SIZE % grid != 0:
        raise InvalidPartitionError(f"cannot tokenize d_w={d_w} into a {grid}x{grid} grid")
    size = d_w // cells
    step = IMAGE_SIZE // grid
    lambda1, lambda2 = default_link_weights(size)
    links = [
        LinkSpec(
            fragment=cell + 1,
            region=RectRegion(top=(cell // grid) * step, left=(cell % grid) * step, height=step, width=step),
            lambda1=lambda1,
            lambda2=lambda2,
            alpha=alpha,
        )
        for cell in range(cells)
    ]
    return LatentPartition(sizes=[size] * cells), links
