"""Executable data contracts for linklab.

Every document that crosses a process boundary (experiment configs read by
the CLI, reports and logs written to disk, scene factor manifests) is a
strict Pydantic model defined here. Numeric code elsewhere works on numpy
arrays; these models are the boundary where untrusted JSON becomes typed,
range-checked values.

Design principles used here:
- `extra="forbid"`: unknown keys are rejected, so a typo in a config file
  fails loudly instead of silently falling back to a default.
- Narrow enums/ranges: link weights are non-negative, regions lie inside the
  16x16 canvas, fragment indices are 1-based.
- Cross-field validators: partition sizes must sum to d_w, links must
  reference disjoint fragments, warm start must end before training does.

Versioning note:
- Documents carry a `V1` suffix. Incompatible changes get a new model
  instead of mutating these in place; checkpoints and reports embed the
  config fingerprint so old artifacts stay attributable.
"""

from __future__ import annotations

import hashlib
import json
from enum import Enum
from typing import Annotated, Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator


IMAGE_SIZE = 16
IMAGE_CHANNELS = 3


def sha12(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


class StrictModel(BaseModel):
    """Shared strict behavior for all contracts.

    `extra="forbid"` rejects fields not explicitly defined in the model.
    `str_strip_whitespace=True` trims surrounding whitespace from strings.
    """

    model_config = ConfigDict(extra="forbid", str_strip_whitespace=True)


class SemanticLabel(str, Enum):
    """Labels produced by the rule-based segmenter."""

    OBJECT = "object"
    BACKGROUND = "background"


class DataSource(str, Enum):
    SYNTHETIC = "synthetic"
    PNG_DIR = "png_dir"


class ShapeKind(str, Enum):
    RECT = "rect"
    DISC = "disc"


# ---------------------------------------------------------------------
# Latent partition and links
# ---------------------------------------------------------------------


class RectRegion(StrictModel):
    """Axis-aligned pixel rectangle; must lie inside the 16x16 canvas."""

    kind: Literal["rect"] = "rect"
    top: int = Field(ge=0, lt=IMAGE_SIZE)
    left: int = Field(ge=0, lt=IMAGE_SIZE)
    height: int = Field(ge=1, le=IMAGE_SIZE)
    width: int = Field(ge=1, le=IMAGE_SIZE)

    @model_validator(mode="after")
    def validate_bounds(self) -> RectRegion:
        if self.top + self.height > IMAGE_SIZE or self.left + self.width > IMAGE_SIZE:
            raise ValueError(
                f"rect region ({self.top},{self.left},{self.height},{self.width}) "
                f"exceeds the {IMAGE_SIZE}x{IMAGE_SIZE} image"
            )
        return self

    @property
    def area(self) -> int:
        return self.height * self.width


class SemanticRegion(StrictModel):
    """Region defined per image by the segmenter label."""

    kind: Literal["semantic"] = "semantic"
    label: SemanticLabel


Region = Annotated[RectRegion | SemanticRegion, Field(discriminator="kind")]


class LinkSpec(StrictModel):
    """Binding of one latent fragment to one image region.

    Field intent:
    - `fragment`: 1-based index into the partition.
    - `lambda1`: weight of the out-region change under linked perturbation.
    - `lambda2`: weight of the in-region change under complement perturbation.
    - `alpha`: perturbation strength applied to the N(0, I) draws.
    """

    fragment: int = Field(ge=1)
    region: Region
    lambda1: float = Field(default=0.01, ge=0.0)
    lambda2: float = Field(default=0.04, ge=0.0)
    alpha: float = Field(default=1.0, gt=0.0)


class LatentPartition(StrictModel):
    """Split of w into K contiguous fragments; fragment 1 starts at axis 0."""

    sizes: list[int] = Field(min_length=1)

    @model_validator(mode="after")
    def validate_sizes(self) -> LatentPartition:
        if any(size < 1 for size in self.sizes):
            raise ValueError("every fragment size must be >= 1")
        return self

    @property
    def k(self) -> int:
        return len(self.sizes)

    @property
    def total(self) -> int:
        return sum(self.sizes)

    def bounds(self, fragment: int) -> tuple[int, int]:
        """Half-open axis range [start, stop) of a 1-based fragment."""
        if not 1 <= fragment <= self.k:
            raise ValueError(f"fragment index {fragment} outside 1..{self.k}")
        start = sum(self.sizes[: fragment - 1])
        return start, start + self.sizes[fragment - 1]


def default_link() -> LinkSpec:
    return LinkSpec(
        fragment=1,
        region=RectRegion(top=0, left=0, height=8, width=8),
        lambda1=0.01,
        lambda2=0.04,
        alpha=1.0,
    )


# ---------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------


class ModelConfig(StrictModel):
    d_z: int = Field(default=64, ge=1)
    d_w: int = Field(default=64, ge=1)
    channels: int = Field(default=32, ge=1)
    resolution: Literal[16] = IMAGE_SIZE
    init_gain: float = Field(default=1.0, gt=0.0)
    spatial_bias: bool = True


class TrainingConfig(StrictModel):
    """Two-phase schedule: plain GAN for `warm_start_iterations`, then LinkGAN."""

    batch_size: int = Field(default=16, ge=2)
    total_iterations: int = Field(default=8000, ge=1)
    warm_start_iterations: int = Field(default=3000, ge=0)
    lazy_interval: int = Field(default=8, ge=1)
    lr_g: float = Field(default=2e-3, gt=0.0)
    lr_d: float = Field(default=2e-3, gt=0.0)
    beta1: float = Field(default=0.0, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.99, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)
    scale_lazy_regularizer: bool = False
    feed_perturbed_to_discriminator: bool = True
    checkpoint_every: int = Field(default=1000, ge=1)
    sample_every: int = Field(default=1000, ge=1)
    log_every: int = Field(default=10, ge=1)
    ema_decay: float = Field(default=0.99, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def validate_phases(self) -> TrainingConfig:
        if self.warm_start_iterations >= self.total_iterations:
            raise ValueError("warm_start_iterations must be < total_iterations")
        return self


class EvalConfig(StrictModel):
    n_samples: int = Field(default=2000, ge=1)
    quality_samples: int = Field(default=1000, ge=1)
    min_quality_samples: int = Field(default=500, ge=2)
    chunk_size: int = Field(default=250, ge=1)
    heatmap_samples: int = Field(default=1, ge=1)


class DataConfig(StrictModel):
    source: DataSource = DataSource.SYNTHETIC
    png_dir: str | None = None
    corpus_size: int = Field(default=4096, ge=1)
    segment_threshold: float = Field(default=0.25, gt=0.0, le=2.0)

    @model_validator(mode="after")
    def validate_source(self) -> DataConfig:
        if self.source == DataSource.PNG_DIR and not self.png_dir:
            raise ValueError("png_dir is required when source is png_dir")
        if self.source == DataSource.SYNTHETIC and self.png_dir is not None:
            raise ValueError("png_dir must be null for the synthetic source")
        return self


class InversionConfig(StrictModel):
    steps: int = Field(default=500, ge=1)
    lr: float = Field(default=0.03, gt=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    mean_samples: int = Field(default=1000, ge=1)


class ExperimentConfigV1(StrictModel):
    """Complete experiment document.

    The defaults give the desk-scale setting: d_w = 64, one link
    of 8 axes to the top-left 8x8 quadrant, lambda1 = 0.01, lambda2 = 0.04,
    lazy interval 8, warm start 3000 of 8000 iterations.
    """

    model: ModelConfig = Field(default_factory=ModelConfig)
    partition: LatentPartition = Field(default_factory=lambda: LatentPartition(sizes=[8, 56]))
    links: list[LinkSpec] = Field(default_factory=lambda: [default_link()])
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    inversion: InversionConfig = Field(default_factory=InversionConfig)
    seed: int = Field(default=0, ge=0)
    output_dir: str = Field(default="runs/default", min_length=1)

    @model_validator(mode="after")
    def validate_links(self) -> ExperimentConfigV1:
        """Partition must cover w exactly; links must use distinct, existing fragments."""
        if self.partition.total != self.model.d_w:
            raise ValueError(
                f"partition sizes sum to {self.partition.total}, expected d_w={self.model.d_w}"
            )
        seen: set[int] = set()
        for link in self.links:
            if link.fragment > self.partition.k:
                raise ValueError(
                    f"link fragment {link.fragment} outside partition of {self.partition.k} fragments"
                )
            if link.fragment in seen:
                raise ValueError(f"fragment {link.fragment} is linked more than once")
            seen.add(link.fragment)
        return self

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        return sha12(self.canonical_json())


# ---------------------------------------------------------------------
# Synthetic scene factors
# ---------------------------------------------------------------------


Color = tuple[
    Annotated[float, Field(ge=-1.0, le=1.0)],
    Annotated[float, Field(ge=-1.0, le=1.0)],
    Annotated[float, Field(ge=-1.0, le=1.0)],
]

QUADRANT_SIZE = IMAGE_SIZE // 2


class QuadrantObjectV1(StrictModel):
    """One filled shape inside an 8x8 quadrant, kept one pixel off its edges."""

    shape: ShapeKind
    color: Color
    top: int = Field(ge=1)
    left: int = Field(ge=1)
    size: int = Field(ge=2, le=QUADRANT_SIZE - 2)

    @model_validator(mode="after")
    def validate_margin(self) -> QuadrantObjectV1:
        limit = QUADRANT_SIZE - 1
        if self.top + self.size > limit or self.left + self.size > limit:
            raise ValueError("quadrant object must keep a one-pixel margin")
        return self


class SceneFactorsV1(StrictModel):
    """Factor record that fully determines one synthetic scene."""

    background: Color
    quadrants: list[QuadrantObjectV1] = Field(min_length=4, max_length=4)


# ---------------------------------------------------------------------
# Reports and logs
# ---------------------------------------------------------------------


class LinkLocalityV1(StrictModel):
    """Cross-perturbation masked MSEs for one link, scaled by 1e3.

    - `mse_o_e3`: change outside the region when resampling linked axes.
    - `mse_i_e3`: change inside the region when resampling the complement.
    - `mse_edit_in_e3`: change inside the region when resampling linked axes.
    - `mse_complement_out_e3`: change outside when resampling the complement.
    """

    link_index: int = Field(ge=0)
    link: LinkSpec
    mse_i_e3: float = Field(ge=0.0)
    mse_o_e3: float = Field(ge=0.0)
    mse_edit_in_e3: float = Field(ge=0.0)
    mse_complement_out_e3: float = Field(ge=0.0)
    n_samples: int = Field(ge=1)
    skipped_samples: int = Field(default=0, ge=0)


class EvalReportV1(StrictModel):
    """Evaluation output; top-level MSE fields mirror the first link."""

    mse_i_e3: float = Field(ge=0.0)
    mse_o_e3: float = Field(ge=0.0)
    n_samples: int = Field(ge=1)
    quality_proxy: float | None = Field(default=None, ge=0.0)
    quality_psd_repaired: bool = False
    link: LinkSpec
    links: list[LinkLocalityV1] = Field(min_length=1)
    seed: int = Field(ge=0)
    checkpoint: str | None = None
    config_fingerprint: str = Field(min_length=1)

    @model_validator(mode="after")
    def validate_primary_link(self) -> EvalReportV1:
        primary = self.links[0]
        if (self.mse_i_e3, self.mse_o_e3, self.n_samples) != (
            primary.mse_i_e3,
            primary.mse_o_e3,
            primary.n_samples,
        ):
            raise ValueError("top-level MSE fields must mirror links[0]")
        if self.link != primary.link:
            raise ValueError("link must equal links[0].link")
        return self


class SweepRowV1(StrictModel):
    dims: int = Field(ge=1)
    mse_i_e3: float = Field(ge=0.0)
    mse_o_e3: float = Field(ge=0.0)
    mse_edit_in_e3: float = Field(ge=0.0)
    mse_complement_out_e3: float = Field(ge=0.0)


class SweepTableV1(StrictModel):
    rows: list[SweepRowV1] = Field(min_length=1)
    seed: int = Field(ge=0)
    config_fingerprint: str = Field(min_length=1)


class InversionResultV1(StrictModel):
    """Serialized inversion outcome; `final_mse` is the best trajectory value."""

    w: list[float] = Field(min_length=1)
    trajectory: list[float] = Field(min_length=1)
    steps: int = Field(ge=1)
    best_step: int = Field(ge=0)
    final_mse: float = Field(ge=0.0)

    @model_validator(mode="after")
    def validate_trajectory(self) -> InversionResultV1:
        if len(self.trajectory) != self.steps:
            raise ValueError("trajectory length must equal steps")
        if self.best_step >= self.steps:
            raise ValueError("best_step must index into the trajectory")
        if self.final_mse != min(self.trajectory):
            raise ValueError("final_mse must be the minimum of the trajectory")
        return self


class EditReportV1(StrictModel):
    link_index: int = Field(ge=0)
    seed: int = Field(ge=0)
    inversion: InversionResultV1
    edit_in_mse_e3: float = Field(ge=0.0)
    edit_out_mse_e3: float = Field(ge=0.0)
    config_fingerprint: str = Field(min_length=1)


class TrainLogRecordV1(BaseModel):
    """One line of `train_log.jsonl`; serialized with the loss-symbol aliases."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    iteration: int = Field(ge=0)
    loss_g: float = Field(alias="L_G")
    loss_d: float = Field(alias="L_D")
    l1: float | None = Field(default=None, alias="L1", ge=0.0)
    l2: float | None = Field(default=None, alias="L2", ge=0.0)
    l_reg: float | None = Field(default=None, alias="L_reg", ge=0.0)
    regularized: bool = False
    fake_batch_size: int = Field(ge=1)
    wall_time: float = Field(ge=0.0)
