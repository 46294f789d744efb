"""Locality metrics, the Fréchet quality proxy, ablation sweeps and image exports.

Masked MSEs are reported scaled by 1e3. For a link with out-of-region mask
M1 and in-region mask M2, each sample w yields four numbers:

    mse_o          = mse(G(w + a p), G(w); M1)      linked axes leaking out
    mse_i          = mse(G(w + a p_bar), G(w); M2)  other axes leaking in
    mse_edit_in    = mse(G(w + a p), G(w); M2)      intended change
    mse_complement_out = mse(G(w + a p_bar), G(w); M1)
"""

from __future__ import annotations

import json
import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import linalg

from .inversion import linear_edit
from .linkreg import (
    PerturbationMode,
    build_perturbation,
    check_partition,
    draw_link_perturbation,
    fragment_mask,
    mask_for,
)
from .models import (
    EvalReportV1,
    ExperimentConfigV1,
    LatentPartition,
    LinkLocalityV1,
    LinkSpec,
    SweepRowV1,
    SweepTableV1,
)
from .networks import SLOPE, Synthesizer
from .pipeline import Trainer, load_corpus
from .settings import RuntimeSettings
from .synthdata import DEFAULT_SEGMENT_THRESHOLD, save_png, tile_images


LOGGER = logging.getLogger("linklab.evaluation")

E3 = 1e3
EVAL_STREAM_KEY = 0x6576616C
FEATURE_DIM = 64
FEATURE_SEED = 0

# Anchor colours of a viridis-like ramp, dark to bright.
_RAMP = np.array(
    [
        [0.267, 0.005, 0.329],
        [0.231, 0.322, 0.545],
        [0.129, 0.569, 0.553],
        [0.369, 0.788, 0.384],
        [0.993, 0.906, 0.144],
    ]
)


class EmptyMaskError(ValueError):
    """Raised when a mask selects no pixels."""


class InsufficientSamplesError(ValueError):
    def __init__(self, *, required: int, got_real: int, got_fake: int) -> None:
        super().__init__(f"quality proxy needs >= {required} images per set, got real={got_real} fake={got_fake}")
        self.required = required
        self.got_real = got_real
        self.got_fake = got_fake


class SweepError(RuntimeError):
    """A sweep run failed; `dims` names the linking dimensionality."""

    def __init__(self, *, dims: int, reason: str) -> None:
        super().__init__(f"sweep run for dims={dims} failed: {reason}")
        self.dims = dims


def evaluation_rng(seed: int) -> np.random.Generator:
    """Stream used by every evaluation command for a given experiment seed."""
    return np.random.default_rng([seed, EVAL_STREAM_KEY])


# ---------------------------------------------------------------------
# Masked MSE and locality
# ---------------------------------------------------------------------


def _channel_mask(mask: np.ndarray, like: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == like.ndim - 1:
        mask = mask[..., None]
    return np.broadcast_to(mask, like.shape)


def masked_mse(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """Mean of (a - b)^2 over the masked pixel-channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    full = _channel_mask(mask, a)
    total = full.sum()
    if total <= 0:
        raise EmptyMaskError("mask selects no pixels")
    return float(np.sum(full * (a - b) ** 2) / total)


def _per_sample_mse(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample masked MSE plus a validity flag (non-empty mask)."""
    full = _channel_mask(mask, a)
    totals = full.sum(axis=(1, 2, 3))
    sums = np.sum(full * (a - b) ** 2, axis=(1, 2, 3))
    valid = totals > 0
    return np.where(valid, sums / np.where(valid, totals, 1.0), 0.0), valid


def locality_report(
    generator: Synthesizer,
    partition: LatentPartition,
    link: LinkSpec,
    n_samples: int,
    rng: np.random.Generator,
    *,
    link_index: int = 0,
    threshold: float = DEFAULT_SEGMENT_THRESHOLD,
) -> LinkLocalityV1:
    """Cross-perturbation masked MSEs averaged over `n_samples` latents.

    Semantic masks come from each unperturbed image; samples whose region or
    its complement is empty are skipped and counted.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    check_partition(partition, generator.d_w)
    w = generator.sample_w(n_samples, rng)
    perturbation = draw_link_perturbation(partition, link, rng, n_samples)

    base = generator.images(w)
    linked = generator.images(w + link.alpha * perturbation.linked)
    complement = generator.images(w + link.alpha * perturbation.complement)
    if not (np.all(np.isfinite(linked)) and np.all(np.isfinite(complement))):
        raise ValueError("generator produced non-finite images")

    masks = mask_for(link, base, threshold)
    m1 = np.broadcast_to(masks.m1, base.shape[:-1])
    m2 = np.broadcast_to(masks.m2, base.shape[:-1])
    mse_o, valid_out = _per_sample_mse(linked, base, m1)
    mse_i, valid_in = _per_sample_mse(complement, base, m2)
    edit_in, _ = _per_sample_mse(linked, base, m2)
    complement_out, _ = _per_sample_mse(complement, base, m1)

    valid = valid_out & valid_in
    used = int(valid.sum())
    if used == 0:
        raise EmptyMaskError(f"link region is empty or full for all {n_samples} samples")

    def mean(values: np.ndarray) -> float:
        return float(values[valid].mean() * E3)

    return LinkLocalityV1(
        link_index=link_index,
        link=link,
        mse_i_e3=mean(mse_i),
        mse_o_e3=mean(mse_o),
        mse_edit_in_e3=mean(edit_in),
        mse_complement_out_e3=mean(complement_out),
        n_samples=used,
        skipped_samples=n_samples - used,
    )


@dataclass(frozen=True)
class LinearEditReport:
    """In/out masked MSE (x1e3) of additive edits along a fragment-confined direction."""

    mse_edit_in_e3: float
    mse_o_e3: float
    n_samples: int


def linear_edit_report(
    generator: Synthesizer,
    partition: LatentPartition,
    link: LinkSpec,
    n_samples: int,
    rng: np.random.Generator,
    *,
    threshold: float = DEFAULT_SEGMENT_THRESHOLD,
) -> LinearEditReport:
    """Additive-edit baseline: step length alpha * sqrt(fragment size) along a random unit direction."""
    w = generator.sample_w(n_samples, rng)
    direction = build_perturbation(partition, link.fragment, PerturbationMode.LINKED, rng)
    direction = direction / np.linalg.norm(direction)
    step = link.alpha * np.sqrt(fragment_mask(partition, link.fragment).sum())
    edited = generator.images(np.stack([linear_edit(row, direction, step) for row in w]))
    base = generator.images(w)

    masks = mask_for(link, base, threshold)
    edit_in, valid_in = _per_sample_mse(edited, base, np.broadcast_to(masks.m2, base.shape[:-1]))
    out, valid_out = _per_sample_mse(edited, base, np.broadcast_to(masks.m1, base.shape[:-1]))
    valid = valid_in & valid_out
    if not valid.any():
        raise EmptyMaskError("link region is empty or full for all samples")
    return LinearEditReport(
        mse_edit_in_e3=float(edit_in[valid].mean() * E3),
        mse_o_e3=float(out[valid].mean() * E3),
        n_samples=int(valid.sum()),
    )


# ---------------------------------------------------------------------
# Quality proxy
# ---------------------------------------------------------------------


@lru_cache(maxsize=1)
def _feature_weights() -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(FEATURE_SEED)
    first = rng.standard_normal((FEATURE_DIM, FEATURE_DIM)) / np.sqrt(FEATURE_DIM)
    second = rng.standard_normal((FEATURE_DIM, FEATURE_DIM)) / np.sqrt(FEATURE_DIM)
    first.setflags(write=False)
    second.setflags(write=False)
    return first, second


def quality_features(images: np.ndarray) -> np.ndarray:
    """Fixed random features: 8x8 grayscale, then two affine + leaky_relu layers."""
    images = np.asarray(images, dtype=np.float64)
    gray = images.mean(axis=-1)
    n, height, width = gray.shape
    pooled = gray.reshape(n, height // 2, 2, width // 2, 2).mean(axis=(2, 4)).reshape(n, -1)
    first, second = _feature_weights()
    hidden = pooled @ first
    hidden = np.where(hidden > 0, hidden, SLOPE * hidden)
    out = hidden @ second
    return np.where(out > 0, out, SLOPE * out)


@dataclass(frozen=True)
class FrechetResult:
    distance: float
    psd_repaired: bool


def _psd_sqrt(matrix: np.ndarray) -> tuple[np.ndarray, bool]:
    values, vectors = linalg.eigh((matrix + matrix.T) / 2.0)
    repaired = bool(np.any(values < 0))
    root = np.sqrt(np.clip(values, 0.0, None))
    return (vectors * root) @ vectors.T, repaired


def frechet_distance(
    mu1: np.ndarray, sigma1: np.ndarray, mu2: np.ndarray, sigma2: np.ndarray
) -> FrechetResult:
    """||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)), with negative eigenvalues clamped to 0."""
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    sigma1, sigma2 = np.atleast_2d(sigma1).astype(np.float64), np.atleast_2d(sigma2).astype(np.float64)
    if mu1.shape != mu2.shape or sigma1.shape != sigma2.shape:
        raise ValueError("mean vectors and covariances must have matching shapes")

    root1, repaired1 = _psd_sqrt(sigma1)
    # tr((S1 S2)^(1/2)) = tr((S1^(1/2) S2 S1^(1/2))^(1/2)), the inner product is symmetric
    inner = root1 @ sigma2 @ root1
    values = linalg.eigh((inner + inner.T) / 2.0, eigvals_only=True)
    repaired2 = bool(np.any(values < 0))
    cross = float(np.sum(np.sqrt(np.clip(values, 0.0, None))))

    diff = mu1 - mu2
    distance = float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * cross)
    return FrechetResult(distance=max(distance, 0.0), psd_repaired=repaired1 or repaired2 or distance < 0)


def quality_proxy(real_images: np.ndarray, fake_images: np.ndarray, *, min_samples: int = 500) -> FrechetResult:
    if len(real_images) < min_samples or len(fake_images) < min_samples:
        raise InsufficientSamplesError(
            required=min_samples, got_real=len(real_images), got_fake=len(fake_images)
        )
    real = quality_features(real_images)
    fake = quality_features(fake_images)
    return frechet_distance(
        real.mean(axis=0), np.cov(real, rowvar=False), fake.mean(axis=0), np.cov(fake, rowvar=False)
    )


@dataclass(frozen=True)
class QualityDegradation:
    regularized: float
    warm_start: float

    @property
    def relative(self) -> float:
        """(regularized - warm start) / warm start; +0.28 means 28% worse."""
        if self.warm_start == 0:
            return 0.0 if self.regularized == 0 else float("inf")
        return (self.regularized - self.warm_start) / self.warm_start


def quality_degradation(
    real_images: np.ndarray,
    regularized: Synthesizer,
    warm_start: Synthesizer,
    n_samples: int,
    rng: np.random.Generator,
    *,
    min_samples: int = 500,
) -> QualityDegradation:
    """Quality proxy of the regularized model vs its warm-start snapshot on the same latents."""
    z = rng.standard_normal((n_samples, regularized.d_z))
    real = real_images[:n_samples]
    after = quality_proxy(real, regularized.images(regularized.map(z)), min_samples=min_samples)
    before = quality_proxy(real, warm_start.images(warm_start.map(z)), min_samples=min_samples)
    return QualityDegradation(regularized=after.distance, warm_start=before.distance)


# ---------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------


def evaluate(
    config: ExperimentConfigV1,
    generator: Synthesizer,
    *,
    real_images: np.ndarray | None = None,
    checkpoint: str | None = None,
    logger: logging.Logger | None = None,
) -> EvalReportV1:
    """Locality for every link plus the quality proxy (when enough real images exist)."""
    logger = logger or LOGGER
    rng = evaluation_rng(config.seed)
    links = [
        locality_report(
            generator,
            config.partition,
            link,
            config.eval.n_samples,
            rng,
            link_index=index,
            threshold=config.data.segment_threshold,
        )
        for index, link in enumerate(config.links)
    ]

    quality: FrechetResult | None = None
    if real_images is not None:
        count = config.eval.quality_samples
        fakes = generator.images(generator.sample_w(count, rng))
        try:
            quality = quality_proxy(real_images[:count], fakes, min_samples=config.eval.min_quality_samples)
        except InsufficientSamplesError as err:
            logger.warning(
                "quality_proxy_skipped",
                extra={"required": err.required, "got_real": err.got_real, "got_fake": err.got_fake},
            )

    primary = links[0]
    return EvalReportV1(
        mse_i_e3=primary.mse_i_e3,
        mse_o_e3=primary.mse_o_e3,
        n_samples=primary.n_samples,
        quality_proxy=None if quality is None else quality.distance,
        quality_psd_repaired=False if quality is None else quality.psd_repaired,
        link=primary.link,
        links=links,
        seed=config.seed,
        checkpoint=checkpoint,
        config_fingerprint=config.fingerprint(),
    )


def sweep_config(config: ExperimentConfigV1, dims: int, out_dir: Path) -> ExperimentConfigV1:
    """Single-link variant of `config` with `dims` linked axes in fragment 1."""
    d_w = config.model.d_w
    if not 1 <= dims < d_w:
        raise ValueError(f"dims must be in 1..{d_w - 1}, got {dims}")
    if len(config.links) != 1:
        raise ValueError("ablation sweeps need a single-link config")
    link = config.links[0].model_copy(update={"fragment": 1})
    payload = config.model_dump(mode="json")
    payload.update(
        partition={"sizes": [dims, d_w - dims]},
        links=[link.model_dump(mode="json")],
        output_dir=str(out_dir / f"dims_{dims:03d}"),
    )
    return ExperimentConfigV1.model_validate(payload)


def ablation_sweep(
    config: ExperimentConfigV1,
    dims: Sequence[int],
    *,
    out_dir: Path | None = None,
    settings: RuntimeSettings | None = None,
    corpus: np.ndarray | None = None,
    logger: logging.Logger | None = None,
) -> SweepTableV1:
    """Train one model per dimensionality and report its locality; rows follow `dims` order."""
    if not dims:
        raise ValueError("dims must not be empty")
    logger = logger or LOGGER
    settings = settings or RuntimeSettings()
    root = Path(out_dir or config.output_dir) / "sweep"
    variants = [sweep_config(config, d, root) for d in dims]
    shared = load_corpus(config) if corpus is None else corpus

    def run(variant: ExperimentConfigV1) -> SweepRowV1:
        size = variant.partition.sizes[0]
        logger.info("sweep_run_start", extra={"dims": size, "output_dir": variant.output_dir})
        try:
            state = Trainer(variant, corpus=shared, logger=logger).run()
            generator = Synthesizer.from_state(state.model, chunk_size=variant.eval.chunk_size)
            report = locality_report(
                generator,
                variant.partition,
                variant.links[0],
                variant.eval.n_samples,
                evaluation_rng(variant.seed),
                threshold=variant.data.segment_threshold,
            )
        except Exception as err:
            logger.error("sweep_run_failed", extra={"dims": size, "error": repr(err)})
            raise SweepError(dims=size, reason=str(err)) from err
        return SweepRowV1(
            dims=size,
            mse_i_e3=report.mse_i_e3,
            mse_o_e3=report.mse_o_e3,
            mse_edit_in_e3=report.mse_edit_in_e3,
            mse_complement_out_e3=report.mse_complement_out_e3,
        )

    workers = max(1, min(settings.threads, len(variants)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        rows = list(pool.map(run, variants))
    return SweepTableV1(rows=rows, seed=config.seed, config_fingerprint=config.fingerprint())


def format_sweep_table(table: SweepTableV1) -> str:
    header = ("dims", "MSE_i(e-3)", "MSE_o(e-3)", "edit_in(e-3)", "compl_out(e-3)")
    body = [
        (str(row.dims), f"{row.mse_i_e3:.4f}", f"{row.mse_o_e3:.4f}", f"{row.mse_edit_in_e3:.4f}", f"{row.mse_complement_out_e3:.4f}")
        for row in table.rows
    ]
    widths = [max(len(line[col]) for line in [header, *body]) for col in range(len(header))]
    lines = ["  ".join(cell.rjust(width) for cell, width in zip(line, widths)) for line in [header, *body]]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------
# Image exports
# ---------------------------------------------------------------------


def export_grid(images: Sequence[np.ndarray] | np.ndarray, path: Path, columns: int | None = None) -> Path:
    if len(images) == 0:
        raise ValueError("export_grid needs at least one image")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_png(tile_images(images, columns), path)
    return path


def colorize(values: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] onto the ramp; returns RGB in [-1, 1]."""
    positions = np.linspace(0.0, 1.0, len(_RAMP))
    rgb = np.stack([np.interp(values, positions, _RAMP[:, c]) for c in range(3)], axis=-1)
    return rgb * 2.0 - 1.0


@dataclass(frozen=True)
class HeatmapScale:
    min: float
    max: float


def export_heatmap(a: np.ndarray, b: np.ndarray, path: Path) -> HeatmapScale:
    """Per-pixel mean |a - b| over channels, min -> dark, max -> bright; scale in `<path>.json`."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    diff = np.abs(a - b).mean(axis=-1)
    low, high = float(diff.min()), float(diff.max())
    scaled = (diff - low) / (high - low) if high > low else np.zeros_like(diff)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_png(colorize(scaled), path)
    sidecar = {"min": low, "max": high, "ramp": "viridis", "quantity": "mean_abs_channel_difference"}
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n", encoding="utf-8")
    return HeatmapScale(min=low, max=high)


def export_link_heatmaps(
    generator: Synthesizer,
    partition: LatentPartition,
    link: LinkSpec,
    rng: np.random.Generator,
    out_dir: Path,
    *,
    link_index: int = 0,
    samples: int = 1,
) -> list[Path]:
    """Linked-resample and complement-resample difference heatmaps for one link."""
    w = generator.sample_w(samples, rng)
    perturbation = draw_link_perturbation(partition, link, rng, samples)
    base = generator.images(w)
    linked = generator.images(w + link.alpha * perturbation.linked)
    complement = generator.images(w + link.alpha * perturbation.complement)
    written: list[Path] = []
    for k in range(samples):
        for kind, images in (("linked", linked), ("complement", complement)):
            path = Path(out_dir) / f"link{link_index}_s{k}_{kind}.png"
            export_heatmap(images[k], base[k], path)
            written.append(path)
    return written
