from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from linklab.evaluation import (
    EmptyMaskError,
    InsufficientSamplesError,
    QualityDegradation,
    SweepError,
    ablation_sweep,
    evaluate,
    evaluation_rng,
    export_grid,
    export_heatmap,
    export_link_heatmaps,
    format_sweep_table,
    frechet_distance,
    linear_edit_report,
    locality_report,
    masked_mse,
    quality_proxy,
    sweep_config,
)
from linklab.models import (
    DataConfig,
    EvalConfig,
    ExperimentConfigV1,
    LatentPartition,
    LinkSpec,
    ModelConfig,
    RectRegion,
    SweepRowV1,
    SweepTableV1,
    TrainingConfig,
)
from linklab.checkpoint import load_checkpoint
from linklab.networks import Synthesizer, init_params
from linklab.settings import RuntimeSettings
from linklab.synthdata import sample_corpus, stack_images


TOP_LEFT = RectRegion(top=0, left=0, height=8, width=8)


class CaptureLogger:
    def __init__(self) -> None:
        self.calls: list[tuple[str, str, dict]] = []

    def info(self, event: str, *, extra: dict | None = None) -> None:
        self.calls.append(("info", event, extra or {}))

    def debug(self, event: str, *, extra: dict | None = None) -> None:
        self.calls.append(("debug", event, extra or {}))

    def warning(self, event: str, *, extra: dict | None = None) -> None:
        self.calls.append(("warning", event, extra or {}))

    def error(self, event: str, *, extra: dict | None = None) -> None:
        self.calls.append(("error", event, extra or {}))


def make_config(tmp_path: Path | None = None, **eval_overrides) -> ExperimentConfigV1:
    eval_values = {"n_samples": 20, "quality_samples": 16, "min_quality_samples": 8, "chunk_size": 8}
    eval_values.update(eval_overrides)
    return ExperimentConfigV1(
        model=ModelConfig(d_z=16, d_w=16, channels=8),
        partition=LatentPartition(sizes=[4, 12]),
        links=[LinkSpec(fragment=1, region=TOP_LEFT)],
        training=TrainingConfig(batch_size=4, total_iterations=4, warm_start_iterations=2, lazy_interval=2),
        eval=EvalConfig(**eval_values),
        data=DataConfig(corpus_size=16),
        output_dir=str((tmp_path or Path("runs")) / "run"),
    )


def make_generator(seed: int = 0) -> Synthesizer:
    return Synthesizer.from_state(init_params(seed, ModelConfig(d_z=16, d_w=16, channels=8)), chunk_size=8)


def make_constant_generator() -> Synthesizer:
    state = init_params(0, ModelConfig(d_z=16, d_w=16, channels=8))
    zeros = {
        name: np.zeros_like(value)
        for name, value in state.params.items()
        if name.endswith(".style.weight")
    }
    return Synthesizer.from_state(state.updated(zeros))


def test_masked_mse_of_constant_offset() -> None:
    mask = np.zeros((16, 16))
    mask[:4, :4] = 1.0
    assert masked_mse(np.zeros((16, 16, 3)), np.full((16, 16, 3), 2.0), mask) == pytest.approx(4.0)


def test_masked_mse_is_symmetric() -> None:
    rng = np.random.default_rng(0)
    a, b = rng.uniform(-1, 1, (2, 16, 16, 3))
    mask = np.ones((16, 16))
    assert masked_mse(a, b, mask) == pytest.approx(masked_mse(b, a, mask))


def test_masked_mse_is_area_weighted_over_disjoint_masks() -> None:
    rng = np.random.default_rng(1)
    a, b = rng.uniform(-1, 1, (2, 16, 16, 3))
    left = np.zeros((16, 16))
    left[:, :5] = 1.0
    right = 1.0 - left
    combined = (left.sum() * masked_mse(a, b, left) + right.sum() * masked_mse(a, b, right)) / 256.0
    assert masked_mse(a, b, np.ones((16, 16))) == pytest.approx(combined)


def test_masked_mse_rejects_empty_mask() -> None:
    with pytest.raises(EmptyMaskError):
        masked_mse(np.zeros((16, 16, 3)), np.ones((16, 16, 3)), np.zeros((16, 16)))


def test_frechet_distance_examples() -> None:
    assert frechet_distance(np.array([0.0]), np.array([[1.0]]), np.array([1.0]), np.array([[1.0]])).distance == pytest.approx(1.0)
    result = frechet_distance(np.zeros(2), np.eye(2), np.array([1.0, 2.0]), np.eye(2))
    assert result.distance == pytest.approx(5.0)
    assert not result.psd_repaired
    assert frechet_distance(0.0, 1.0, 0.0, 4.0).distance == pytest.approx(1.0)


def test_quality_proxy_of_identical_sets_is_near_zero() -> None:
    images = stack_images(sample_corpus(seed=0, count=200))
    assert quality_proxy(images, images.copy(), min_samples=100).distance == pytest.approx(0.0, abs=1e-4)


def test_quality_proxy_requires_enough_samples() -> None:
    images = np.zeros((10, 16, 16, 3))
    with pytest.raises(InsufficientSamplesError) as excinfo:
        quality_proxy(images, images, min_samples=500)
    assert excinfo.value.required == 500
    assert excinfo.value.got_real == 10


def test_quality_degradation_relative() -> None:
    assert QualityDegradation(regularized=12.8, warm_start=10.0).relative == pytest.approx(0.28)
    assert QualityDegradation(regularized=0.0, warm_start=0.0).relative == 0.0


def test_constant_generator_has_zero_locality_mses() -> None:
    report = locality_report(
        make_constant_generator(), LatentPartition(sizes=[4, 12]), LinkSpec(fragment=1, region=TOP_LEFT), 10, evaluation_rng(0)
    )
    assert report.mse_i_e3 == 0.0
    assert report.mse_o_e3 == 0.0
    assert report.mse_edit_in_e3 == 0.0
    assert report.n_samples == 10
    assert report.skipped_samples == 0


def test_locality_report_is_reproducible_per_seed() -> None:
    generator = make_generator()
    link = LinkSpec(fragment=1, region=TOP_LEFT)
    partition = LatentPartition(sizes=[4, 12])
    first = locality_report(generator, partition, link, 12, evaluation_rng(3))
    second = locality_report(generator, partition, link, 12, evaluation_rng(3))
    assert first == second
    assert first.mse_o_e3 > 0.0


def test_linear_edit_report_on_constant_generator() -> None:
    report = linear_edit_report(
        make_constant_generator(), LatentPartition(sizes=[4, 12]), LinkSpec(fragment=1, region=TOP_LEFT), 6, evaluation_rng(0)
    )
    assert report.mse_edit_in_e3 == 0.0
    assert report.n_samples == 6


def test_evaluate_report_mirrors_first_link() -> None:
    config = make_config()
    report = evaluate(config, make_generator(), checkpoint="final.lgl", logger=CaptureLogger())
    assert report.mse_i_e3 == report.links[0].mse_i_e3
    assert report.n_samples == 20
    assert report.quality_proxy is None
    assert report.config_fingerprint == config.fingerprint()


def test_evaluate_computes_quality_proxy() -> None:
    config = make_config()
    real = stack_images(sample_corpus(seed=0, count=16))
    report = evaluate(config, make_generator(), real_images=real, logger=CaptureLogger())
    assert report.quality_proxy is not None
    assert report.quality_proxy >= 0.0


def test_evaluate_skips_quality_proxy_with_too_few_images() -> None:
    config = make_config(min_quality_samples=50, quality_samples=50)
    logger = CaptureLogger()
    report = evaluate(config, make_generator(), real_images=np.zeros((10, 16, 16, 3)), logger=logger)
    assert report.quality_proxy is None
    warnings = [(event, extra) for level, event, extra in logger.calls if level == "warning"]
    assert warnings == [("quality_proxy_skipped", {"required": 50, "got_real": 10, "got_fake": 50})]


def test_sweep_config_builds_single_link_variant(tmp_path: Path) -> None:
    variant = sweep_config(make_config(tmp_path), 8, tmp_path / "sweep")
    assert variant.partition.sizes == [8, 8]
    assert variant.links[0].fragment == 1
    assert variant.links[0].lambda1 == 0.01
    assert variant.output_dir == str(tmp_path / "sweep" / "dims_008")
    with pytest.raises(ValueError):
        sweep_config(make_config(tmp_path), 16, tmp_path)


def test_ablation_sweep_rows_follow_dims_order(tmp_path: Path) -> None:
    config = make_config(tmp_path)
    corpus = stack_images(sample_corpus(seed=0, count=16))
    table = ablation_sweep(
        config, [8, 4], settings=RuntimeSettings(threads=2), corpus=corpus, logger=CaptureLogger()
    )
    assert [row.dims for row in table.rows] == [8, 4]
    assert (tmp_path / "run" / "sweep" / "dims_004" / "final.lgl").exists()


def test_single_dimension_sweep_matches_evaluate(tmp_path: Path) -> None:
    config = make_config(tmp_path)
    corpus = stack_images(sample_corpus(seed=0, count=16))
    (row,) = ablation_sweep(config, [4], corpus=corpus, logger=CaptureLogger()).rows

    variant = sweep_config(config, 4, tmp_path / "run" / "sweep")
    state = load_checkpoint(Path(variant.output_dir) / "final.lgl")
    generator = Synthesizer.from_state(state.model, chunk_size=variant.eval.chunk_size)
    report = evaluate(variant, generator, logger=CaptureLogger())

    assert row.mse_i_e3 == pytest.approx(report.mse_i_e3, rel=1e-12)
    assert row.mse_o_e3 == pytest.approx(report.mse_o_e3, rel=1e-12)
    assert row.mse_edit_in_e3 == pytest.approx(report.links[0].mse_edit_in_e3, rel=1e-12)

def test_ablation_sweep_wraps_failures(tmp_path: Path) -> None:
    logger = CaptureLogger()
    with pytest.raises(SweepError) as excinfo:
        ablation_sweep(
            make_config(tmp_path), [4], corpus=np.full((4, 16, 16, 3), np.inf), logger=logger
        )
    assert excinfo.value.dims == 4
    assert any(event == "sweep_run_failed" for _, event, _ in logger.calls)


def test_format_sweep_table() -> None:
    table = SweepTableV1(
        rows=[SweepRowV1(dims=4, mse_i_e3=1.5, mse_o_e3=0.25, mse_edit_in_e3=3.0, mse_complement_out_e3=2.0)],
        seed=0,
        config_fingerprint="abc",
    )
    lines = format_sweep_table(table).splitlines()
    assert len(lines) == 2
    assert lines[0].split() == ["dims", "MSE_i(e-3)", "MSE_o(e-3)", "edit_in(e-3)", "compl_out(e-3)"]
    assert lines[1].split() == ["4", "1.5000", "0.2500", "3.0000", "2.0000"]


def test_export_grid_writes_tiled_png(tmp_path: Path) -> None:
    path = export_grid(np.zeros((4, 16, 16, 3)), tmp_path / "grid.png")
    with Image.open(path) as grid:
        assert grid.size == (33, 33)


def test_export_heatmap_writes_scale_sidecar(tmp_path: Path) -> None:
    a = np.zeros((16, 16, 3))
    b = np.zeros((16, 16, 3))
    b[:8, :8] = 0.5
    scale = export_heatmap(a, b, tmp_path / "diff.png")

    assert scale.min == 0.0
    assert scale.max == pytest.approx(0.5)
    sidecar = json.loads((tmp_path / "diff.json").read_text(encoding="utf-8"))
    assert sidecar["max"] == pytest.approx(0.5)
    with Image.open(tmp_path / "diff.png") as image:
        pixels = np.asarray(image)
    assert pixels[0, 0].sum() > pixels[15, 15].sum()


def test_export_link_heatmaps_names_files(tmp_path: Path) -> None:
    written = export_link_heatmaps(
        make_generator(),
        LatentPartition(sizes=[4, 12]),
        LinkSpec(fragment=1, region=TOP_LEFT),
        np.random.default_rng(0),
        tmp_path,
        link_index=2,
        samples=2,
    )
    assert [path.name for path in written] == [
        "link2_s0_linked.png",
        "link2_s0_complement.png",
        "link2_s1_linked.png",
        "link2_s1_complement.png",
    ]
