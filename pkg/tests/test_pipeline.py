from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from linklab.checkpoint import load_checkpoint, read_header
from linklab.models import (
    DataConfig,
    DataSource,
    ExperimentConfigV1,
    LatentPartition,
    LinkSpec,
    ModelConfig,
    RectRegion,
    TrainingConfig,
)
from linklab.pipeline import RunPaths, Trainer, load_corpus
from linklab.synthdata import sample_corpus, write_corpus
from linklab.training import TrainingDivergedError


class CaptureLogger:
    def __init__(self) -> None:
        self.calls: list[tuple[str, str, dict]] = []

    def _record(self, level: str, event: str, extra: dict | None = None) -> None:
        self.calls.append((level, event, extra or {}))

    def debug(self, event: str, *, extra: dict | None = None) -> None:
        self._record("debug", event, extra)

    def info(self, event: str, *, extra: dict | None = None) -> None:
        self._record("info", event, extra)

    def warning(self, event: str, *, extra: dict | None = None) -> None:
        self._record("warning", event, extra)

    def error(self, event: str, *, extra: dict | None = None) -> None:
        self._record("error", event, extra)

    def events(self, level: str | None = None) -> list[str]:
        return [event for lvl, event, _ in self.calls if level is None or lvl == level]


def make_config(tmp_path: Path, **training) -> ExperimentConfigV1:
    values = {
        "batch_size": 4,
        "total_iterations": 8,
        "warm_start_iterations": 4,
        "lazy_interval": 2,
        "checkpoint_every": 4,
        "sample_every": 4,
        "log_every": 3,
    }
    values.update(training)
    return ExperimentConfigV1(
        model=ModelConfig(d_z=16, d_w=16, channels=8),
        partition=LatentPartition(sizes=[4, 12]),
        links=[LinkSpec(fragment=1, region=RectRegion(top=0, left=0, height=8, width=8))],
        training=TrainingConfig(**values),
        data=DataConfig(corpus_size=16),
        output_dir=str(tmp_path / "run"),
    )


def read_log(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]


def test_run_writes_all_artifacts(tmp_path: Path) -> None:
    config = make_config(tmp_path)
    logger = CaptureLogger()
    state = Trainer(config, logger=logger).run()
    paths = RunPaths(Path(config.output_dir))

    assert state.iteration == 8
    assert paths.final.exists()
    assert read_header(paths.warmstart).iteration == 4
    assert read_header(paths.checkpoint(4)).iteration == 4
    assert read_header(paths.checkpoint(8)).iteration == 8
    with Image.open(paths.sample_grid(8)) as grid:
        assert grid.size == (67, 67)
    assert logger.events("info")[0] == "train_start"
    assert logger.events("info").count("checkpoint_saved") == 4


def test_log_has_regularized_and_periodic_rows(tmp_path: Path) -> None:
    config = make_config(tmp_path)
    Trainer(config, logger=CaptureLogger()).run()
    rows = read_log(RunPaths(Path(config.output_dir)).log)

    assert [row["iteration"] for row in rows] == [0, 3, 4, 6]
    regularized = [row for row in rows if row["regularized"]]
    assert [row["iteration"] for row in regularized] == [4, 6]
    assert all(row["L1"] is not None and row["L2"] is not None for row in regularized)
    assert {"L_G", "L_D", "L_reg", "fake_batch_size", "wall_time"} <= set(rows[0])
    assert rows[0]["L1"] is None


def test_regularizer_steps_logged_at_debug(tmp_path: Path) -> None:
    logger = CaptureLogger()
    Trainer(make_config(tmp_path), logger=logger).run()
    debug = [extra for level, event, extra in logger.calls if event == "regularizer_step"]
    assert [extra["iteration"] for extra in debug] == [4, 6]


def test_runs_are_byte_identical(tmp_path: Path) -> None:
    config = make_config(tmp_path)
    final = Path(config.output_dir) / "final.lgl"
    Trainer(config, logger=CaptureLogger()).run()
    first = final.read_bytes()
    Trainer(config, logger=CaptureLogger()).run()
    assert final.read_bytes() == first


def test_rerun_starts_a_fresh_log(tmp_path: Path) -> None:
    config = make_config(tmp_path)
    log = RunPaths(Path(config.output_dir)).log
    Trainer(config, logger=CaptureLogger()).run()
    Trainer(config, logger=CaptureLogger()).run()

    assert [row["iteration"] for row in read_log(log)] == [0, 3, 4, 6]


def test_resumed_run_appends_to_the_log(tmp_path: Path) -> None:
    config = make_config(tmp_path)
    paths = RunPaths(Path(config.output_dir))
    Trainer(config, logger=CaptureLogger()).run()
    before = read_log(paths.log)
    Trainer(config, logger=CaptureLogger()).run(load_checkpoint(paths.warmstart))

    after = read_log(paths.log)
    assert len(after) > len(before)
    assert [row["iteration"] for row in after[: len(before)]] == [0, 3, 4, 6]


def test_resume_from_warm_start_matches_straight_run(tmp_path: Path) -> None:
    straight = make_config(tmp_path / "straight")
    final = Trainer(straight, logger=CaptureLogger()).run()

    resumed_config = make_config(tmp_path / "resumed")
    Trainer(make_config(tmp_path / "warm", total_iterations=5), logger=CaptureLogger()).run()
    warm = load_checkpoint(tmp_path / "warm" / "run" / "warmstart.lgl")
    resumed = Trainer(resumed_config, logger=CaptureLogger()).run(warm)

    for name, value in final.model.params.items():
        np.testing.assert_array_equal(value, resumed.model.params[name])


def test_divergence_is_logged_and_reraised(tmp_path: Path) -> None:
    config = make_config(tmp_path)
    corpus = np.full((4, 16, 16, 3), np.inf)
    logger = CaptureLogger()
    with pytest.raises(TrainingDivergedError):
        Trainer(config, corpus=corpus, logger=logger).run()
    assert "train_diverged" in logger.events("error")


def test_load_corpus_from_png_dir(tmp_path: Path) -> None:
    write_corpus(sample_corpus(seed=1, count=3), tmp_path / "pngs")
    config = make_config(tmp_path).model_copy(
        update={"data": DataConfig(source=DataSource.PNG_DIR, png_dir=str(tmp_path / "pngs"))}
    )
    corpus = load_corpus(config)
    assert corpus.shape == (3, 16, 16, 3)
