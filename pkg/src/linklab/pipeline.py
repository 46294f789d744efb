"""
Training orchestration: corpus loading, the two-phase loop and run artifacts.

Outputs under the run directory:
- `train_log.jsonl`: one `TrainLogRecordV1` line per logged iteration.
- `checkpoints/iter_XXXXXXX.lgl` every `checkpoint_every` steps, `final.lgl` at the end.
- `warmstart.lgl`: the state at the warm-start boundary.
- `samples/iter_XXXXXXX.png`: generator grid from a fixed latent batch.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .models import DataSource, ExperimentConfigV1, TrainLogRecordV1
from .networks import Synthesizer
from .synthdata import load_png_dir, sample_corpus, save_png, stack_images, tile_images
from .training import StepMetrics, TrainingDivergedError, TrainState, draw_batch, init_train_state, train_step


SAMPLE_GRID_SIZE = 16


@dataclass(frozen=True)
class RunPaths:
    root: Path

    @property
    def log(self) -> Path:
        return self.root / "train_log.jsonl"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def samples(self) -> Path:
        return self.root / "samples"

    @property
    def warmstart(self) -> Path:
        return self.root / "warmstart.lgl"

    @property
    def final(self) -> Path:
        return self.root / "final.lgl"

    def checkpoint(self, iteration: int) -> Path:
        return self.checkpoints / f"iter_{iteration:07d}.lgl"

    def sample_grid(self, iteration: int) -> Path:
        return self.samples / f"iter_{iteration:07d}.png"


def load_corpus(config: ExperimentConfigV1) -> np.ndarray:
    """Real images for training, (N, 16, 16, 3) in [-1, 1]."""
    if config.data.source == DataSource.PNG_DIR:
        return np.stack(load_png_dir(Path(config.data.png_dir)))
    return stack_images(sample_corpus(config.seed, config.data.corpus_size))


def sample_latents(config: ExperimentConfigV1, count: int = SAMPLE_GRID_SIZE) -> np.ndarray:
    """Fixed z batch for sample grids; independent of the training streams."""
    return np.random.default_rng(config.seed).standard_normal((count, config.model.d_z))


def log_record(metrics: StepMetrics, wall_time: float) -> TrainLogRecordV1:
    return TrainLogRecordV1(
        iteration=metrics.iteration,
        loss_g=metrics.loss_g,
        loss_d=metrics.loss_d,
        l1=metrics.l1,
        l2=metrics.l2,
        l_reg=metrics.l_reg,
        regularized=metrics.regularized,
        fake_batch_size=metrics.fake_batch_size,
        wall_time=wall_time,
    )


class Trainer:
    """Runs the LinkGAN schedule for one experiment config and writes its artifacts."""

    def __init__(
        self,
        config: ExperimentConfigV1,
        *,
        out_dir: Path | None = None,
        corpus: np.ndarray | None = None,
        logger: logging.Logger | None = None,
        clock: Callable[[], float] = time.perf_counter,
    ) -> None:
        self.config = config
        self.paths = RunPaths(Path(out_dir or config.output_dir))
        self._corpus = corpus
        self.logger = logger or logging.getLogger("linklab.training")
        self.clock = clock
        self.fingerprint = config.fingerprint()

    @property
    def corpus(self) -> np.ndarray:
        if self._corpus is None:
            self._corpus = load_corpus(self.config)
        return self._corpus

    def _write_samples(self, state: TrainState) -> Path:
        synth = Synthesizer.from_state(state.model, chunk_size=self.config.eval.chunk_size)
        images = synth.images(synth.map(sample_latents(self.config)))
        path = self.paths.sample_grid(state.iteration)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_png(tile_images(images), path)
        return path

    def _save(self, state: TrainState, path: Path) -> None:
        save_checkpoint(state, path, self.config)
        self.logger.info(
            "checkpoint_saved",
            extra={"path": str(path), "iteration": state.iteration, "config_fingerprint": self.fingerprint},
        )

    def run(self, state: TrainState | None = None) -> TrainState:
        """Train until `total_iterations`, resuming from `state` when given.

        A fresh run starts a new `train_log.jsonl`; a resumed one appends to it.
        """
        training = self.config.training
        resuming = state is not None and state.iteration > 0
        state = state or init_train_state(self.config)
        corpus = self.corpus
        self.paths.root.mkdir(parents=True, exist_ok=True)
        start = self.clock()

        self.logger.info(
            "train_start",
            extra={
                "config_fingerprint": self.fingerprint,
                "iteration": state.iteration,
                "total_iterations": training.total_iterations,
                "warm_start_iterations": training.warm_start_iterations,
                "links": len(self.config.links),
                "corpus_size": int(corpus.shape[0]),
            },
        )
        if state.iteration == training.warm_start_iterations:
            self._save(state, self.paths.warmstart)

        with self.paths.log.open("a" if resuming else "w", encoding="utf-8") as log_file:
            while state.iteration < training.total_iterations:
                batch, state = draw_batch(state, corpus, training.batch_size)
                try:
                    state = train_step(state, self.config, batch)
                except TrainingDivergedError as err:
                    self.logger.error(
                        "train_diverged",
                        extra={"iteration": err.iteration, "components": err.components},
                    )
                    raise

                metrics = state.last_metrics
                assert metrics is not None
                if metrics.regularized:
                    self.logger.debug(
                        "regularizer_step",
                        extra={"iteration": metrics.iteration, "L1": metrics.l1, "L2": metrics.l2},
                    )
                if metrics.regularized or metrics.iteration % training.log_every == 0:
                    record = log_record(metrics, self.clock() - start)
                    log_file.write(record.model_dump_json(by_alias=True) + "\n")
                    self.logger.info(
                        "train_step",
                        extra={
                            "iteration": metrics.iteration,
                            "L_G": metrics.loss_g,
                            "L_D": metrics.loss_d,
                            "L_reg": metrics.l_reg,
                        },
                    )

                done = state.iteration
                if done == training.warm_start_iterations:
                    self._save(state, self.paths.warmstart)
                if done % training.sample_every == 0:
                    self._write_samples(state)
                if done % training.checkpoint_every == 0:
                    self._save(state, self.paths.checkpoint(done))

        self._save(state, self.paths.final)
        return state
