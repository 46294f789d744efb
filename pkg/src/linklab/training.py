"""Adversarial losses, the lazy regularizer schedule and one training step.

`train_step` is a pure function of (state, config, real batch): it copies the
rng streams it consumes and returns a new `TrainState`, so a state restored
from a checkpoint continues exactly like an uninterrupted run.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from .autodiff import (
    GradientTape,
    NonFiniteError,
    Tensor,
    as_tensor,
    reduce_mean,
    softplus,
    take_slice,
)
from .linkreg import LinkPerturbation, LocalityFn, draw_link_perturbation, locality_losses, multi_link_loss
from .models import ExperimentConfigV1, TrainingConfig
from .networks import (
    DISCRIMINATOR_PREFIXES,
    GENERATOR_PREFIXES,
    AdamState,
    ModelState,
    adam_step,
    discriminate,
    generate,
    init_params,
    map_latent,
)


RNG_STREAMS = ("init", "data", "latent", "perturb")


class TrainingDivergedError(RuntimeError):
    """Raised when a loss component or gradient stops being finite."""

    def __init__(self, *, iteration: int, components: dict[str, float | None]) -> None:
        shown = ", ".join(f"{name}={value}" for name, value in components.items())
        super().__init__(f"training diverged at iteration {iteration}: {shown}")
        self.iteration = iteration
        self.components = components


# ---------------------------------------------------------------------
# Losses and schedule
# ---------------------------------------------------------------------


def g_loss(logits_fake: Tensor) -> Tensor:
    """Non-saturating generator loss: mean softplus(-logit) over fakes."""
    return reduce_mean(softplus(-as_tensor(logits_fake)))


def d_loss(logits_real: Tensor, logits_fake: Tensor) -> Tensor:
    return reduce_mean(softplus(-as_tensor(logits_real))) + reduce_mean(softplus(as_tensor(logits_fake)))


def reg_schedule(iteration: int, config: TrainingConfig) -> bool:
    """True on the first post-warm-start iteration and every `lazy_interval` after it."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if iteration < config.warm_start_iterations:
        return False
    return (iteration - config.warm_start_iterations) % config.lazy_interval == 0


# ---------------------------------------------------------------------
# State
# ---------------------------------------------------------------------


def clone_rng(rng: np.random.Generator) -> np.random.Generator:
    copy = np.random.Generator(type(rng.bit_generator)())
    copy.bit_generator.state = rng.bit_generator.state
    return copy


@dataclass(frozen=True)
class RngStreams:
    """Independent PCG64 streams spawned from the experiment seed."""

    data: np.random.Generator
    latent: np.random.Generator
    perturb: np.random.Generator

    @classmethod
    def spawn(cls, seed: int) -> tuple[int, RngStreams]:
        """Returns (parameter-init seed, streams)."""
        init, data, latent, perturb = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
        streams = cls(
            data=np.random.default_rng(data),
            latent=np.random.default_rng(latent),
            perturb=np.random.default_rng(perturb),
        )
        return int(init.generate_state(1)[0]), streams

    def states(self) -> dict[str, dict[str, Any]]:
        return {
            "data": self.data.bit_generator.state,
            "latent": self.latent.bit_generator.state,
            "perturb": self.perturb.bit_generator.state,
        }

    @classmethod
    def from_states(cls, states: dict[str, dict[str, Any]]) -> RngStreams:
        def restore(state: dict[str, Any]) -> np.random.Generator:
            rng = np.random.Generator(np.random.PCG64())
            rng.bit_generator.state = state
            return rng

        return cls(
            data=restore(states["data"]),
            latent=restore(states["latent"]),
            perturb=restore(states["perturb"]),
        )

    def copy(self) -> RngStreams:
        return RngStreams(clone_rng(self.data), clone_rng(self.latent), clone_rng(self.perturb))


@dataclass(frozen=True)
class StepMetrics:
    iteration: int
    loss_g: float
    loss_d: float
    l1: float | None
    l2: float | None
    l_reg: float | None
    regularized: bool
    fake_batch_size: int

    def components(self) -> dict[str, float | None]:
        return {"L_G": self.loss_g, "L_D": self.loss_d, "L1": self.l1, "L2": self.l2, "L_reg": self.l_reg}


@dataclass(frozen=True)
class TrainState:
    """Everything needed to continue training; `iteration` counts completed steps."""

    model: ModelState
    adam_g: AdamState
    adam_d: AdamState
    iteration: int
    rngs: RngStreams
    stats: dict[str, float] = field(default_factory=dict)
    last_metrics: StepMetrics | None = None


def init_train_state(config: ExperimentConfigV1) -> TrainState:
    init_seed, rngs = RngStreams.spawn(config.seed)
    model = init_params(init_seed, config.model)
    training = config.training
    return TrainState(
        model=model,
        adam_g=AdamState.create(
            model.subset(GENERATOR_PREFIXES),
            lr=training.lr_g,
            beta1=training.beta1,
            beta2=training.beta2,
            eps=training.eps,
        ),
        adam_d=AdamState.create(
            model.subset(DISCRIMINATOR_PREFIXES),
            lr=training.lr_d,
            beta1=training.beta1,
            beta2=training.beta2,
            eps=training.eps,
        ),
        iteration=0,
        rngs=rngs,
    )


def draw_batch(state: TrainState, corpus: np.ndarray, batch_size: int) -> tuple[np.ndarray, TrainState]:
    """Sample real images with replacement from the data stream."""
    if corpus.shape[0] == 0:
        raise ValueError("corpus is empty")
    rngs = state.rngs.copy()
    index = rngs.data.integers(0, corpus.shape[0], size=batch_size)
    return corpus[index], replace(state, rngs=rngs)


def _update_stats(stats: dict[str, float], metrics: StepMetrics, decay: float) -> dict[str, float]:
    updated = dict(stats)
    values = {"L_G": metrics.loss_g, "L_D": metrics.loss_d}
    if metrics.regularized and metrics.l1 is not None and metrics.l2 is not None:
        values["L_locality"] = metrics.l1 + metrics.l2
    for name, value in values.items():
        updated[name] = value if name not in updated else decay * updated[name] + (1.0 - decay) * value
    return updated


# ---------------------------------------------------------------------
# Step
# ---------------------------------------------------------------------


def _gradients(tape: GradientTape, loss: Tensor, watched: dict[str, Tensor]) -> dict[str, np.ndarray]:
    grads = tape.gradient(loss, list(watched.values()))
    return dict(zip(watched, grads))


def _perturbed_images(
    params: dict[str, np.ndarray],
    w_first: np.ndarray,
    config: ExperimentConfigV1,
    perturbations: list[LinkPerturbation],
    locality: LocalityFn,
) -> np.ndarray:
    losses = multi_link_loss(
        lambda latent: generate(params, latent),
        w_first,
        config.links,
        config.partition,
        None,
        perturbations=perturbations,
        threshold=config.data.segment_threshold,
        locality=locality,
    )
    return losses.perturbed_images


def train_step(
    state: TrainState,
    config: ExperimentConfigV1,
    batch: np.ndarray,
    *,
    locality: LocalityFn = locality_losses,
) -> TrainState:
    """One discriminator update followed by one generator update.

    On regularizer iterations the generator objective is L_G plus the summed
    link regularizers evaluated on the first latent of the batch, and the
    2 * len(links) perturbed images join the discriminator's fake batch
    (unless `feed_perturbed_to_discriminator` is off). `locality` computes the
    per-link terms.
    """
    training = config.training
    iteration = state.iteration
    regularized = reg_schedule(iteration, training)
    rngs = state.rngs.copy()
    batch_size = batch.shape[0]
    diag: dict[str, float | None] = {"L_G": None, "L_D": None, "L1": None, "L2": None, "L_reg": None}

    g_params = state.model.subset(GENERATOR_PREFIXES)
    d_params = state.model.subset(DISCRIMINATOR_PREFIXES)
    z = rngs.latent.standard_normal((batch_size, config.model.d_z))
    perturbations = (
        [draw_link_perturbation(config.partition, link, rngs.perturb, 1) for link in config.links]
        if regularized
        else []
    )

    try:
        w = map_latent(g_params, z).numpy()
        fakes = generate(g_params, w).numpy()
        if regularized and training.feed_perturbed_to_discriminator:
            perturbed = _perturbed_images(g_params, w[0:1], config, perturbations, locality)
            fakes = np.concatenate([fakes, perturbed], axis=0)
        fake_batch_size = fakes.shape[0]

        with GradientTape() as tape:
            watched_d = {name: tape.watch(value) for name, value in d_params.items()}
            loss_d = d_loss(discriminate(watched_d, batch), discriminate(watched_d, fakes))
        diag["L_D"] = loss_d.item()
        new_d, adam_d = adam_step(d_params, _gradients(tape, loss_d, watched_d), state.adam_d)

        with GradientTape() as tape:
            watched_g = {name: tape.watch(value) for name, value in g_params.items()}
            latent = map_latent(watched_g, z)
            loss_g = g_loss(discriminate(new_d, generate(watched_g, latent)))
            diag["L_G"] = loss_g.item()
            total = loss_g
            if regularized:
                reg = multi_link_loss(
                    lambda w_batch: generate(watched_g, w_batch),
                    take_slice(latent, slice(0, 1)),
                    config.links,
                    config.partition,
                    None,
                    perturbations=perturbations,
                    threshold=config.data.segment_threshold,
                    locality=locality,
                )
                diag["L1"] = float(sum(term.l1.item() for term in reg.terms))
                diag["L2"] = float(sum(term.l2.item() for term in reg.terms))
                diag["L_reg"] = reg.total.item()
                scale = float(training.lazy_interval) if training.scale_lazy_regularizer else 1.0
                total = total + scale * reg.total
        new_g, adam_g = adam_step(g_params, _gradients(tape, total, watched_g), state.adam_g)
    except NonFiniteError as err:
        raise TrainingDivergedError(iteration=iteration, components=diag) from err

    if not all(value is None or np.isfinite(value) for value in diag.values()):
        raise TrainingDivergedError(iteration=iteration, components=diag)

    metrics = StepMetrics(
        iteration=iteration,
        loss_g=float(diag["L_G"]),
        loss_d=float(diag["L_D"]),
        l1=diag["L1"],
        l2=diag["L2"],
        l_reg=diag["L_reg"],
        regularized=regularized,
        fake_batch_size=fake_batch_size,
    )
    return TrainState(
        model=state.model.updated({**new_d, **new_g}),
        adam_g=adam_g,
        adam_d=adam_d,
        iteration=iteration + 1,
        rngs=rngs,
        stats=_update_stats(state.stats, metrics, training.ema_decay),
        last_metrics=metrics,
    )
