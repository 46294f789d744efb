from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from linklab.autodiff import Tensor
from linklab.linkreg import (
    brute_force_locality_losses,
    draw_link_perturbation,
    rect_mask,
    reference_locality_losses,
)
from linklab.models import (
    DataConfig,
    ExperimentConfigV1,
    LatentPartition,
    LinkSpec,
    ModelConfig,
    RectRegion,
    TrainingConfig,
)
from linklab.networks import GENERATOR_PREFIXES, Synthesizer, map_latent
from linklab.synthdata import sample_corpus, stack_images
from linklab.training import (
    RngStreams,
    TrainingDivergedError,
    d_loss,
    draw_batch,
    g_loss,
    init_train_state,
    reg_schedule,
    train_step,
)


TOP_LEFT = RectRegion(top=0, left=0, height=8, width=8)
BOTTOM_RIGHT = RectRegion(top=8, left=8, height=8, width=8)


def make_config(links: list[LinkSpec] | None = None, sizes: list[int] | None = None, **training) -> ExperimentConfigV1:
    values = {
        "batch_size": 4,
        "total_iterations": 12,
        "warm_start_iterations": 4,
        "lazy_interval": 2,
    }
    values.update(training)
    return ExperimentConfigV1(
        model=ModelConfig(d_z=16, d_w=16, channels=8),
        partition=LatentPartition(sizes=sizes or [4, 12]),
        links=links or [LinkSpec(fragment=1, region=TOP_LEFT)],
        training=TrainingConfig(**values),
        data=DataConfig(corpus_size=32),
    )


def make_corpus() -> np.ndarray:
    return stack_images(sample_corpus(seed=0, count=32))


def run_steps(config: ExperimentConfigV1, count: int, corpus: np.ndarray | None = None):
    corpus = make_corpus() if corpus is None else corpus
    state = init_train_state(config)
    for _ in range(count):
        batch, state = draw_batch(state, corpus, config.training.batch_size)
        state = train_step(state, config, batch)
    return state


def advance_to(config: ExperimentConfigV1, iteration: int):
    state = run_steps(config, iteration)
    batch, state = draw_batch(state, make_corpus(), config.training.batch_size)
    return state, batch


def test_generator_loss_values() -> None:
    assert g_loss(Tensor(np.array([0.0]))).item() == pytest.approx(math.log(2.0))
    assert g_loss(Tensor(np.array([1.0, -1.0]))).item() == pytest.approx(0.8133, abs=1e-4)


def test_discriminator_loss_values() -> None:
    zero = Tensor(np.array([0.0]))
    assert d_loss(zero, zero).item() == pytest.approx(2.0 * math.log(2.0))
    assert d_loss(Tensor(np.array([2.0])), Tensor(np.array([-2.0]))).item() == pytest.approx(0.2538, abs=1e-4)


def test_reg_schedule_starts_after_warm_start() -> None:
    training = TrainingConfig(total_iterations=12, warm_start_iterations=4, lazy_interval=2)
    fired = [iteration for iteration in range(12) if reg_schedule(iteration, training)]
    assert fired == [4, 6, 8, 10]


def test_reg_schedule_default_lazy_interval() -> None:
    training = TrainingConfig(total_iterations=30, warm_start_iterations=0)
    fired = [iteration for iteration in range(30) if reg_schedule(iteration, training)]
    assert fired == [0, 8, 16, 24]


def test_reg_schedule_rejects_negative_iteration() -> None:
    with pytest.raises(ValueError):
        reg_schedule(-1, TrainingConfig())


def test_rng_streams_are_independent_and_reproducible() -> None:
    seed_a, first = RngStreams.spawn(5)
    seed_b, second = RngStreams.spawn(5)
    assert seed_a == seed_b
    assert first.data.standard_normal() == second.data.standard_normal()
    assert first.latent.standard_normal() != first.perturb.standard_normal()

    restored = RngStreams.from_states(first.states())
    assert restored.latent.standard_normal() == first.latent.standard_normal()


def test_fake_batch_grows_on_regularized_steps() -> None:
    config = make_config()
    state = run_steps(config, 4)
    assert state.last_metrics is not None
    assert not state.last_metrics.regularized
    assert state.last_metrics.fake_batch_size == 4
    assert state.last_metrics.l1 is None

    state = run_steps(config, 5)
    assert state.last_metrics.regularized
    assert state.last_metrics.fake_batch_size == 4 + 2
    assert state.last_metrics.l1 is not None
    assert state.last_metrics.l_reg == pytest.approx(
        0.01 * state.last_metrics.l1 + 0.04 * state.last_metrics.l2
    )


def test_two_links_add_four_perturbed_fakes() -> None:
    links = [
        LinkSpec(fragment=1, region=TOP_LEFT),
        LinkSpec(fragment=3, region=BOTTOM_RIGHT),
    ]
    config = make_config(links=links, sizes=[4, 4, 8])
    state = run_steps(config, 5)
    assert state.last_metrics.fake_batch_size == 4 + 4


def test_feed_flag_off_keeps_fake_batch_size() -> None:
    config = make_config(feed_perturbed_to_discriminator=False)
    state = run_steps(config, 5)
    assert state.last_metrics.regularized
    assert state.last_metrics.fake_batch_size == 4


def test_warm_start_ignores_link_weights() -> None:
    plain = make_config()
    heavy = make_config(links=[LinkSpec(fragment=1, region=TOP_LEFT, lambda1=5.0, lambda2=9.0)])
    first = run_steps(plain, 4)
    second = run_steps(heavy, 4)
    for name, value in first.model.params.items():
        np.testing.assert_array_equal(value, second.model.params[name])


def test_zero_weights_without_feed_match_plain_step() -> None:
    link = LinkSpec(fragment=1, region=TOP_LEFT, lambda1=0.0, lambda2=0.0)
    regularized = make_config(links=[link], feed_perturbed_to_discriminator=False)
    plain = make_config(links=[link], warm_start_iterations=8, feed_perturbed_to_discriminator=False)
    state, batch = advance_to(regularized, 4)

    with_reg = train_step(state, regularized, batch)
    without = train_step(state, plain, batch)

    assert with_reg.last_metrics.regularized
    assert not without.last_metrics.regularized
    for name, value in with_reg.model.params.items():
        np.testing.assert_allclose(value, without.model.params[name], rtol=1e-12, atol=1e-15)


def test_recorded_locality_losses_match_brute_force() -> None:
    config = make_config()
    state, batch = advance_to(config, 4)
    link = config.links[0]

    rngs = state.rngs.copy()
    z = rngs.latent.standard_normal((config.training.batch_size, config.model.d_z))
    perturbation = draw_link_perturbation(config.partition, link, rngs.perturb, 1)
    w = map_latent(state.model.subset(GENERATOR_PREFIXES), z).numpy()[0]
    synth = Synthesizer.from_state(state.model)
    l1, l2 = brute_force_locality_losses(
        lambda v: synth.images(v[None])[0], w, link, rect_mask(link.region), perturbation
    )

    metrics = train_step(state, config, batch).last_metrics
    assert metrics.l1 == pytest.approx(l1, rel=1e-9)
    assert metrics.l2 == pytest.approx(l2, rel=1e-9)


@pytest.mark.parametrize("sizes, links", [
    ([4, 12], [LinkSpec(fragment=1, region=TOP_LEFT)]),
    ([4, 4, 8], [LinkSpec(fragment=1, region=TOP_LEFT), LinkSpec(fragment=3, region=BOTTOM_RIGHT)]),
])
def test_reference_regularizer_gives_the_same_update(sizes: list[int], links: list[LinkSpec]) -> None:
    config = make_config(links=links, sizes=sizes)
    state, batch = advance_to(config, 4)

    vectorized = train_step(state, config, batch)
    reference = train_step(state, config, batch, locality=reference_locality_losses)

    assert reference.last_metrics.regularized
    assert reference.last_metrics.l1 == pytest.approx(vectorized.last_metrics.l1, rel=1e-9)
    assert reference.last_metrics.l2 == pytest.approx(vectorized.last_metrics.l2, rel=1e-9)
    for name, value in vectorized.model.params.items():
        np.testing.assert_allclose(reference.model.params[name], value, rtol=0.0, atol=1e-9)

def test_train_step_is_deterministic() -> None:
    config = make_config()
    first = run_steps(config, 6)
    second = run_steps(config, 6)
    assert first.iteration == second.iteration == 6
    for name, value in first.model.params.items():
        np.testing.assert_array_equal(value, second.model.params[name])
    assert first.stats == second.stats


def test_train_step_does_not_mutate_input_state() -> None:
    config = make_config()
    state, batch = advance_to(config, 0)
    before = state.rngs.latent.bit_generator.state
    train_step(state, config, batch)
    assert state.rngs.latent.bit_generator.state == before
    assert state.iteration == 0


def test_non_finite_parameters_raise_diverged() -> None:
    config = make_config()
    state, batch = advance_to(config, 1)
    const = state.model.params["generator.const"]
    broken = replace(state, model=state.model.updated({"generator.const": np.full(const.shape, np.nan)}))
    with pytest.raises(TrainingDivergedError) as excinfo:
        train_step(broken, config, batch)
    assert excinfo.value.iteration == 1
    assert "L_G" in excinfo.value.components


def test_stats_track_losses() -> None:
    state = run_steps(make_config(), 5)
    assert {"L_G", "L_D", "L_locality"} <= set(state.stats)


def test_draw_batch_rejects_empty_corpus() -> None:
    state = init_train_state(make_config())
    with pytest.raises(ValueError):
        draw_batch(state, np.zeros((0, 16, 16, 3)), 4)
