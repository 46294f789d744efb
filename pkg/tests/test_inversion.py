from __future__ import annotations

import numpy as np
import pytest

from linklab.inversion import (
    invert,
    linear_edit,
    local_edit,
    local_edit_many,
    resample_fragment,
    resample_links,
)
from linklab.linkreg import InvalidLinkError
from linklab.models import InversionResultV1, LatentPartition, LinkSpec, ModelConfig, RectRegion
from linklab.networks import DimensionMismatchError, Synthesizer, init_params


PARTITION = LatentPartition(sizes=[4, 4, 8])
TOP_LEFT = LinkSpec(fragment=1, region=RectRegion(top=0, left=0, height=8, width=8))
BOTTOM_RIGHT = LinkSpec(fragment=2, region=RectRegion(top=8, left=8, height=8, width=8))


class CaptureLogger:
    def __init__(self) -> None:
        self.calls: list[tuple[str, dict]] = []

    def info(self, event: str, *, extra: dict | None = None) -> None:
        self.calls.append((event, extra or {}))


def make_generator() -> Synthesizer:
    return Synthesizer.from_state(init_params(0, ModelConfig(d_z=16, d_w=16, channels=8)))


def make_target(generator: Synthesizer, seed: int = 1) -> tuple[np.ndarray, np.ndarray]:
    w = generator.sample_w(1, np.random.default_rng(seed))[0]
    return w, generator.images(w)[0]


def test_invert_records_one_loss_per_step() -> None:
    generator = make_generator()
    _, target = make_target(generator)
    logger = CaptureLogger()

    result = invert(generator, target, steps=25, lr=0.05, mean_samples=32, logger=logger)

    assert result.steps == 25
    assert len(result.trajectory) == 25
    assert result.final_mse == min(result.trajectory)
    assert result.final_mse == result.trajectory[result.best_step]
    assert result.final_mse < result.trajectory[0]
    assert result.reconstruction.shape == (16, 16, 3)
    assert logger.calls[0][0] == "inversion_complete"


def test_reconstruction_belongs_to_best_latent() -> None:
    generator = make_generator()
    _, target = make_target(generator)
    result = invert(generator, target, steps=10, lr=0.05, mean_samples=32)
    np.testing.assert_allclose(generator.images(result.w)[0], result.reconstruction)
    assert np.mean((result.reconstruction - target) ** 2) == pytest.approx(result.final_mse)


def test_invert_is_deterministic_for_fixed_rng() -> None:
    generator = make_generator()
    _, target = make_target(generator)
    first = invert(generator, target, steps=5, mean_samples=16, rng=np.random.default_rng(4))
    second = invert(generator, target, steps=5, mean_samples=16, rng=np.random.default_rng(4))
    assert first.trajectory == second.trajectory


def test_invert_validates_inputs() -> None:
    generator = make_generator()
    with pytest.raises(ValueError):
        invert(generator, np.zeros((16, 16, 3)), steps=0)
    with pytest.raises(DimensionMismatchError):
        invert(generator, np.zeros((8, 8, 3)), steps=1)
    with pytest.raises(ValueError):
        invert(generator, np.full((16, 16, 3), 2.0), steps=1)


def test_contract_round_trip() -> None:
    generator = make_generator()
    _, target = make_target(generator)
    contract = invert(generator, target, steps=3, mean_samples=8).to_contract()
    assert InversionResultV1.model_validate(contract.model_dump()) == contract
    assert len(contract.w) == 16


def test_resample_with_same_values_is_a_no_op() -> None:
    w = np.arange(16.0)
    np.testing.assert_array_equal(resample_fragment(w, PARTITION, 2, w[4:8]), w)


def test_resample_touches_only_its_fragment() -> None:
    w = np.zeros(16)
    edited = resample_fragment(w, PARTITION, 3, np.ones(8))
    assert np.all(edited[:8] == 0.0)
    assert np.all(edited[8:] == 1.0)
    assert np.all(w == 0.0)


def test_disjoint_resamples_commute() -> None:
    w = np.random.default_rng(0).standard_normal(16)
    a, b = np.ones(4), np.full(4, 2.0)
    first = resample_fragment(resample_fragment(w, PARTITION, 1, a), PARTITION, 2, b)
    second = resample_fragment(resample_fragment(w, PARTITION, 2, b), PARTITION, 1, a)
    np.testing.assert_array_equal(first, second)


def test_resample_rejects_bad_fragment_and_length() -> None:
    with pytest.raises(InvalidLinkError):
        resample_fragment(np.zeros(16), PARTITION, 4, np.zeros(4))
    with pytest.raises(DimensionMismatchError):
        resample_fragment(np.zeros(16), PARTITION, 1, np.zeros(3))


def test_resample_links_keeps_unlinked_axes() -> None:
    w = np.random.default_rng(1).standard_normal(16)
    edited = resample_links(w, [TOP_LEFT, BOTTOM_RIGHT], PARTITION, np.random.default_rng(2))
    np.testing.assert_array_equal(edited[8:], w[8:])
    assert not np.array_equal(edited[:8], w[:8])


def test_local_edits_return_images() -> None:
    generator = make_generator()
    w = generator.sample_w(3, np.random.default_rng(3))
    single = local_edit(generator, w[0], TOP_LEFT, PARTITION, np.random.default_rng(4))
    batch = local_edit_many(generator, w, [TOP_LEFT, BOTTOM_RIGHT], PARTITION, np.random.default_rng(4))
    assert single.shape == (16, 16, 3)
    assert batch.shape == (3, 16, 16, 3)


def test_linear_edit() -> None:
    w = np.zeros(4)
    np.testing.assert_array_equal(linear_edit(w, np.array([1.0, 0.0, 0.0, 0.0]), 2.5), [2.5, 0.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        linear_edit(w, np.zeros(4), 1.0)
    with pytest.raises(DimensionMismatchError):
        linear_edit(w, np.ones(3), 1.0)
