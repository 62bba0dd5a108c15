import math

import numpy as np
import pytest

from tdpor.diffusion import MixtureData
from tdpor.rewards import (
    Encoder,
    RewardFitError,
    analytic_reward,
    direction_vectors,
    encode,
    fit_reward_head,
    reward,
    reward_dataset,
)

DATA = MixtureData()
OFFSET = math.pi / 2


@pytest.fixture(scope="module")
def dataset():
    rng = np.random.default_rng(5)
    x, c = DATA.sample(2048, rng)
    return reward_dataset(x, c, DATA.contexts(), 2048, rng)


@pytest.fixture(scope="module")
def direction_model(dataset):
    return fit_reward_head(Encoder(1, 20), "direction", dataset, 5, direction_offset=OFFSET)


def test_direction_examples():
    assert analytic_reward("direction", [[0.0, 0.0]], [[1.0, 0.0]])[0] == 0.0
    assert analytic_reward("direction", [[2.0, 0.0]], [[1.0, 0.0]])[0] == pytest.approx(0.964028, abs=1e-6)


def test_direction_offset_rotates_counterclockwise():
    assert np.allclose(direction_vectors([[1.0, 0.0]], OFFSET), [[0.0, 1.0]], atol=1e-15)


def test_fidelity_peaks_at_mode_centre():
    c = DATA.contexts()
    centre = analytic_reward("fidelity", DATA.radius * c, c)
    assert np.allclose(centre, 1.0)
    rng = np.random.default_rng(0)
    nearby = DATA.radius * c + rng.normal(scale=0.1, size=c.shape)
    assert np.all(analytic_reward("fidelity", nearby, c) < centre)


def test_radius_reward():
    assert analytic_reward("radius", [[4.0, 0.0]], [[1.0, 0.0]])[0] == 0.0
    assert analytic_reward("radius", [[0.0, 1.0]], [[1.0, 0.0]])[0] == pytest.approx(-9.0)


def test_unknown_kind():
    with pytest.raises(ValueError):
        analytic_reward("beauty", [[0.0, 0.0]], [[1.0, 0.0]])


def test_encoder_determinism_and_distinctness():
    rng = np.random.default_rng(3)
    x, c = rng.normal(size=(5, 2)), DATA.contexts()[:5]
    a, b = encode(Encoder(1, 20), x, 3, c), encode(Encoder(1, 20), x, 3, c)
    assert a.shape == (5, 128)
    assert np.array_equal(a, b)
    assert not np.allclose(a, encode(Encoder(2, 20), x, 3, c))


def test_encoder_saturates_finitely():
    f = encode(Encoder(1, 20), [[1e6, -1e6]], 0, [[1.0, 0.0]])
    assert np.all(np.isfinite(f)) and np.all(np.abs(f) <= 1.0)


def test_constant_target_is_fitted_exactly(dataset):
    y = np.full(len(dataset[0]), 0.37)
    rm = fit_reward_head(Encoder(1, 20), "direction", dataset, 0, targets=y, steps=2000, target_rmse=5e-3)
    assert rm.rmse <= 5e-3


def test_direction_fit_quality(direction_model):
    assert direction_model.rmse <= 0.05


def test_reward_is_deterministic(direction_model):
    x, c = DATA.sample(16, np.random.default_rng(8))
    assert np.array_equal(reward(direction_model, x, c), reward(direction_model, x, c))


def test_reward_tracks_analytic_on_fresh_points(direction_model):
    rng = np.random.default_rng(11)
    x, c = DATA.sample(1000, rng)
    err = np.abs(reward(direction_model, x, c) - analytic_reward("direction", x, c, direction_offset=OFFSET))
    assert np.mean(err <= 3 * direction_model.rmse) >= 0.95


def test_fidelity_head_at_mode_centres():
    rng = np.random.default_rng(12)
    x, c = DATA.sample(4096, rng)
    rm = fit_reward_head(Encoder(1, 20), "fidelity", (x, c), 3)
    centres = DATA.contexts()
    err = np.abs(reward(rm, DATA.radius * centres, centres) - 1.0)
    assert np.all(err <= 3 * rm.rmse)


def test_mismatched_half_width_encoder_fits_worse(dataset):
    def fit(seed, width):
        return fit_reward_head(Encoder(seed, 20, width=width), "direction", dataset, 5, direction_offset=OFFSET,
                               steps=3000, target_rmse=0.0, raise_on_failure=False).rmse

    assert fit(2, 64) > fit(1, 128)


def test_fit_failure_is_reported(dataset):
    with pytest.raises(RewardFitError):
        fit_reward_head(Encoder(1, 20), "direction", dataset, 5, steps=10)


def test_fitted_head_is_frozen(direction_model):
    assert all(not p.requires_grad for p in direction_model.parameters())


def test_direction_ascent_leaves_the_manifold():
    # plain gradient ascent on the analytic direction reward, starting from every mode centre
    c = DATA.contexts()
    d = direction_vectors(c, OFFSET)
    x = DATA.radius * c.copy()
    start = analytic_reward("fidelity", x, c)
    for _ in range(100):
        x += 0.05 * (1.0 - np.tanh(np.sum(x * d, axis=1, keepdims=True)) ** 2) * d
    assert np.all(analytic_reward("direction", x, c, direction_offset=OFFSET) > 0.5)
    assert np.all(analytic_reward("fidelity", x, c) < start)
