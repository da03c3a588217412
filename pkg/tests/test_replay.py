"""Tests for the replay buffers and the union sampler."""

import numpy as np
import pytest

from pimbrl_lab.errors import EmptyBufferError, NonFiniteTransitionError
from pimbrl_lab.replay import (
    ReplayBuffer,
    buffer_push,
    buffer_sample,
    load_buffers,
    save_buffers,
)


def _fill(buffer, count, start=0):
    for i in range(start, start + count):
        buffer_push(buffer, np.full(2, i), np.array([i]), np.full(2, i + 1), float(i), False, i * 0.1)


@pytest.fixture
def real():
    return ReplayBuffer(capacity=5, obs_dim=2, action_dim=1, rng=np.random.default_rng(0))


@pytest.fixture
def fake():
    return ReplayBuffer(capacity=5, obs_dim=2, action_dim=1, rng=np.random.default_rng(1), fake=True)


class TestReplayBuffer:
    """FIFO storage and uniform sampling."""

    def test_evicts_oldest_at_capacity(self, real):
        _fill(real, 7)
        assert len(real) == 5
        assert list(real.contents().rewards) == [2.0, 3.0, 4.0, 5.0, 6.0]

    def test_grows_past_initial_allocation(self):
        buffer = ReplayBuffer(capacity=3000, obs_dim=2, action_dim=1, rng=np.random.default_rng(0))
        _fill(buffer, 2500)
        assert len(buffer) == 2500
        assert buffer.contents().rewards[-1] == 2499.0

    def test_sample_draws_stored_rows(self, real):
        _fill(real, 3)
        batch = real.sample(50)
        assert len(batch) == 50
        assert set(batch.rewards) <= {0.0, 1.0, 2.0}
        assert np.array_equal(batch.next_observations[:, 0], batch.rewards + 1.0)

    def test_empty_sample(self, real):
        with pytest.raises(EmptyBufferError):
            real.sample(1)

    @pytest.mark.parametrize("field", ["observation", "reward"])
    def test_non_finite_rejected(self, real, field):
        values = {"observation": np.zeros(2), "reward": 0.0}
        values[field] = np.full(2, np.nan) if field == "observation" else np.inf
        with pytest.raises(NonFiniteTransitionError):
            real.push(values["observation"], np.zeros(1), np.zeros(2), values["reward"], False)
        assert len(real) == 0

    def test_invalid_capacity(self):
        with pytest.raises(ValueError):
            ReplayBuffer(capacity=0, obs_dim=1, action_dim=1, rng=np.random.default_rng(0))


class TestUnionSampling:
    """Sampling across real and model-generated buffers."""

    def test_provenance_flag(self, real, fake):
        _fill(real, 3)
        _fill(fake, 3, start=100)
        batch = buffer_sample([real, fake], 200, rng=np.random.default_rng(5))
        assert np.array_equal(batch.fake, batch.rewards >= 100)
        assert batch.fake.any() and not batch.fake.all()

    def test_uniform_over_union(self, real, fake):
        _fill(real, 1)
        _fill(fake, 3, start=100)
        batch = buffer_sample([real, fake], 4000, rng=np.random.default_rng(5))
        assert batch.fake.mean() == pytest.approx(0.75, abs=0.03)

    def test_real_fraction(self, real, fake):
        _fill(real, 1)
        _fill(fake, 4, start=100)
        batch = buffer_sample([real, fake], 4000, rng=np.random.default_rng(5), real_fraction=0.5)
        assert (~batch.fake).mean() == pytest.approx(0.5, abs=0.03)

    def test_empty_buffers_skipped(self, real, fake):
        _fill(real, 2)
        batch = buffer_sample([real, fake], 10, rng=np.random.default_rng(0))
        assert not batch.fake.any()

    def test_all_empty(self, real, fake):
        with pytest.raises(EmptyBufferError):
            buffer_sample([real, fake], 1)

    def test_same_rng_same_batch(self, real, fake):
        _fill(real, 4)
        _fill(fake, 4, start=100)
        first = buffer_sample([real, fake], 16, rng=np.random.default_rng(9))
        second = buffer_sample([real, fake], 16, rng=np.random.default_rng(9))
        assert np.array_equal(first.rewards, second.rewards)


class TestBufferPersistence:
    """Save and restore through one npz archive."""

    def test_round_trip(self, tmp_path, real, fake):
        _fill(real, 7)
        _fill(fake, 2, start=100)
        path = tmp_path / "buffers.npz"
        save_buffers(path, {"real": real, "fake": fake})

        restored_real = ReplayBuffer(5, 2, 1, np.random.default_rng(0))
        restored_fake = ReplayBuffer(5, 2, 1, np.random.default_rng(0), fake=True)
        load_buffers(path, {"real": restored_real, "fake": restored_fake})

        assert np.array_equal(restored_real.contents().rewards, real.contents().rewards)
        assert np.array_equal(restored_real.contents().times, real.contents().times)
        assert len(restored_fake) == 2
        assert restored_fake.contents().fake.all()
