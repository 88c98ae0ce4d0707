# tests/test_replay_buffer.py
import pytest
import numpy as np
import sys
import os
from scipy.stats import chisquare
sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

from src.errors import UnderfullBufferError
from src.replay_buffer import ReplayBuffer, buffer_sample


class TestReplayBuffer:
    def setup_method(self):
        self.buffer = ReplayBuffer(capacity=10, n_s=3, n_a=2, seed=0)

    def _fill(self, n):
        for i in range(n):
            self.buffer.add(np.full(3, i), np.full(2, i), float(i), np.full(3, i + 1), False)

    def test_empty_buffer_raises(self):
        with pytest.raises(UnderfullBufferError):
            self.buffer.sample(1, allow_underfull=True)

    def test_underfull_buffer(self):
        self._fill(3)
        with pytest.raises(UnderfullBufferError):
            self.buffer.sample(5)
        batch = self.buffer.sample(5, allow_underfull=True)
        assert batch['s'].shape == (5, 3)
        assert set(batch['idx']) <= {0, 1, 2}

    def test_ring_overwrites_oldest(self):
        self._fill(13)
        assert len(self.buffer) == 10
        assert sorted(self.buffer.r.tolist()) == [float(i) for i in range(3, 13)]

    def test_rows_stay_aligned(self):
        self._fill(10)
        batch = self.buffer.sample(50)
        np.testing.assert_array_equal(batch['s'][:, 0], batch['r'])
        np.testing.assert_array_equal(batch['s2'][:, 0], batch['r'] + 1)

    def test_uniform_sampling(self):
        self._fill(10)
        idx = self.buffer.sample_indices(20000)
        counts = np.bincount(idx, minlength=10)
        _, p_value = chisquare(counts)
        assert p_value > 1e-3

    def test_seeded_sampler(self):
        self._fill(10)
        twin = ReplayBuffer(capacity=10, n_s=3, n_a=2, seed=0)
        for i in range(10):
            twin.add(np.full(3, i), np.full(2, i), float(i), np.full(3, i + 1), False)
        np.testing.assert_array_equal(self.buffer.sample_indices(100), twin.sample_indices(100))

    def test_transition_records(self):
        self._fill(4)
        records = buffer_sample(self.buffer, 6, allow_underfull=True)
        assert len(records) == 6
        assert all(t.s2[0] == t.s[0] + 1 for t in records)

    def test_capacity_must_be_positive(self):
        with pytest.raises(ValueError):
            ReplayBuffer(0, 3, 2)


if __name__ == '__main__':
    pytest.main([__file__])
