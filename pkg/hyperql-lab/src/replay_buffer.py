# src/replay_buffer.py
import numpy as np

from .environments import Transition
from .errors import UnderfullBufferError
from .utils import make_rng


class ReplayBuffer:
    """Fixed-capacity ring of transitions with a seeded uniform sampler."""

    def __init__(self, capacity, n_s, n_a, seed=0):
        if capacity <= 0:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, n_s))
        self.a = np.zeros((capacity, n_a))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, n_s))
        self.done = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._next = 0
        self.rng = make_rng(seed, 5)

    def __len__(self):
        return self.size

    def add(self, s, a, r, s2, done=False):
        i = self._next
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.s2[i] = s2
        self.done[i] = done
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch, allow_underfull=False):
        if self.size == 0:
            raise UnderfullBufferError("cannot sample from an empty replay buffer")
        if self.size < batch and not allow_underfull:
            raise UnderfullBufferError(f"buffer holds {self.size} transitions, batch needs {batch}")
        # only written slots [0, size) are ever drawn
        return self.rng.integers(0, self.size, size=batch)

    def sample(self, batch=100, allow_underfull=False):
        """Dict of stacked arrays s, a, r, s2, done drawn i.i.d. with replacement."""
        idx = self.sample_indices(batch, allow_underfull)
        return {'s': self.s[idx], 'a': self.a[idx], 'r': self.r[idx],
                's2': self.s2[idx], 'done': self.done[idx], 'idx': idx}

    def states(self):
        return self.s[:self.size]


def buffer_sample(buf, batch=100, allow_underfull=False):
    """List of Transition records, i.i.d. uniform with replacement."""
    b = buf.sample(batch, allow_underfull)
    return [Transition(b['s'][i], b['a'][i], float(b['r'][i]), b['s2'][i], bool(b['done'][i]))
            for i in range(batch)]
