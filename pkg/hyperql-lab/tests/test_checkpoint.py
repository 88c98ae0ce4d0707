# tests/test_checkpoint.py
import pytest
import numpy as np
import sys
import os
sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

from src.checkpoint import checkpoint_load, checkpoint_save, load_modules, save_modules
from src.critics import SAHyperCritic
from src.errors import ContractError, DimensionError, MissingInputError
from src.hypernet import InitScheme
from src.networks import MLP, flat_params


class TestCheckpoint:
    def setup_method(self):
        self.rng = np.random.default_rng(42)

    def test_values_load_bit_identical(self, tmp_path):
        state = {
            'w': self.rng.normal(size=(3, 5)),
            'tiny': np.array([1e-300, -5e-324, np.pi]),
            'scalar': np.float64(1.0 / 3.0)
        }
        path = checkpoint_save(state, str(tmp_path / 'a.ckpt'))
        loaded = checkpoint_load(path)
        assert list(loaded) == ['w', 'tiny', 'scalar']
        for name, value in state.items():
            np.testing.assert_array_equal(loaded[name], value)
        assert loaded['scalar'].shape == ()

    def test_module_round_trip(self, tmp_path):
        critic = SAHyperCritic(4, 2, (8, 16), InitScheme.small_heads(), seed=1, hidden_dim=16)
        path = str(tmp_path / 'critic.ckpt')
        save_modules({'critic': critic}, path)
        fresh = SAHyperCritic(4, 2, (8, 16), InitScheme.small_heads(), seed=9, hidden_dim=16)
        load_modules({'critic': fresh}, path)
        np.testing.assert_array_equal(flat_params(fresh), flat_params(critic))

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingInputError):
            checkpoint_load(str(tmp_path / 'nope.ckpt'))

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / 'junk.ckpt'
        path.write_text('hello\n')
        with pytest.raises(ContractError):
            checkpoint_load(str(path))

    def test_value_count_must_match_header(self, tmp_path):
        path = str(tmp_path / 'short.ckpt')
        checkpoint_save({'w': np.ones((2, 3))}, path)
        with open(path) as f:
            lines = f.read().splitlines()
        lines[-1] = ' '.join(lines[-1].split()[:-1])
        with open(path, 'w') as f:
            f.write('\n'.join(lines) + '\n')
        with pytest.raises(DimensionError, match="'w'"):
            checkpoint_load(path)

    def test_missing_tensor(self, tmp_path):
        net = MLP(3, (4,), 1, self.rng)
        state = net.state_dict()
        del state['l1.bias']
        path = checkpoint_save({f"net.{k}": v for k, v in state.items()}, str(tmp_path / 'm.ckpt'))
        with pytest.raises(ContractError, match='l1.bias'):
            load_modules({'net': MLP(3, (4,), 1, self.rng)}, path)

    def test_shape_mismatch_names_tensor(self, tmp_path):
        path = str(tmp_path / 'wide.ckpt')
        save_modules({'net': MLP(3, (5,), 1, self.rng)}, path)
        with pytest.raises(DimensionError, match='l0.weight'):
            load_modules({'net': MLP(3, (4,), 1, self.rng)}, path)

    def test_whitespace_in_name(self, tmp_path):
        with pytest.raises(ContractError):
            checkpoint_save({'bad name': np.zeros(2)}, str(tmp_path / 'x.ckpt'))


if __name__ == '__main__':
    pytest.main([__file__])
