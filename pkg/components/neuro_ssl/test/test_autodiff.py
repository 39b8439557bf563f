import math

import numpy as np
import pytest

from components.neuro_ssl import autodiff as ad
from components.neuro_ssl.core import FormatError, IndexOutOfRangeError, MissingFileError, Rng, ShapeError


def numeric_gradient(fn, arrays, index, h=1e-5):
    """Central differences of the scalar fn(*arrays) with respect to arrays[index]."""
    target = arrays[index]
    grad = np.zeros_like(target)
    for position in np.ndindex(target.shape):
        original = target[position]
        target[position] = original + h
        upper = fn(*arrays)
        target[position] = original - h
        lower = fn(*arrays)
        target[position] = original
        grad[position] = (upper - lower) / (2 * h)
    return grad


def gradcheck(op, *arrays, seed=0):
    """Compare tape gradients of sum(op(*inputs) * R) with central differences, in float64."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    weights = {}

    def scalar(*values):
        out = op(*[ad.Tensor(v) for v in values])
        if 'r' not in weights:
            weights['r'] = Rng(seed).normal(size=out.shape)
        return float(np.sum(out.values * weights['r']))

    scalar(*arrays)
    params = [ad.Parameter(a.copy()) for a in arrays]
    loss = ad.tensor_sum(ad.mul(op(*params), weights['r']))
    loss.backward()
    for i, p in enumerate(params):
        expected = numeric_gradient(scalar, arrays, i)
        scale = max(np.max(np.abs(expected)), 1e-8)
        assert np.max(np.abs(p.grad - expected)) / scale < 1e-5, 'input {}'.format(i)


@pytest.fixture
def rng():
    return Rng(21)


class TestGradients:

    def test_elementwise(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(1, 4))
        gradcheck(lambda x, y: ad.add(ad.mul(x, y), ad.sub(x, y)), a, b)

    def test_reductions(self, rng):
        gradcheck(lambda x: ad.mean(x, axis=1), rng.normal(size=(3, 5)))
        gradcheck(lambda x: ad.tensor_sum(x, axis=0, keepdims=True), rng.normal(size=(3, 5)))

    def test_shape_ops(self, rng):
        gradcheck(lambda x: ad.transpose(ad.reshape(x, (2, 3, 2)), (2, 0, 1)), rng.normal(size=(3, 4)))
        gradcheck(lambda x, y: ad.concatenate([x, y], axis=1), rng.normal(size=(2, 3)), rng.normal(size=(2, 1)))
        gradcheck(lambda x: ad.broadcast_to(x, (4, 3)), rng.normal(size=(1, 3)))

    def test_elu(self, rng):
        # keep clear of the kink at zero
        x = rng.normal(size=(4, 5))
        x[np.abs(x) < 1e-2] = 0.5
        gradcheck(ad.elu, x)

    def test_linear(self, rng):
        gradcheck(ad.linear, rng.normal(size=(2, 3, 4)), rng.normal(size=(5, 4)), rng.normal(size=5))

    @pytest.mark.parametrize('stride, padding', [(1, 0), (2, 1), (5, 3)])
    def test_conv1d(self, rng, stride, padding):
        gradcheck(lambda x, w, b: ad.conv1d(x, w, b, stride=stride, padding=padding),
                  rng.normal(size=(2, 3, 12)), rng.normal(size=(4, 3, 3)), rng.normal(size=4))

    def test_conv1d_unbatched(self, rng):
        gradcheck(lambda x, w: ad.conv1d(x, w, stride=2), rng.normal(size=(3, 9)), rng.normal(size=(2, 3, 3)))

    def test_film(self, rng):
        gradcheck(ad.film, rng.normal(size=(2, 3, 5)), rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))

    def test_embedding(self, rng):
        gradcheck(lambda table: ad.embedding_lookup(table, [2, 0, 2]), rng.normal(size=(4, 3)))

    def test_cross_entropy(self, rng):
        gradcheck(lambda logits: ad.cross_entropy(logits, [0, 3, 1]), rng.normal(size=(3, 4)))


class TestForward:

    def test_conv1d_identity_kernel(self, rng):
        x = rng.normal(size=(3, 10))
        out = ad.conv1d(ad.Tensor(x), ad.Tensor(np.eye(3)[:, :, None]))
        assert np.allclose(out.values, x)

    def test_conv1d_output_length(self):
        out = ad.conv1d(ad.Tensor(np.zeros((2, 4, 125))), ad.Tensor(np.zeros((6, 4, 10))), stride=5, padding=3)
        assert out.shape == (2, 6, 25)

    def test_conv1d_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ad.conv1d(ad.Tensor(np.zeros((3, 10))), ad.Tensor(np.zeros((2, 4, 3))))

    def test_linear_identity_and_batch(self, rng):
        x = rng.normal(size=(2, 5, 3))
        out = ad.linear(ad.Tensor(x), ad.Tensor(np.eye(3)), ad.Tensor(np.zeros(3)))
        assert np.allclose(out.values, x)
        with pytest.raises(ShapeError):
            ad.linear(ad.Tensor(x), ad.Tensor(np.eye(4)))

    def test_elu_values(self):
        out = ad.elu(ad.Tensor(np.array([-np.inf, -1.0, 0.0, 2.0])))
        assert np.allclose(out.values, [-1.0, math.expm1(-1.0), 0.0, 2.0])

    def test_film_identity(self, rng):
        h = rng.normal(size=(2, 3, 5))
        out = ad.film(ad.Tensor(h), ad.Tensor(np.ones((2, 3))), ad.Tensor(np.zeros((2, 3))))
        assert np.array_equal(out.values, h)

    def test_embedding_out_of_range(self):
        with pytest.raises(IndexOutOfRangeError):
            ad.embedding_lookup(ad.Parameter(np.zeros((4, 2))), [4])
        with pytest.raises(IndexError):
            ad.embedding_lookup(ad.Parameter(np.zeros((4, 2))), [-1])

    def test_cross_entropy_values(self):
        assert float(ad.cross_entropy(ad.Tensor(np.zeros((2, 7))), [0, 6]).values) == pytest.approx(math.log(7))
        confident = ad.cross_entropy(ad.Tensor(np.array([[50.0, 0.0, 0.0]])), [0])
        assert float(confident.values) < 1e-12
        with pytest.raises(IndexOutOfRangeError):
            ad.cross_entropy(ad.Tensor(np.zeros((2, 3))), [0, 3])

    def test_cross_entropy_flattens_leading_axes(self, rng):
        logits = rng.normal(size=(2, 5, 3))
        labels = np.array([[0, 1, 2, 0, 1], [2, 2, 1, 0, 0]])
        flat = ad.cross_entropy(ad.Tensor(logits.reshape(10, 3)), labels.reshape(-1))
        assert float(ad.cross_entropy(ad.Tensor(logits), labels).values) == pytest.approx(float(flat.values))

    def test_inputs_are_not_mutated(self, rng):
        x, w = rng.normal(size=(2, 3, 8)), rng.normal(size=(2, 3, 3))
        x_copy, w_copy = x.copy(), w.copy()
        loss = ad.tensor_sum(ad.conv1d(ad.Parameter(x), ad.Parameter(w), padding=1))
        loss.backward()
        assert np.array_equal(x, x_copy)
        assert np.array_equal(w, w_copy)


class TestTape:

    def test_shared_subexpression(self):
        x = ad.Parameter(np.array([2.0]))
        a = x * x
        (a + a * x).backward()
        # d/dx (x^2 + x^3) = 2x + 3x^2
        assert x.grad[0] == pytest.approx(16.0)

    def test_reused_node(self):
        x = ad.Parameter(np.array([2.0]))
        a = x * x
        (a + a).backward()
        assert x.grad[0] == pytest.approx(8.0)

    def test_frozen_parameter_gets_no_gradient(self):
        frozen = ad.Parameter(np.ones(3), frozen=True)
        live = ad.Parameter(np.ones(3))
        ad.tensor_sum(frozen * live).backward()
        assert frozen.grad is None
        assert np.array_equal(live.grad, np.ones(3))

    def test_fully_frozen_graph_records_nothing(self):
        frozen = ad.Parameter(np.ones(3), frozen=True)
        out = ad.tensor_sum(frozen * 2.0)
        assert not out.requires_grad

    def test_no_grad(self):
        x = ad.Parameter(np.ones(3))
        with ad.no_grad():
            out = ad.tensor_sum(x * x)
            assert not ad.grad_enabled()
        assert ad.grad_enabled()
        assert not out.requires_grad

    def test_gradients_accumulate_across_backward_calls(self):
        x = ad.Parameter(np.array([1.0, 2.0]))
        ad.tensor_sum(x * 3.0).backward()
        ad.tensor_sum(x * 3.0).backward()
        assert np.array_equal(x.grad, [6.0, 6.0])


class TestLayers:

    def test_named_parameters_are_sorted_and_nested(self, rng):
        mlp = ad.Mlp(rng, 4, 3, 2)
        names = [name for name, _ in mlp.named_parameters()]
        assert names == ['hidden.bias', 'hidden.weight', 'output.bias', 'output.weight']
        assert mlp.n_parameters() == 4 * 3 + 3 + 3 * 2 + 2

    def test_freeze_and_unfreeze(self, rng):
        layer = ad.Linear(rng, 3, 2)
        layer.freeze()
        assert all(p.frozen for p in layer.parameters())
        layer.unfreeze()
        assert not any(p.frozen for p in layer.parameters())

    def test_initialisation_is_seeded(self):
        first = ad.Conv1d(Rng(1), 2, 3, 5).weight.values
        assert np.array_equal(first, ad.Conv1d(Rng(1), 2, 3, 5).weight.values)
        assert np.max(np.abs(first)) <= math.sqrt(6.0 / 10) + 1e-6


class TestAdamW:

    def test_first_step(self):
        state = ad.AdamWState(lr=0.1, weight_decay=0.0)
        updated = ad.adamw_step({'w': np.array([1.0])}, {'w': np.array([1.0])}, state)
        assert updated['w'][0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8))
        assert state.step == 1

    def test_zero_gradient_without_decay(self):
        state = ad.AdamWState(lr=0.1, weight_decay=0.0)
        updated = ad.adamw_step({'w': np.array([1.5])}, {'w': np.array([0.0])}, state)
        assert updated['w'][0] == 1.5

    def test_decoupled_decay(self):
        state = ad.AdamWState(lr=0.1, weight_decay=0.01)
        updated = ad.adamw_step({'w': np.array([2.0])}, {'w': np.array([0.0])}, state)
        assert updated['w'][0] == pytest.approx(2.0 * (1 - 0.001))

    def test_missing_gradient_is_left_alone(self):
        value = np.array([3.0])
        updated = ad.adamw_step({'w': value}, {}, ad.AdamWState(lr=0.1))
        assert updated['w'] is value

    def test_frozen_parameters_are_skipped(self):
        frozen = ad.Parameter(np.array([1.0]), 'a', frozen=True)
        live = ad.Parameter(np.array([1.0]), 'b')
        frozen.grad = np.array([1.0])
        live.grad = np.array([1.0])
        optimiser = ad.AdamW([('a', frozen), ('b', live)], lr=0.1, weight_decay=0.0)
        assert optimiser.step() == 1
        assert frozen.values[0] == 1.0
        assert live.values[0] == pytest.approx(0.9)
        optimiser.zero_grad()
        assert live.grad is None

    def test_minimises_a_quadratic(self):
        w = ad.Parameter(np.array([3.0, -2.0]), 'w')
        optimiser = ad.AdamW([('w', w)], lr=0.1, weight_decay=0.0)
        for _ in range(500):
            optimiser.zero_grad()
            ad.tensor_sum(w * w).backward()
            optimiser.step()
        assert np.max(np.abs(w.values)) < 0.05


class TestCheckpoint:

    @pytest.fixture
    def module(self, rng):
        return ad.Mlp(rng, 3, 4, 2)

    def test_round_trip_is_exact(self, module):
        blob = ad.encode_checkpoint(((n, p.values) for n, p in module.named_parameters()), {'d': 4})
        architecture, arrays = ad.decode_checkpoint(blob)
        assert architecture == {'d': 4}
        for name, p in module.named_parameters():
            assert arrays[name].dtype == np.float32
            assert np.array_equal(arrays[name], p.values)

    def test_bad_magic(self, module):
        blob = bytearray(ad.encode_checkpoint(((n, p.values) for n, p in module.named_parameters())))
        blob[0:8] = b'NOTACKPT'
        with pytest.raises(FormatError) as excinfo:
            ad.decode_checkpoint(bytes(blob))
        assert 'offset 0' in str(excinfo.value)

    def test_truncated(self, module):
        blob = ad.encode_checkpoint(((n, p.values) for n, p in module.named_parameters()))
        with pytest.raises(FormatError) as excinfo:
            ad.decode_checkpoint(blob[:-4])
        assert 'bytes' in str(excinfo.value)
        with pytest.raises(FormatError):
            ad.decode_checkpoint(blob[:10])

    def test_trailing_bytes(self, module):
        blob = ad.encode_checkpoint(((n, p.values) for n, p in module.named_parameters()))
        with pytest.raises(FormatError):
            ad.decode_checkpoint(blob + b'\0\0\0\0')

    def test_save_and_load(self, tmpdir, module, rng):
        path = str(tmpdir.join('mlp.bin'))
        ad.save_checkpoint(path, module)
        other = ad.Mlp(rng.fork('other'), 3, 4, 2)
        _, arrays = ad.read_checkpoint(path)
        assert ad.load_parameters(other, arrays) == 4
        assert ad.parameters_hash(other) == ad.parameters_hash(module)

    def test_load_shape_mismatch(self, module, rng):
        _, arrays = ad.decode_checkpoint(ad.encode_checkpoint(
            ((n, p.values) for n, p in ad.Mlp(rng, 3, 5, 2).named_parameters())))
        with pytest.raises(ShapeError):
            ad.load_parameters(module, arrays)

    def test_missing_file(self, tmpdir):
        with pytest.raises(MissingFileError):
            ad.read_checkpoint(str(tmpdir.join('absent.bin')))

    def test_hash_tracks_values(self, module):
        before = ad.parameters_hash(module)
        module.output.bias.values = module.output.bias.values + 1
        assert ad.parameters_hash(module) != before
        assert ad.parameters_hash(module, prefix='hidden.') == ad.parameters_hash(module, prefix='hidden.')
