import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slicenet.aggregation import (
    AttentionParams,
    aggregate_attention,
    aggregate_max,
    aggregate_mean,
    attention_weights,
)
from slicenet.autodiff import Tensor, linear
from slicenet.autodiff.gradcheck import check_gradients
from slicenet.errors import ConfigurationError, EmptySetError


def random_params(rng, d=4, d_key=3, d_value=5, heads=2, dtype=np.float64):
    p = AttentionParams.init(d, d_key, d_value, heads, rng, dtype=dtype)
    # non-zero biases so every parameter takes part in the checks
    p.key_bias.data[:] = rng.normal(size=d_key)
    p.value_bias.data[:] = rng.normal(size=d_value)
    return p


def identity_params(q):
    eye = lambda: Tensor(np.eye(2), requires_grad=True)
    zero = lambda: Tensor(np.zeros(2), requires_grad=True)
    return AttentionParams(Tensor(np.array(q, dtype=float).reshape(2, 1), requires_grad=True),
                           eye(), zero(), eye(), zero())


AGGREGATORS = {
    "mean": lambda x, p: aggregate_mean(x),
    "max": lambda x, p: aggregate_max(x),
    "attention": aggregate_attention,
}


# -- examples ---------------------------------------------------------------------------

def test_mean_of_identical_rows():
    r = np.array([0.5, -1.0, 2.0])
    np.testing.assert_array_equal(aggregate_mean(Tensor(np.tile(r, (4, 1)))).data, r)


def test_mean_small():
    np.testing.assert_array_equal(aggregate_mean(Tensor(np.array([[1.0, 3.0], [3.0, 1.0]]))).data, [2.0, 2.0])


def test_max_small():
    np.testing.assert_array_equal(aggregate_max(Tensor(np.array([[1.0, 5.0], [4.0, 2.0]]))).data, [4.0, 5.0])


def test_max_single_row():
    np.testing.assert_array_equal(aggregate_max(Tensor(np.array([[1.0, -5.0]]))).data, [1.0, -5.0])


@pytest.mark.parametrize("name", sorted(AGGREGATORS))
def test_empty_set_rejected(name, rng=np.random.default_rng(0)):
    with pytest.raises(EmptySetError):
        AGGREGATORS[name](Tensor(np.zeros((0, 4))), random_params(rng))


def test_attention_dimension_mismatch():
    params = random_params(np.random.default_rng(0), d=4)
    with pytest.raises(ConfigurationError):
        aggregate_attention(Tensor(np.zeros((3, 5))), params)


def test_attention_zero_query_is_mean_of_values():
    rng = np.random.default_rng(1)
    params = random_params(rng)
    params.query.data[:] = 0
    x = Tensor(rng.normal(size=(7, 4)))
    values = linear(x, params.value_weight, params.value_bias).data
    out = aggregate_attention(x, params).data.reshape(2, 5)
    for head in out:
        np.testing.assert_allclose(head, values.mean(axis=0), atol=1e-6)
    np.testing.assert_allclose(attention_weights(x, params).data, 1 / 7, atol=1e-12)


def test_attention_singleton_set():
    rng = np.random.default_rng(2)
    params = random_params(rng)
    x = Tensor(rng.normal(size=(1, 4)))
    values = linear(x, params.value_weight, params.value_bias).data[0]
    np.testing.assert_allclose(aggregate_attention(x, params).data, np.tile(values, 2), atol=1e-12)
    np.testing.assert_array_equal(attention_weights(x, params).data, [[1.0], [1.0]])


def test_attention_hand_evaluated_case():
    # logits = q.k / sqrt(2) = [ln 2, 0]  ->  weights [2/3, 1/3]
    r1 = [math.sqrt(2) * math.log(2), 0.0]
    x = Tensor(np.array([r1, [0.0, 0.0]]))
    params = identity_params([1.0, 0.0])
    np.testing.assert_allclose(attention_weights(x, params).data, [[2 / 3, 1 / 3]], atol=1e-12)
    np.testing.assert_allclose(aggregate_attention(x, params).data,
                               [2 / 3 * math.sqrt(2) * math.log(2), 0.0], atol=1e-12)


def test_attention_parameter_count_formula():
    assert AttentionParams.count(32, 32, 32, 1) == 2144
    params = AttentionParams.init(32, 32, 32, 1, np.random.default_rng(0))
    assert sum(t.size for t in params.tensors().values()) == 2144
    params = AttentionParams.init(6, 5, 4, 3, np.random.default_rng(0))
    assert sum(t.size for t in params.tensors().values()) == 6 * 5 + 5 + 6 * 4 + 4 + 5 * 3


# -- properties ---------------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(p=st.integers(1, 20), seed=st.integers(0, 2**31 - 1), name=st.sampled_from(sorted(AGGREGATORS)))
def test_permutation_invariance(p, seed, name):
    rng = np.random.default_rng(seed)
    params = random_params(rng, dtype=np.float32)
    x = rng.normal(size=(p, 4)).astype(np.float32)
    perm = rng.permutation(p)
    a = AGGREGATORS[name](Tensor(x), params).data
    b = AGGREGATORS[name](Tensor(x[perm]), params).data
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("name", sorted(AGGREGATORS))
def test_gradient_permutation_equivariance(name):
    rng = np.random.default_rng(5)
    params = random_params(rng)
    x = rng.normal(size=(6, 4))
    perm = rng.permutation(6)
    probe = rng.normal(size=AGGREGATORS[name](Tensor(x), params).shape)

    def grad_of(rows):
        t = Tensor(rows.copy(), requires_grad=True)
        (AGGREGATORS[name](t, params) * probe).sum().backward()
        return t.grad

    np.testing.assert_allclose(grad_of(x[perm]), grad_of(x)[perm], atol=1e-6)


@pytest.mark.parametrize("name", sorted(AGGREGATORS))
def test_aggregator_gradients(name):
    rng = np.random.default_rng(6)
    params = random_params(rng)
    x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    probe = rng.normal(size=AGGREGATORS[name](x, params).shape)
    tensors = [x] + (list(params.tensors().values()) if name == "attention" else [])
    assert check_gradients(lambda: (AGGREGATORS[name](x, params) * probe).sum(), tensors) <= 1e-4


def test_mean_gradient_is_uniform():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 3)), requires_grad=True)
    aggregate_mean(x).sum().backward()
    np.testing.assert_allclose(x.grad, 0.25)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), bump=st.floats(0.0, 10.0))
def test_max_is_monotone(seed, bump):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, 3))
    before = aggregate_max(Tensor(x)).data
    i, j = rng.integers(5), rng.integers(3)
    x[i, j] += bump
    assert np.all(aggregate_max(Tensor(x)).data >= before)


def test_attention_invariant_to_logit_shift():
    # shifting b_k by c * q / |q|^2 adds c / sqrt(d_key) to every logit of a single head
    rng = np.random.default_rng(7)
    params = random_params(rng, heads=1)
    x = Tensor(rng.normal(size=(6, 4)))
    base = aggregate_attention(x, params).data
    q = params.query.data[:, 0]
    params.key_bias.data += 3.7 * q / (q @ q)
    np.testing.assert_allclose(aggregate_attention(x, params).data, base, atol=1e-10)
