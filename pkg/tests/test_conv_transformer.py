import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fmnet import autograd as ag
from fmnet.autograd import Tensor
from fmnet.conv_transformer import (ConvAttentionLayer, ConvTransformer, attention_map, conv_self_attention, decode,
                                    encode, transformer_layer)
from fmnet.errors import ShapeError
from fmnet.posenc import FeatureSequence

from _oracles import attention_loop, numerical_grad, rel_err, score_loop


def make_seq(rng, m, c=4, h=5, w=5):
    return FeatureSequence(Tensor(rng.normal(size=(m, c, h, w))), tuple(range(m)))


def layer_arrays(layer):
    return (layer.qnet.w.data, layer.qnet.b.data, layer.knet.w.data, layer.knet.b.data,
            layer.vnet.w.data, layer.vnet.b.data, layer.anet.conv1.w.data, layer.anet.conv1.b.data,
            layer.anet.conv2.w.data, layer.anet.conv2.b.data)


def randomise_biases(layer, rng):
    for _, p in layer.named_parameters():
        if p.ndim == 1:
            p.data[:] = rng.normal(scale=0.3, size=p.shape)


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_attention_matches_brute_force(seed, m):
    rng = np.random.default_rng([seed, m])
    layer = ConvAttentionLayer(4, rng)
    randomise_biases(layer, rng)
    s = make_seq(rng, m, h=6, w=5)
    got = conv_self_attention(s, layer).maps.data
    want = attention_loop(s.maps.data, *layer_arrays(layer))
    assert np.max(np.abs(got - want)) <= 1e-12


def test_attention_map_matches_direct_conv():
    rng = np.random.default_rng(3)
    layer = ConvAttentionLayer(4, rng)
    q, k = rng.normal(size=(1, 4, 4)), rng.normal(size=(1, 4, 4))
    randomise_biases(layer, rng)
    got = attention_map(Tensor(q), Tensor(k), layer.anet).data
    want = score_loop(np.concatenate([q, k]), *layer_arrays(layer)[6:])
    assert np.max(np.abs(got - want)) <= 1e-12


def test_scores_depend_on_the_query():
    """Attention weights for different i differ when the frames differ."""
    rng = np.random.default_rng(9)
    layer = ConvAttentionLayer(4, rng)
    w = layer.attention_weights(Tensor(rng.normal(size=(3, 4, 4, 4)))).data
    assert not np.allclose(w[0], w[1])


def test_zero_score_net_gives_zero_maps():
    rng = np.random.default_rng(0)
    layer = ConvAttentionLayer(4, rng)
    layer.anet.zero_()
    q, k = Tensor(rng.normal(size=(1, 3, 3))), Tensor(rng.normal(size=(1, 3, 3)))
    assert np.array_equal(attention_map(q, k, layer.anet).data, np.zeros((1, 3, 3)))
    # uniform weights then average the values
    s = make_seq(rng, 3)
    w = layer.attention_weights(s.maps).data
    assert np.allclose(w, 1 / 3, atol=1e-15)


def test_attention_map_shape_mismatch():
    layer = ConvAttentionLayer(2, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        attention_map(Tensor(np.zeros((1, 3, 3))), Tensor(np.zeros((1, 3, 4))), layer.anet)


def test_single_frame_attention_is_value():
    rng = np.random.default_rng(1)
    layer = ConvAttentionLayer(4, rng)
    s = make_seq(rng, 1)
    assert np.allclose(conv_self_attention(s, layer).maps.data, layer.vnet(s.maps).data, atol=1e-15, rtol=0)


def test_identical_frames_give_identical_outputs():
    rng = np.random.default_rng(2)
    layer = ConvAttentionLayer(4, rng)
    frame = rng.normal(size=(4, 5, 5))
    out = conv_self_attention(FeatureSequence(Tensor(np.stack([frame] * 3)), (0, 1, 2)), layer).maps.data
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.permutations([0, 1, 2, 3]))
def test_permutation_equivariance(seed, perm):
    rng = np.random.default_rng(seed)
    layer = ConvAttentionLayer(4, rng)
    x = rng.normal(size=(4, 4, 3, 3))
    out = layer.attend(Tensor(x)).data
    out_perm = layer.attend(Tensor(x[list(perm)])).data
    assert np.allclose(out_perm, out[list(perm)], atol=1e-13, rtol=0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_attention_weights_sum_to_one(seed, m):
    rng = np.random.default_rng(seed)
    layer = ConvAttentionLayer(4, rng)
    w = layer.attention_weights(Tensor(rng.normal(scale=3.0, size=(m, 4, 4, 4)))).data
    assert w.shape == (m, m, 4, 4)
    assert np.max(np.abs(w.sum(axis=1) - 1.0)) <= 1e-12


def test_zeroed_layer_is_identity():
    rng = np.random.default_rng(4)
    layer = ConvAttentionLayer(4, rng).zero_()
    s = make_seq(rng, 3)
    out = transformer_layer(s, layer)
    assert out.maps.shape == s.maps.shape and out.positions == s.positions
    assert np.array_equal(out.maps.data, s.maps.data)


def test_layer_residual_structure():
    rng = np.random.default_rng(5)
    layer = ConvAttentionLayer(4, rng)
    x = Tensor(rng.normal(size=(3, 4, 4, 4)))
    y = x.data + layer.attend(x).data
    want = y + layer.ffn(Tensor(y)).data
    assert np.allclose(layer(x).data, want, atol=1e-14, rtol=0)


@pytest.mark.parametrize("seed", range(5))
def test_layer_gradients(seed):
    """Every parameter and the input of one layer at M=3, c=4, 6x6."""
    rng = np.random.default_rng(seed)
    layer = ConvAttentionLayer(4, rng)
    randomise_biases(layer, rng)
    x = Tensor(rng.normal(size=(3, 4, 6, 6)), requires_grad=True)
    weights = rng.normal(size=(3, 4, 6, 6))
    ag.backward(ag.tsum(ag.mul(layer(x), Tensor(weights))))

    def f():
        with ag.no_grad():
            return float(np.sum(layer(Tensor(x.data)).data * weights))

    probe = rng.choice(x.data.size, size=40, replace=False)
    num = numerical_grad(f, x.data, indices=probe)
    assert rel_err(x.grad.reshape(-1)[probe], num.reshape(-1)[probe]) < 1e-5
    for name, p in layer.named_parameters():
        num = numerical_grad(f, p.data)
        assert rel_err(p.grad, num) < 1e-5, name


def test_stack_names_and_depth():
    enc = ConvTransformer(4, 6, np.random.default_rng(0))
    assert enc.depth == 6
    names = [n for n, _ in enc.named_parameters()]
    assert "L0.qnet.w" in names and "L5.anet.1.b" in names and "L5.ffn.1.w" in names
    with pytest.raises(ShapeError):
        ConvTransformer(4, 0, np.random.default_rng(0))


def test_encode_rejects_empty_and_preserves_order():
    rng = np.random.default_rng(6)
    enc = ConvTransformer(4, 2, rng)
    with pytest.raises(ShapeError):
        encode(FeatureSequence(Tensor(np.zeros((0, 4, 2, 2))), ()), enc)
    out = encode(FeatureSequence(Tensor(rng.normal(size=(2, 4, 3, 3))), (3, 7)), enc)
    assert out.positions == (3, 7) and out.maps.shape == (2, 4, 3, 3)


def test_decoder_mixes_positions():
    rng = np.random.default_rng(7)
    dec = ConvTransformer(4, 1, rng)
    s = make_seq(rng, 4)
    out = decode(s, dec).maps.data
    assert not np.allclose(out[0], s.maps.data[0])
    # changing another frame changes the output at frame 0
    other = s.maps.data.copy()
    other[2] += 1.0
    assert not np.allclose(decode(FeatureSequence(Tensor(other), s.positions), dec).maps.data[0], out[0])


def test_attention_cost_is_quadratic_in_length():
    rng = np.random.default_rng(8)
    enc = ConvTransformer(4, 6, rng)
    costs = {}
    for m in (2, 12):
        with ag.count_ops() as counter:
            encode(make_seq(rng, m, h=4, w=4), enc)
        costs[m] = counter["encoder/attention"]
    assert costs[2] * 36 == costs[12]
    assert costs[2] <= costs[12] / 30
