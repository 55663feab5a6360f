import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecapa_ccs import layers as L
from ecapa_ccs import tensor as tt
from ecapa_ccs.errors import ConfigError, ShapeError
from ecapa_ccs.tensor import Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


def zero_params(module):
    for p in module.parameters():
        p.data[...] = 0.0


# --- conv_bn_relu ---------------------------------------------------------------

def test_conv_bn_relu_eval_identity_norm_equals_relu_conv():
    layer = L.ConvBnRelu(4, 6, 3, rng=rng()).eval()
    x = Tensor(rng(1).normal(size=(4, 9)))
    expected = np.maximum(tt.conv1d(x, layer.conv.weight, layer.conv.bias).data, 0)
    np.testing.assert_allclose(L.conv_bn_relu(x, layer).data, expected, rtol=0, atol=1e-5)


def test_fst_conv_shape():
    layer = L.ConvBnRelu(48, 1024, 5, rng=rng()).eval()
    assert L.conv_bn_relu(Tensor(np.zeros((48, 202))), layer).shape == (1024, 202)


def test_conv_bn_relu_zero_input_zero_bias():
    layer = L.ConvBnRelu(3, 5, 3, rng=rng()).eval()
    layer.conv.bias.data[...] = 0
    assert np.array_equal(layer(Tensor(np.zeros((3, 7)))).data, np.zeros((5, 7)))


# --- batchnorm ------------------------------------------------------------------

def test_batchnorm_constant_channel_gives_beta():
    bn = L.BatchNorm1d(1)
    bn.beta.data[...] = 0.7
    out = L.batchnorm_forward(Tensor(np.full((2, 1, 5), 3.0)), bn)
    assert np.array_equal(out.data, np.full((2, 1, 5), 0.7))


def test_batchnorm_two_values():
    bn = L.BatchNorm1d(1)
    out = bn(Tensor([[1.0, 3.0]]))
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-5)


def test_batchnorm_eval_uses_running_stats():
    bn = L.BatchNorm1d(1).eval()
    bn.gamma.data[...] = 2.0
    bn.beta.data[...] = 1.0
    np.testing.assert_allclose(bn(Tensor([[1.0]])).data, [[3.0]], atol=1e-5)


def test_batchnorm_running_stats_update():
    bn = L.BatchNorm1d(1)
    bn(Tensor([[1.0, 3.0]]))
    assert bn.running_mean.tolist() == pytest.approx([0.1 * 2.0])
    assert bn.running_var.tolist() == pytest.approx([0.9 + 0.1 * 1.0])


def test_batchnorm_train_needs_two_values():
    with pytest.raises(ShapeError):
        L.BatchNorm1d(2)(Tensor(np.ones((1, 2, 1))))


def test_batchnorm_eval_independent_of_batch_composition():
    bn = L.BatchNorm1d(3).eval()
    bn.running_mean[...] = [0.5, -1.0, 2.0]
    bn.running_var[...] = [1.5, 0.25, 4.0]
    a = rng(2).normal(size=(1, 3, 6))
    b = rng(3).normal(size=(4, 3, 6))
    alone = bn(Tensor(a)).data
    together = bn(Tensor(np.concatenate([a, b]))).data
    assert alone[0].tobytes() == together[0].tobytes()


# --- res2 -----------------------------------------------------------------------

def test_res2_zero_weights_pass_group_one():
    layer = L.Res2DilatedConv(128, 8, 3, 2, rng=rng())
    zero_params(layer)
    x = rng(1).normal(size=(128, 20))
    y = L.res2_forward(Tensor(x), layer).data
    assert np.array_equal(y[:16], x[:16])
    assert np.array_equal(y[16:], np.zeros((112, 20)))


def test_res2_delta_kernels_give_prefix_sums():
    layer = L.Res2DilatedConv(32, 8, 3, 3, rng=rng())
    for conv in layer.convs:
        conv.weight.data[...] = 0
        conv.bias.data[...] = 0
        conv.weight.data[np.arange(4), np.arange(4), 1] = 1.0
    x = rng(4).normal(size=(32, 11))
    y = layer(Tensor(x)).data
    groups = x.reshape(8, 4, 11)
    expected = np.cumsum(groups, axis=0).reshape(32, 11)
    np.testing.assert_allclose(y, expected, rtol=0, atol=1e-12)


@pytest.mark.parametrize("d", [2, 3, 4])
def test_res2_preserves_shape(d):
    layer = L.Res2DilatedConv(128, 8, 3, d, rng=rng())
    assert layer(Tensor(np.zeros((128, 202)))).shape == (128, 202)


def test_res2_indivisible_channels():
    with pytest.raises(ConfigError):
        L.Res2DilatedConv(20, 8, 3, 2, rng=rng())


# --- SE -------------------------------------------------------------------------

def test_se_zero_weights_halves_input():
    block = L.SEBlock(6, 4, rng=rng())
    zero_params(block)
    x = rng(5).normal(size=(6, 9))
    np.testing.assert_array_equal(L.se_forward(Tensor(x), block).data, x / 2)


def test_se_scale_constant_over_time():
    block = L.SEBlock(5, 3, rng=rng(1))
    x = rng(6).normal(size=(2, 5, 7))
    y = block(Tensor(x)).data
    ratio = y / x
    np.testing.assert_allclose(ratio, np.repeat(ratio[..., :1], 7, axis=-1), rtol=1e-12)


def test_se_grad_check():
    block = L.SEBlock(4, 3, rng=rng(2))
    x = Tensor(rng(7).normal(size=(2, 4, 5)))
    w = rng(8).normal(size=(2, 4, 5))
    params = block.parameters()
    assert tt.grad_check(lambda x, *_: tt.sum(block(x) * w, (0, 1, 2)), [x] + params) < 1e-6


# --- ASP ------------------------------------------------------------------------

def _uniform_asp(channels):
    layer = L.AttentiveStatsPooling(channels, 4, rng=rng())
    layer.score.weight.data[...] = 0
    layer.score.bias.data[...] = 0
    return layer


def test_asp_uniform_attention_gives_mean_and_std():
    layer = _uniform_asp(3)
    x = rng(9).normal(size=(3, 12))
    out = L.asp_forward(Tensor(x), layer).data
    np.testing.assert_allclose(out[:3], x.mean(1), atol=1e-12)
    np.testing.assert_allclose(out[3:], x.std(1), atol=1e-10)


def test_asp_constant_input_sigma_is_floor():
    layer = L.AttentiveStatsPooling(2, 4, rng=rng())
    out = layer(Tensor(np.full((2, 6), 1.25))).data
    np.testing.assert_allclose(out[:2], 1.25, atol=1e-12)
    np.testing.assert_allclose(out[2:], np.sqrt(1e-8), rtol=1e-6)


def test_asp_output_length():
    layer = L.AttentiveStatsPooling(1536, 128, rng=rng())
    assert layer(Tensor(np.zeros((1536, 5)))).shape == (3072,)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_asp_uniform_attention_is_time_order_independent(seed):
    layer = _uniform_asp(3)
    g = rng(seed)
    x = g.normal(size=(3, 8))
    perm = g.permutation(8)
    a = layer(Tensor(x)).data
    b = layer(Tensor(x[:, perm])).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_asp_context_variant_shapes_and_grad():
    layer = L.AttentiveStatsPooling(3, 4, context=True, rng=rng(3))
    assert layer.attention.weight.shape == (4, 9, 1)
    x = Tensor(rng(10).normal(size=(2, 3, 6)))
    w = rng(11).normal(size=(2, 6))
    assert tt.grad_check(lambda x, *_: tt.sum(layer(x) * w, (0, 1)),
                         [x] + layer.parameters()) < 1e-6


# --- linear ---------------------------------------------------------------------

def test_linear_identity():
    layer = L.Linear(4, 4, rng=rng())
    layer.weight.data[...] = np.eye(4)
    layer.bias.data[...] = 0
    x = rng(12).normal(size=4)
    np.testing.assert_array_equal(L.linear_forward(Tensor(x), layer).data, x)


@pytest.mark.parametrize("n", [10, 28])
def test_linear_logit_count(n):
    assert L.Linear(3072, n, rng=rng())(Tensor(np.zeros(3072))).shape == (n,)


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        L.Linear(3, 2, rng=rng())(Tensor(np.zeros(4)))


# --- module plumbing ------------------------------------------------------------

def test_layers_preserve_time_length():
    x = Tensor(rng(13).normal(size=(2, 16, 13)))
    assert L.ConvBnRelu(16, 8, 5, 2, rng=rng())(x).shape[-1] == 13
    assert L.Res2DilatedConv(16, 8, 3, 4, rng=rng())(x).shape[-1] == 13
    assert L.SEBlock(16, 4, rng=rng())(x).shape[-1] == 13


def test_state_dict_roundtrip_and_shape_check():
    a = L.ConvBnRelu(3, 4, 3, rng=rng(1))
    b = L.ConvBnRelu(3, 4, 3, rng=rng(2))
    a.bn.running_mean[...] = 0.3
    b.load_state_dict(a.state_dict())
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and va.tobytes() == vb.tobytes()
    bad = L.ConvBnRelu(3, 5, 3, rng=rng())
    with pytest.raises(ShapeError):
        bad.load_state_dict(a.state_dict())


def test_init_bounds():
    conv = L.Conv1d(8, 4, 3, rng=rng())
    assert np.abs(conv.weight.data).max() <= np.sqrt(1 / 24)
    lin = L.Linear(16, 4, rng=rng())
    assert np.abs(lin.weight.data).max() <= 0.25


# --- gradient checks per layer --------------------------------------------------

def _layer_cases():
    g = rng(20)
    return {
        "conv_bn_relu": (L.ConvBnRelu(3, 4, 3, 2, rng=g), (2, 3, 6)),
        "batchnorm": (L.BatchNorm1d(3), (2, 3, 5)),
        "res2": (L.Res2DilatedConv(8, 4, 3, 2, rng=g), (2, 8, 6)),
        "asp": (L.AttentiveStatsPooling(3, 4, rng=g), (2, 3, 6)),
        "linear": (L.Linear(5, 3, rng=g), (2, 5)),
    }


@pytest.mark.parametrize("name", sorted(_layer_cases()))
def test_layer_grad_check(name):
    layer, shape = _layer_cases()[name]
    g = rng(21)
    x = Tensor(g.normal(size=shape))
    if name == "conv_bn_relu":
        # keep pre-activations away from the relu kink
        layer.bn.beta.data[...] = 3.0
    out_shape = layer(x).shape
    w = g.normal(size=out_shape)
    axes = tuple(range(len(out_shape)))
    f = lambda x, *_: tt.sum(layer(x) * w, axes)  # noqa: E731
    tol = 1e-4 if name == "conv_bn_relu" else 1e-6
    assert tt.grad_check(f, [x] + layer.parameters()) < tol
