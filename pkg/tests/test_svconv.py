import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lowlatseg.svconv import KernelField, svconv_backward, svconv_forward, svconv_reference
from lowlatseg.tensor_nn import ShapeError, grad_check


def random_field(rng, k, h, w):
    return KernelField.from_logits(rng.normal(scale=2.0, size=(k * k, h, w)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([1, 3, 5, 9]), st.integers(1, 4),
       st.integers(1, 8), st.integers(1, 8))
def test_forward_matches_reference(seed, k, c, h, w):
    rng = np.random.default_rng(seed)
    feat = rng.normal(size=(c, h, w))
    field = random_field(rng, k, h, w)
    np.testing.assert_allclose(svconv_forward(feat, field), svconv_reference(feat, field),
                               rtol=0, atol=1e-12)


def test_identity_kernel_is_noop():
    feat = np.random.default_rng(0).normal(size=(3, 5, 6))
    np.testing.assert_array_equal(svconv_forward(feat, KernelField.one_hot(3, (5, 6))), feat)


def test_one_hot_offset_shifts():
    feat = np.random.default_rng(1).normal(size=(2, 6, 6))
    out = svconv_forward(feat, KernelField.one_hot(5, (6, 6), offset=(1, -2)))
    # out[i, j] = f[i - 1, j + 2], zero outside
    expected = np.zeros_like(feat)
    expected[:, 1:, :4] = feat[:, :5, 2:]
    np.testing.assert_array_equal(out, expected)


def test_channel_offset_convention():
    k = 3
    field = KernelField.one_hot(k, (1, 1), offset=(-1, 1))
    assert np.argmax(field.weights[:, 0, 0]) == 0 * k + 2


def test_constant_map_preserved_in_interior():
    rng = np.random.default_rng(2)
    field = random_field(rng, 3, 7, 7)
    out = svconv_forward(np.full((2, 7, 7), 4.0), field)
    np.testing.assert_allclose(out[:, 1:-1, 1:-1], 4.0, atol=1e-12)


def test_uniform_kernel_is_box_filter():
    feat = np.random.default_rng(3).normal(size=(1, 5, 5))
    out = svconv_forward(feat, KernelField.uniform(3, (5, 5)))
    assert out[0, 2, 2] == pytest.approx(feat[0, 1:4, 1:4].mean(), abs=1e-12)


def test_kernel_field_validation():
    with pytest.raises(ValueError):
        KernelField.from_weights(np.full((4, 2, 2), 0.25))
    with pytest.raises(ValueError):
        KernelField.from_weights(np.full((9, 2, 2), 0.2))
    w = np.zeros((9, 1, 1))
    w[0], w[1] = 1.5, -0.5
    with pytest.raises(ValueError):
        KernelField.from_weights(w)
    with pytest.raises(ShapeError):
        KernelField.from_logits(np.zeros((8, 2, 2)))


def test_shape_mismatch():
    field = KernelField.uniform(3, (4, 4))
    with pytest.raises(ShapeError):
        svconv_forward(np.zeros((2, 4, 5)), field)
    with pytest.raises(ShapeError):
        svconv_forward(np.zeros((4, 4)), field)


@pytest.mark.parametrize("k", [1, 3, 5])
def test_backward_grad_check(k):
    rng = np.random.default_rng(k)
    feat = rng.normal(size=(2, 4, 5))
    weights = rng.uniform(0.1, 1.0, size=(k * k, 4, 5))
    g = rng.normal(size=feat.shape)

    def fn(p):
        # raw weights are fine for the linear map; only the gradient is checked
        field = KernelField.__new__(KernelField)
        object.__setattr__(field, "k", k)
        object.__setattr__(field, "weights", p["w"])
        out = svconv_forward(p["f"], field)
        gf, gw = svconv_backward(g, p["f"], field)
        return float(np.sum(g * out)), {"f": gf, "w": gw}

    assert grad_check(fn, {"f": feat, "w": weights}).max_rel_error < 1e-6
