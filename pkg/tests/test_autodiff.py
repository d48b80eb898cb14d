import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hnseg import autodiff as ad
from hnseg.errors import NonScalarLoss, ShapeMismatch

from conftest import max_rel_error, taped_grads


def weighted_sum(t, seed=7):
    """Scalar probe sum(t * W) with a fixed random W, so every output entry matters."""
    w = np.random.default_rng(seed).standard_normal(t.shape)
    return ad.sum_all(ad.mul(t, ad.Tensor(w)))


def test_matmul_values_and_scalar_grads():
    x = np.random.default_rng(0).standard_normal((3, 3))
    out = ad.matmul(ad.Tensor(np.eye(3)), ad.Tensor(x))
    np.testing.assert_array_equal(out.data, x)

    a, b = np.array([[2.0]]), np.array([[3.0]])
    value, (ga, gb) = taped_grads(lambda a, b: ad.sum_all(ad.matmul(a, b)), [a, b])
    assert value == 6.0
    assert ga[0, 0] == 3.0 and gb[0, 0] == 2.0


def test_matmul_finite_difference(rng):
    arrays = [rng.standard_normal((4, 5)), rng.standard_normal((5, 6))]
    assert max_rel_error(lambda a, b: weighted_sum(ad.matmul(a, b)), arrays) < 1e-6


def test_batched_matmul_and_linear(rng):
    arrays = [rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))]
    assert max_rel_error(lambda a, b: weighted_sum(ad.matmul(a, b)), arrays) < 1e-6
    arrays = [rng.standard_normal((6, 4)), rng.standard_normal((4, 3)), rng.standard_normal(3)]
    assert max_rel_error(lambda x, w, b: weighted_sum(ad.linear(x, w, b)), arrays) < 1e-6


@pytest.mark.parametrize("name", ["sigmoid", "gelu", "softmax_lastdim"])
def test_pointwise_finite_difference(name, rng):
    f = getattr(ad, name)
    arrays = [rng.standard_normal((3, 5)) * 2]
    assert max_rel_error(lambda x: weighted_sum(f(x)), arrays) < 1e-5


@pytest.mark.parametrize("name", ["add", "sub", "mul"])
def test_binary_finite_difference(name, rng):
    f = getattr(ad, name)
    arrays = [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]
    assert max_rel_error(lambda a, b: weighted_sum(f(a, b)), arrays) < 1e-5


def test_add_broadcasts_trailing_suffix_only(rng):
    arrays = [rng.standard_normal((2, 3, 4)), rng.standard_normal(4)]
    assert max_rel_error(lambda a, b: weighted_sum(ad.add(a, b)), arrays) < 1e-5
    with pytest.raises(ShapeMismatch):
        ad.add(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros(2)))


def test_known_values():
    np.testing.assert_allclose(ad.softmax_lastdim(ad.Tensor(np.zeros(2))).data, [0.5, 0.5])
    assert ad.sigmoid(ad.Tensor(np.zeros(1))).data[0] == 0.5
    assert ad.gelu(ad.Tensor(np.zeros(1))).data[0] == 0.0
    # stable at extremes
    s = ad.sigmoid(ad.Tensor(np.array([-800.0, 800.0]))).data
    assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[1] == 1.0
    sm = ad.softmax_lastdim(ad.Tensor(np.array([1000.0, 1000.0]))).data
    np.testing.assert_allclose(sm, [0.5, 0.5])


def test_layer_norm(rng):
    x = rng.standard_normal((5, 8)) * 3 + 2
    g, b = np.ones(8), np.zeros(8)
    out = ad.layer_norm(ad.Tensor(x), ad.Tensor(g), ad.Tensor(b)).data
    np.testing.assert_allclose(out.mean(axis=-1), 0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=-1), 1, atol=1e-4)
    bias = rng.standard_normal(8)
    const = ad.layer_norm(ad.Tensor(np.full((2, 8), 3.0)), ad.Tensor(rng.standard_normal(8)), ad.Tensor(bias)).data
    np.testing.assert_allclose(const, np.broadcast_to(bias, (2, 8)))
    arrays = [x, rng.standard_normal(8), rng.standard_normal(8)]
    assert max_rel_error(lambda x, g, b: weighted_sum(ad.layer_norm(x, g, b)), arrays) < 1e-5


def test_instance_norm(rng):
    x = rng.standard_normal((3, 4, 4, 4)) * 2 - 1
    out = ad.instance_norm(ad.Tensor(x), ad.Tensor(np.ones(3)), ad.Tensor(np.zeros(3))).data
    np.testing.assert_allclose(out.mean(axis=(1, 2, 3)), 0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=(1, 2, 3)), 1, atol=1e-4)
    arrays = [x, rng.standard_normal(3), rng.standard_normal(3)]
    assert max_rel_error(lambda x, g, b: weighted_sum(ad.instance_norm(x, g, b)), arrays) < 1e-4


def test_conv3d_counting_and_identity(rng):
    ones = ad.conv3d(ad.Tensor(np.ones((1, 5, 5, 5))), ad.Tensor(np.ones((1, 1, 3, 3, 3))), pad=1).data
    assert ones[0, 2, 2, 2] == 27.0
    assert ones[0, 0, 0, 0] == 8.0  # corner sees 2x2x2 of the input
    x = rng.standard_normal((2, 4, 4, 4))
    w = np.zeros((2, 2, 1, 1, 1))
    w[0, 0] = w[1, 1] = 1.0
    np.testing.assert_array_equal(ad.conv3d(ad.Tensor(x), ad.Tensor(w)).data, x)


def brute_conv3d(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation, the independent oracle."""
    xp = np.pad(x, ((0, 0),) + ((pad, pad),) * 3)
    co, ci, k = w.shape[0], w.shape[1], w.shape[2]
    n = [(s + 2 * pad - k) // stride + 1 for s in x.shape[1:]]
    out = np.zeros((co, *n))
    for o in range(co):
        for i in range(n[0]):
            for j in range(n[1]):
                for l in range(n[2]):
                    patch = xp[:, i * stride : i * stride + k, j * stride : j * stride + k, l * stride : l * stride + k]
                    out[o, i, j, l] = np.sum(patch * w[o]) + (b[o] if b is not None else 0)
    return out


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 0, 2), (1, 0, 1), (2, 1, 3)])
def test_conv3d_matches_brute_force(stride, pad, k, rng):
    x = rng.standard_normal((2, 6, 5, 7))
    w = rng.standard_normal((3, 2, k, k, k))
    b = rng.standard_normal(3)
    got = ad.conv3d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), stride=stride, pad=pad).data
    np.testing.assert_allclose(got, brute_conv3d(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv3d_finite_difference(rng):
    arrays = [rng.standard_normal((2, 6, 6, 6)), rng.standard_normal((3, 2, 3, 3, 3)), rng.standard_normal(3)]
    err = max_rel_error(lambda x, w, b: weighted_sum(ad.conv3d(x, w, b, pad=1)), arrays, samples=40)
    assert err < 1e-4


def test_conv3d_multiple_slabs_agree(monkeypatch, rng):
    x = rng.standard_normal((2, 6, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    whole = ad.conv3d(ad.Tensor(x), ad.Tensor(w), pad=1).data
    _, g_whole = taped_grads(lambda x, w: weighted_sum(ad.conv3d(x, w, pad=1)), [x, w])
    monkeypatch.setattr(ad, "IM2COL_BYTES", 1)  # one x-plane per slab
    sliced = ad.conv3d(ad.Tensor(x), ad.Tensor(w), pad=1).data
    _, g_sliced = taped_grads(lambda x, w: weighted_sum(ad.conv3d(x, w, pad=1)), [x, w])
    np.testing.assert_allclose(sliced, whole, rtol=1e-12)
    for a, b in zip(g_sliced, g_whole):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def brute_conv_transpose3d(x, w, b, stride, pad):
    """Scatter each input voxel times the kernel into the output, then crop the padding."""
    co, ci, k = w.shape[0], w.shape[1], w.shape[2]
    n = [(s - 1) * stride + k for s in x.shape[1:]]
    out = np.zeros((co, *n))
    for c in range(ci):
        for i in range(x.shape[1]):
            for j in range(x.shape[2]):
                for l in range(x.shape[3]):
                    out[:, i * stride : i * stride + k, j * stride : j * stride + k, l * stride : l * stride + k] += (
                        x[c, i, j, l] * w[:, c])
    if pad:
        out = out[:, pad:-pad, pad:-pad, pad:-pad]
    return out + (b[:, None, None, None] if b is not None else 0)


def test_conv_transpose3d(rng):
    x = rng.standard_normal((3, 3, 2, 4))
    w = rng.standard_normal((2, 3, 2, 2, 2))
    b = rng.standard_normal(2)
    got = ad.conv_transpose3d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b)).data
    assert got.shape == (2, 6, 4, 8)
    np.testing.assert_allclose(got, brute_conv_transpose3d(x, w, b, 2, 0), rtol=1e-12, atol=1e-12)
    arrays = [x, w, b]
    err = max_rel_error(lambda x, w, b: weighted_sum(ad.conv_transpose3d(x, w, b)), arrays, samples=40)
    assert err < 1e-4


def test_structural_ops(rng):
    x = rng.standard_normal((2, 3, 4))
    p = ad.permute(ad.permute(ad.Tensor(x), (2, 0, 1)), (1, 2, 0))
    np.testing.assert_array_equal(p.data, x)
    assert ad.reshape(ad.Tensor(x), (4, 6)).data.sum() == pytest.approx(x.sum())
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((1, 3))
    c = ad.concat_channels(ad.Tensor(a), ad.Tensor(b))
    np.testing.assert_array_equal(ad.slice_axis(c, 0, 0, 2).data, a)
    np.testing.assert_array_equal(ad.slice_axis(c, 0, 2, 3).data, b)
    err = max_rel_error(lambda a, b: weighted_sum(ad.permute(ad.reshape(ad.concat_channels(a, b), (3, 3)), (1, 0))),
                        [a, b])
    assert err < 1e-5
    err = max_rel_error(lambda x: weighted_sum(ad.slice_axis(x, 1, 1, 3)), [x])
    assert err < 1e-5


def test_reductions_and_scale(rng):
    x = rng.standard_normal((3, 4))
    _, (g,) = taped_grads(ad.sum_all, [x])
    np.testing.assert_array_equal(g, np.ones_like(x))
    _, (g,) = taped_grads(lambda t: ad.sum_all(ad.mul(t, t)), [x])
    np.testing.assert_allclose(g, 2 * x)
    _, (g,) = taped_grads(ad.mean_all, [x])
    np.testing.assert_allclose(g, np.full_like(x, 1 / 12))
    assert max_rel_error(lambda t: weighted_sum(ad.scale(t, -2.5)), [x]) < 1e-5


def test_gradient_linearity(rng):
    x = rng.standard_normal((4, 4))
    f = lambda t: weighted_sum(ad.gelu(t), 1)
    g = lambda t: weighted_sum(ad.sigmoid(t), 2)
    _, (gf,) = taped_grads(f, [x])
    _, (gg,) = taped_grads(g, [x])
    _, (gc,) = taped_grads(lambda t: ad.add(ad.scale(f(t), 2.0), ad.scale(g(t), -3.0)), [x])
    np.testing.assert_allclose(gc, 2 * gf - 3 * gg, atol=1e-6)


def test_no_recording_outside_tape():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    y = ad.sigmoid(x)
    assert not y.requires_grad
    with ad.Tape() as tape:
        y = ad.sum_all(ad.sigmoid(x))
    assert len(tape.nodes) == 2
    ad.backward(tape, y)
    assert tape.nodes == []


def test_non_scalar_loss_rejected():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.sigmoid(x)
    with pytest.raises(NonScalarLoss):
        ad.backward(tape, y)


def test_debug_mode_detects_mutation():
    @ad.op
    def bad(a):
        a.data[0] = 99.0
        return ad.Tensor(a.data.copy())

    ad.set_debug(True)
    try:
        with pytest.raises(RuntimeError, match="mutated"):
            bad(ad.Tensor(np.zeros(3)))
        ad.gelu(ad.Tensor(np.ones(3)))  # pure ops pass
    finally:
        ad.set_debug(False)


def test_grad_accumulates_across_backward_calls():
    x = ad.Tensor(np.ones(2), requires_grad=True)
    for _ in range(2):
        with ad.Tape() as tape:
            y = ad.sum_all(x)
        ad.backward(tape, y)
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["sigmoid", "gelu", "softmax_lastdim"]))
def test_pointwise_gradcheck_property(seed, name):
    x = np.random.default_rng(seed).standard_normal((2, 4)) * 3
    f = getattr(ad, name)
    assert max_rel_error(lambda t: weighted_sum(f(t)), [x]) < 1e-5


def test_checkpoint_roundtrip(rng):
    named = {"a.w": rng.standard_normal((3, 4)).astype(np.float32), "b": np.zeros(5, np.float32)}
    blob = ad.save_tensors(named, {"epoch": 3})
    back, meta = ad.load_tensors(blob)
    assert meta["epoch"] == 3
    assert list(back) == list(named)
    for k in named:
        np.testing.assert_array_equal(back[k], named[k])
    with pytest.raises(ValueError):
        ad.load_tensors(b"XXXX" + blob[4:])
