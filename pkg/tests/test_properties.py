"""Property-based checks."""
import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from liteseg import ops
from liteseg.graph import GraphBuilder, count_params, infer_shapes
from liteseg.metrics import ConfusionMatrix, miou
from liteseg.train import poly_lr

small = settings(max_examples=60, deadline=None)


@small
@given(size=st.integers(1, 40), k=st.integers(1, 5), d=st.integers(1, 9), s=st.integers(1, 3), p=st.integers(0, 9))
def test_dilated_extent_equals_dense_kernel_extent(size, k, d, s, p):
    keff = (k - 1) * d + 1
    if keff > size + 2 * p:
        return
    assert ops.conv_output_extent(size, k, s, p, d) == ops.conv_output_extent(size, keff, s, p, 1)


@small
@given(h=st.integers(4, 24), w=st.integers(4, 24), d=st.integers(1, 6))
def test_shape_inference_dilated_vs_dense(h, w, d):
    def graph(k, dil):
        b = GraphBuilder(2)
        b.taps["y"] = b.conv("c", b.input_id, 3, k, dilation=dil, padding=0)
        return b.build()

    keff = 2 * d + 1
    if keff > min(h, w):
        return
    sa = infer_shapes(graph(3, d), (1, 2, h, w))["c"]
    sb = infer_shapes(graph(keff, 1), (1, 2, h, w))["c"]
    assert sa == sb


@small
@given(c=st.integers(1, 64), out_c=st.integers(2, 64), k=st.integers(2, 7))
def test_separable_cheaper_than_standard(c, out_c, k):
    def params(sep):
        b = GraphBuilder(c)
        b.taps["y"] = b.dwsep("c", b.input_id, out_c, k) if sep else b.conv("c", b.input_id, out_c, k)
        return count_params(b.build()).total_params

    assert params(True) < params(False)


@small
@given(seed=st.integers(0, 2**31), scale=st.floats(1e-3, 1e3))
def test_ops_keep_finite_values(seed, scale):
    rng = np.random.default_rng(seed)
    x = (rng.standard_normal((1, 4, 6, 6)) * scale).astype(np.float32)
    k = ops.ConvWeights(rng.standard_normal((4, 1, 3, 3)).astype(np.float32))
    outs = [
        ops.conv2d(x, k, ops.ConvParams(padding=2, dilation=2, groups=4)),
        ops.maxpool2d(x, 3, 2, 1),
        ops.avgpool2d(x),
        ops.bilinear_upsample(x, 11, 13),
        ops.relu6(x),
        ops.leaky_relu(x),
        ops.softmax_channel(x),
    ]
    assert all(np.isfinite(o).all() for o in outs)
    np.testing.assert_allclose(ops.softmax_channel(x).sum(axis=1), 1.0, atol=1e-5)


@small
@given(ih=st.integers(1, 8), iw=st.integers(1, 8), fh=st.integers(1, 4), fw=st.integers(1, 4), seed=st.integers(0, 999))
def test_upsample_backward_is_adjoint(ih, iw, fh, fw, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, ih, iw))
    oh, ow = ih * fh + fh // 2, iw * fw
    y = rng.standard_normal((1, 2, oh, ow))
    ctx = {}
    ax = ops.bilinear_upsample(x, oh, ow, ctx)
    aty = ops.upsample_backward(y, ctx)
    assert np.isclose((ax * y).sum(), (x * aty).sum(), rtol=1e-9, atol=1e-9)


@small
@given(initial=st.floats(1e-9, 1.0), max5=st.integers(1, 80), power=st.floats(0.1, 3.0))
def test_poly_lr_non_increasing(initial, max5, power):
    m = 5 * max5
    vals = [poly_lr(initial, e, m, power) for e in range(m + 1)]
    assert vals[0] == initial and vals[-1] == 0.0
    assert all(a >= b for a, b in zip(vals, vals[1:]))


@small
@given(seed=st.integers(0, 10_000), k=st.integers(1, 6), n=st.integers(1, 50))
def test_confusion_additive_and_miou_bounded(seed, k, n):
    rng = np.random.default_rng(seed)
    t = rng.integers(0, k, 2 * n)
    p = rng.integers(0, k, 2 * n)
    whole = ConfusionMatrix(k).update(p, t)
    parts = ConfusionMatrix(k).update(p[:n], t[:n]).update(p[n:], t[n:])
    assert np.array_equal(whole.counts, parts.counts)
    m = miou(whole)
    assert 0.0 <= m <= 1.0
    assert (m == 1.0) == (np.count_nonzero(whole.counts - np.diag(np.diag(whole.counts))) == 0)
