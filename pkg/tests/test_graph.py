import numpy as np
import pytest

from liteseg import graph as G
from liteseg import ops
from liteseg.graph import GraphBuilder, GraphError, LayerSpec, ModelGraph
from liteseg.tensor import NonFiniteError


def small_graph(separable=False):
    b = GraphBuilder(3)
    x = b.conv_bn_act("c1", b.input_id, 8, 3, stride=2, separable=False)
    y = b.conv_bn_act("c2", x, 8, 3, dilation=2, separable=separable)
    z = b.concat("cat", x, y)
    z = b.conv("head", z, 4, 1, bias=True)
    out = b.upsample_like("up", z, b.input_id)
    b.taps.update(logits=out)
    return b.build("small")


def test_graph_validation():
    inp = LayerSpec("in", "input", out_c=3)
    with pytest.raises(GraphError, match="duplicate"):
        ModelGraph((inp, inp))
    with pytest.raises(GraphError, match="'a'.*not an earlier"):
        ModelGraph((inp, LayerSpec("a", "activation", ("b",))))
    with pytest.raises(GraphError, match="exactly one input"):
        ModelGraph((LayerSpec("a", "activation"),))
    with pytest.raises(GraphError, match="tap"):
        ModelGraph((inp,), {"logits": "zzz"})
    with pytest.raises(GraphError, match="unknown kind"):
        ModelGraph((inp, LayerSpec("a", "softmax", ("in",))))


def test_shape_inference_and_costs():
    g = small_graph()
    s = G.infer_shapes(g, (1, 3, 32, 32))
    assert s["c1.act"] == (1, 8, 16, 16)
    assert s["cat"] == (1, 16, 16, 16)
    assert s["up"] == (1, 4, 32, 32)
    rep = G.count_flops(g, (1, 3, 32, 32), "mac")
    assert rep.per_layer["c1.conv"].flops == 16 * 16 * 8 * 3 * 9
    assert rep.per_layer["c2.conv"].flops == 16 * 16 * 8 * 8 * 9
    assert rep.per_layer["c1.bn"].flops == 8 * 16 * 16
    assert rep.per_layer["up"].flops == 7 * 4 * 32 * 32
    assert rep.per_layer["cat"].flops == 0
    assert rep.per_layer["head"].params == 16 * 4 + 4
    assert rep.per_layer["c1.bn"].params == 16
    assert rep.untrainable_params == 32
    assert rep.total_params == G.count_params(g).total_params


def test_mac2_doubles_conv_flops_only():
    g = small_graph(separable=True)
    mac = G.count_flops(g, (1, 3, 32, 32), "mac")
    mac2 = G.count_flops(g, (1, 3, 32, 32), "mac2")
    for layer in g.layers:
        f1, f2 = mac.per_layer[layer.id].flops, mac2.per_layer[layer.id].flops
        assert f2 == (2 * f1 if layer.kind in ("conv", "dwsep_conv") else f1)
    assert mac.per_layer["c2.conv"].flops == 16 * 16 * (8 * 9 + 8 * 8)
    with pytest.raises(ValueError):
        G.count_flops(g, (1, 3, 32, 32), "flop3")


def test_separable_has_fewer_params():
    std = G.count_params(small_graph(False)).per_layer["c2.conv"].params
    sep = G.count_params(small_graph(True)).per_layer["c2.conv"].params
    assert sep == 8 * 9 + 8 * 8 < std == 8 * 8 * 9


def test_shape_errors_name_the_layer():
    b = GraphBuilder(3)
    a = b.conv("a", b.input_id, 4, 3, stride=2)
    bad = b.concat("join", a, b.input_id)
    b.taps["out"] = bad
    with pytest.raises(G.ShapeError, match="join"):
        G.infer_shapes(b.build(), (1, 3, 16, 16))
    with pytest.raises(GraphError, match="channels"):
        G.infer_shapes(small_graph(), (1, 4, 16, 16))


def test_summarize_totals():
    g = small_graph()
    text = G.summarize(g, (1, 3, 32, 32))
    rep = G.count_flops(g, (1, 3, 32, 32))
    assert f"params={rep.total_params:,}" in text and f"flops={rep.total_flops:,}" in text
    assert "c2.conv" in text


def test_weights_roundtrip(tmp_path):
    g = small_graph()
    w = G.init_weights(g, 3)
    path = tmp_path / "w.bin"
    G.save_weights(path, w)
    back = G.load_weights(path, g)
    assert back.keys() == w.keys()
    assert all(np.array_equal(back[k], w[k]) for k in w)


def test_weights_load_errors(tmp_path):
    g = small_graph()
    p = tmp_path / "bad.bin"
    p.write_bytes(b"XXXX")
    with pytest.raises(G.WeightLoadError, match="magic"):
        G.load_weights(p)
    G.save_weights(p, {"nope.weight": np.zeros(3)})
    with pytest.raises(G.WeightLoadError, match="unknown"):
        G.load_weights(p, g)
    G.save_weights(p, {"head.bias": np.zeros(5)})
    with pytest.raises(G.WeightLoadError, match="shape"):
        G.load_weights(p, g)
    G.save_weights(p, {"head.bias": np.zeros(4)})
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(G.WeightLoadError, match="truncated"):
        G.load_weights(p)


def test_init_weights_convention():
    g = small_graph()
    w = G.init_weights(g, 0)
    bound = np.sqrt(6 / (3 * 9))
    assert np.abs(w["c1.conv.weight"]).max() <= bound
    assert np.all(w["c1.bn.gamma"] == 1) and np.all(w["c1.bn.running_var"] == 1)
    assert np.all(w["c1.bn.beta"] == 0) and np.all(w["head.bias"] == 0)


def test_run_matches_manual_ops(rng):
    g = small_graph()
    w = G.init_weights(g, 1)
    x = rng.standard_normal((1, 3, 32, 32)).astype(np.float32)
    out = G.forward(g, x, w, check_shapes=True)["logits"]

    def cba(name, inp, p):
        y = ops.conv2d(inp, ops.ConvWeights(w[f"{name}.conv.weight"]), p)
        bn = ops.BatchNormParams(*(w[f"{name}.bn.{s}"] for s in ("gamma", "beta", "running_mean", "running_var")))
        return ops.relu(ops.batchnorm_infer(y, bn))

    a = cba("c1", x, ops.ConvParams(2, 1))
    c = cba("c2", a, ops.ConvParams(1, 2, 2))
    h = ops.conv2d(np.concatenate([a, c], 1), ops.ConvWeights(w["head.weight"], w["head.bias"]))
    np.testing.assert_allclose(out, ops.bilinear_upsample(h, 32, 32), atol=1e-5)


def test_alternative_topological_order_gives_same_result(rng):
    b = GraphBuilder(3)
    left = b.conv("left", b.input_id, 4, 3)
    right = b.conv("right", b.input_id, 4, 1)
    b.taps["out"] = b.concat("cat", left, right)
    g = b.build()
    w = G.init_weights(g, 2)
    x = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
    a = G.forward(g, x, w)["out"]
    c = G.forward(g, x, w, order=["input", "right", "left", "cat"])["out"]
    assert np.array_equal(a, c)
    with pytest.raises(GraphError, match="before its input"):
        G.run(g, x, w, order=["input", "cat", "left", "right"])
    with pytest.raises(GraphError, match="exactly once"):
        G.run(g, x, w, order=["input", "left", "cat"])


def test_missing_weight_names_layer(rng):
    g = small_graph()
    w = G.init_weights(g, 0)
    del w["c2.bn.gamma"]
    with pytest.raises(G.WeightLoadError, match="c2.bn"):
        G.forward(g, np.zeros((1, 3, 16, 16), np.float32), w)


def test_nonfinite_is_reported_per_layer():
    g = small_graph()
    w = G.init_weights(g, 0)
    w["c1.conv.weight"] = np.full_like(w["c1.conv.weight"], 3e38)
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError, match="c1"):
        G.forward(g, np.ones((1, 3, 16, 16), np.float32), w)


def test_backward_requires_recording():
    g = small_graph()
    state = G.run(g, np.zeros((1, 3, 16, 16), np.float32), G.init_weights(g))
    with pytest.raises(ops.UsageError):
        G.backward(g, state, {"up": np.zeros((1, 4, 16, 16))})


def test_graph_backward_matches_finite_differences(rng):
    from conftest import max_rel_err, numeric_grad

    g = small_graph(separable=True)
    w = {k: v.astype(np.float64) for k, v in G.init_weights(g, 5).items()}
    x = rng.standard_normal((2, 3, 8, 8))
    r = rng.standard_normal((2, 4, 8, 8))
    state = G.run(g, x, w, mode="train", record=True)
    grads, dx = G.backward(g, state, {"up": r})

    def loss(name, v):
        ww = dict(w)
        ww[name] = v
        return float((G.run(g, x, ww, mode="train").values["up"] * r).sum())

    for name in ("head.weight", "c2.conv.dw", "c2.conv.pw", "c1.bn.gamma"):
        assert max_rel_err(grads[name], numeric_grad(lambda v, n=name: loss(n, v), w[name], 1e-6)) < 1e-4
    assert "c1.bn.running_mean" not in grads
