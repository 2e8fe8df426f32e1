"""Layer DAG: shape inference, parameter/FLOP accounting and execution.

A ``ModelGraph`` is an ordered tuple of ``LayerSpec`` whose inputs always
refer to earlier layers, so list order is a topological order.  Weights
live outside the graph in a plain ``dict[str, ndarray]`` keyed
``"<layer>.<param>"``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np

from . import ops
from .tensor import DTYPE, Shape4, ShapeError, check_finite, shape4

KINDS = {
    "input", "conv", "dwsep_conv", "batchnorm", "activation", "maxpool", "avgpool",
    "globalpool", "upsample", "concat", "add", "channel_shuffle",
}
PARAM_KINDS = {"conv", "dwsep_conv", "batchnorm"}
CONVENTIONS = {"mac": 1, "mac2": 2}
UPSAMPLE_OPS_PER_OUTPUT = 7


class GraphError(ShapeError):
    """Structural or shape problem, always naming the offending layer."""


class WeightLoadError(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    inputs: tuple[str, ...] = ()
    out_c: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1
    bias: bool = False
    act: str = "relu"
    slope: float = 0.1

    def conv_params(self) -> ops.ConvParams:
        return ops.ConvParams(self.stride, self.padding, self.dilation, self.groups)


@dataclass(frozen=True)
class ModelGraph:
    layers: tuple[LayerSpec, ...]
    taps: Mapping[str, str] = field(default_factory=dict)
    name: str = "model"

    def __post_init__(self):
        seen: dict[str, LayerSpec] = {}
        n_inputs = 0
        for layer in self.layers:
            if layer.kind not in KINDS:
                raise GraphError(f"layer {layer.id!r}: unknown kind {layer.kind!r}")
            if layer.id in seen:
                raise GraphError(f"layer {layer.id!r}: duplicate id")
            for src in layer.inputs:
                if src not in seen:
                    raise GraphError(f"layer {layer.id!r}: input {src!r} is not an earlier layer")
            n_inputs += layer.kind == "input"
            seen[layer.id] = layer
        if n_inputs != 1:
            raise GraphError(f"graph must have exactly one input layer, found {n_inputs}")
        for tap, lid in self.taps.items():
            if lid not in seen:
                raise GraphError(f"tap {tap!r} refers to unknown layer {lid!r}")
        object.__setattr__(self, "_index", seen)

    def __getitem__(self, layer_id: str) -> LayerSpec:
        return self._index[layer_id]

    def __contains__(self, layer_id: str) -> bool:
        return layer_id in self._index

    @property
    def input_layer(self) -> LayerSpec:
        return next(layer for layer in self.layers if layer.kind == "input")


class GraphBuilder:
    """Appends layers with generated ids; keeps the layer list in topological order."""

    def __init__(self, in_channels: int = 3, input_id: str = "input"):
        self.layers: list[LayerSpec] = [LayerSpec(input_id, "input", out_c=in_channels)]
        self.input_id = input_id
        self.taps: dict[str, str] = {}

    def add(self, layer: LayerSpec) -> str:
        self.layers.append(layer)
        return layer.id

    def conv(self, lid, x, out_c, k=1, stride=1, dilation=1, groups=1, bias=False, padding=None):
        if padding is None:
            padding = dilation * (k - 1) // 2
        return self.add(LayerSpec(lid, "conv", (x,), out_c, k, stride, padding, dilation, groups, bias))

    def dwsep(self, lid, x, out_c, k=3, stride=1, dilation=1, bias=False):
        padding = dilation * (k - 1) // 2
        return self.add(LayerSpec(lid, "dwsep_conv", (x,), out_c, k, stride, padding, dilation, 1, bias))

    def bn(self, lid, x):
        return self.add(LayerSpec(lid, "batchnorm", (x,)))

    def act(self, lid, x, kind="relu", slope=0.1):
        return self.add(LayerSpec(lid, "activation", (x,), act=kind, slope=slope))

    def conv_bn_act(self, lid, x, out_c, k=1, stride=1, dilation=1, groups=1, act="relu", separable=False):
        """conv (or depthwise-separable conv when ``separable`` and k > 1) -> BN -> activation."""
        if separable and k > 1:
            y = self.dwsep(f"{lid}.conv", x, out_c, k, stride, dilation)
        else:
            y = self.conv(f"{lid}.conv", x, out_c, k, stride, dilation, groups)
        y = self.bn(f"{lid}.bn", y)
        if act:
            y = self.act(f"{lid}.act", y, act)
        return y

    def maxpool(self, lid, x, k=2, stride=2, padding=0):
        return self.add(LayerSpec(lid, "maxpool", (x,), kernel=k, stride=stride, padding=padding))

    def avgpool(self, lid, x, k=3, stride=2, padding=1):
        return self.add(LayerSpec(lid, "avgpool", (x,), kernel=k, stride=stride, padding=padding))

    def concat(self, lid, a, b):
        return self.add(LayerSpec(lid, "concat", (a, b)))

    def sum(self, lid, a, b):
        return self.add(LayerSpec(lid, "add", (a, b)))

    def shuffle(self, lid, x, groups):
        return self.add(LayerSpec(lid, "channel_shuffle", (x,), groups=groups))

    def upsample_like(self, lid, x, ref):
        return self.add(LayerSpec(lid, "upsample", (x, ref)))

    def build(self, name="model") -> ModelGraph:
        return ModelGraph(tuple(self.layers), dict(self.taps), name)


# ---------------------------------------------------------------- shapes


def _layer_shape(layer: LayerSpec, ins: list[Shape4]) -> Shape4:
    kind = layer.kind
    if kind in ("batchnorm", "activation"):
        return ins[0]
    if kind in ("conv", "dwsep_conv", "maxpool", "avgpool"):
        n, c, h, w = ins[0]
        k = layer.kernel
        dil = layer.dilation if kind in ("conv", "dwsep_conv") else 1
        oh = ops.conv_output_extent(h, k, layer.stride, layer.padding, dil)
        ow = ops.conv_output_extent(w, k, layer.stride, layer.padding, dil)
        if kind in ("maxpool", "avgpool"):
            return Shape4(n, c, oh, ow)
        if kind == "conv" and (c % layer.groups or layer.out_c % layer.groups):
            raise ShapeError(f"channels {c}->{layer.out_c} not divisible by groups {layer.groups}")
        return Shape4(n, layer.out_c, oh, ow)
    if kind == "globalpool":
        return Shape4(ins[0].n, ins[0].c, 1, 1)
    if kind == "upsample":
        x, ref = ins
        if ref.h < x.h or ref.w < x.w:
            raise ShapeError(f"upsample target {ref.h}x{ref.w} smaller than input {x.h}x{x.w}")
        return Shape4(x.n, x.c, ref.h, ref.w)
    if kind == "concat":
        a, b = ins
        if (a.n, a.h, a.w) != (b.n, b.h, b.w):
            raise ShapeError(f"concat of {a} and {b}: batch/spatial extents differ")
        return Shape4(a.n, a.c + b.c, a.h, a.w)
    if kind == "add":
        a, b = ins
        if a != b:
            raise ShapeError(f"add of {a} and {b}: shapes differ")
        return a
    if kind == "channel_shuffle":
        if ins[0].c % layer.groups:
            raise ShapeError(f"{ins[0].c} channels not divisible into {layer.groups} groups")
        return ins[0]
    raise GraphError(f"layer {layer.id!r}: cannot infer shape for kind {kind!r}")


def infer_shapes(g: ModelGraph, input_shape) -> dict[str, Shape4]:
    input_shape = shape4(input_shape)
    inp = g.input_layer
    if inp.out_c and input_shape.c != inp.out_c:
        raise GraphError(f"layer {inp.id!r}: expects {inp.out_c} channels, got {input_shape.c}")
    shapes: dict[str, Shape4] = {}
    for layer in g.layers:
        if layer.kind == "input":
            shapes[layer.id] = input_shape
            continue
        try:
            shapes[layer.id] = _layer_shape(layer, [shapes[s] for s in layer.inputs])
        except ShapeError as exc:
            raise GraphError(f"layer {layer.id!r} ({layer.kind}): {exc}") from None
    return shapes


def infer_channels(g: ModelGraph) -> dict[str, int]:
    """Channel counts only; independent of spatial size."""
    ch: dict[str, int] = {}
    for layer in g.layers:
        ins = [ch[s] for s in layer.inputs]
        if layer.kind == "input":
            ch[layer.id] = layer.out_c
        elif layer.kind in ("conv", "dwsep_conv"):
            if layer.kind == "conv" and ins[0] % layer.groups:
                raise GraphError(f"layer {layer.id!r}: {ins[0]} channels not divisible by {layer.groups}")
            ch[layer.id] = layer.out_c
        elif layer.kind == "concat":
            ch[layer.id] = ins[0] + ins[1]
        else:
            ch[layer.id] = ins[0]
    return ch


# ----------------------------------------------------------------- costs


def param_shapes(g: ModelGraph) -> dict[str, tuple[tuple[int, ...], bool]]:
    """Maps parameter name -> (shape, trainable) for every parameterized layer."""
    ch = infer_channels(g)
    out: dict[str, tuple[tuple[int, ...], bool]] = {}
    for layer in g.layers:
        if layer.kind not in PARAM_KINDS:
            continue
        c = ch[layer.inputs[0]]
        k = layer.kernel
        if layer.kind == "conv":
            out[f"{layer.id}.weight"] = ((layer.out_c, c // layer.groups, k, k), True)
        elif layer.kind == "dwsep_conv":
            out[f"{layer.id}.dw"] = ((c, 1, k, k), True)
            out[f"{layer.id}.pw"] = ((layer.out_c, c, 1, 1), True)
        else:
            for name, trainable in (("gamma", True), ("beta", True), ("running_mean", False), ("running_var", False)):
                out[f"{layer.id}.{name}"] = ((c,), trainable)
            continue
        if layer.bias:
            out[f"{layer.id}.bias"] = ((layer.out_c,), True)
    return out


@dataclass(frozen=True)
class LayerCost:
    params: int
    flops: int


@dataclass
class CostReport:
    per_layer: dict[str, LayerCost]
    convention: str = "mac"
    untrainable_params: int = 0

    @property
    def total_params(self) -> int:
        return sum(c.params for c in self.per_layer.values())

    @property
    def total_flops(self) -> int:
        return sum(c.flops for c in self.per_layer.values())

    @property
    def gflops(self) -> float:
        return self.total_flops / 1e9

    @property
    def mparams(self) -> float:
        return self.total_params / 1e6


def count_params(g: ModelGraph) -> CostReport:
    """Trainable parameters per layer; batchnorm running stats go to ``untrainable_params``."""
    per: dict[str, int] = {layer.id: 0 for layer in g.layers}
    untrainable = 0
    for name, (shape, trainable) in param_shapes(g).items():
        size = int(np.prod(shape))
        if trainable:
            per[name.rsplit(".", 1)[0]] += size
        else:
            untrainable += size
    return CostReport({k: LayerCost(v, 0) for k, v in per.items()}, "mac", untrainable)


def layer_flops(layer: LayerSpec, ins: list[Shape4], out: Shape4, convention: str = "mac") -> int:
    factor = CONVENTIONS[convention]
    positions = out.n * out.h * out.w
    kind = layer.kind
    k2 = layer.kernel * layer.kernel
    if kind == "conv":
        return factor * positions * out.c * (ins[0].c // layer.groups) * k2
    if kind == "dwsep_conv":
        c = ins[0].c
        return factor * positions * (c * k2 + c * out.c)
    if kind in ("batchnorm", "activation", "add"):
        return out.size
    if kind in ("maxpool", "avgpool"):
        return out.size * k2
    if kind == "globalpool":
        return ins[0].size
    if kind == "upsample":
        return out.size * UPSAMPLE_OPS_PER_OUTPUT
    return 0


def count_flops(g: ModelGraph, input_shape, convention: str = "mac") -> CostReport:
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown FLOP convention {convention!r}; expected one of {sorted(CONVENTIONS)}")
    shapes = infer_shapes(g, input_shape)
    params = count_params(g)
    per = {}
    for layer in g.layers:
        fl = layer_flops(layer, [shapes[s] for s in layer.inputs], shapes[layer.id], convention)
        per[layer.id] = LayerCost(params.per_layer[layer.id].params, fl)
    return CostReport(per, convention, params.untrainable_params)


def summarize(g: ModelGraph, input_shape, convention: str = "mac") -> str:
    shapes = infer_shapes(g, input_shape)
    report = count_flops(g, input_shape, convention)
    width = max(len(layer.id) for layer in g.layers)
    lines = [f"{'layer':<{width}}  {'kind':<15} {'output':<22} {'params':>12} {'flops':>16}"]
    for layer in g.layers:
        cost = report.per_layer[layer.id]
        lines.append(
            f"{layer.id:<{width}}  {layer.kind:<15} {str(shapes[layer.id]):<22} {cost.params:>12,} {cost.flops:>16,}"
        )
    lines.append(
        f"total: params={report.total_params:,} ({report.mparams:.3f} M)  "
        f"flops={report.total_flops:,} ({report.gflops:.3f} G, {convention})"
    )
    return "\n".join(lines)


# -------------------------------------------------------------- weights


def init_weights(g: ModelGraph, rng: np.random.Generator | int = 0, dtype=DTYPE) -> dict[str, np.ndarray]:
    """He-uniform conv kernels, zero biases, identity batchnorm."""
    rng = np.random.default_rng(rng)
    weights = {}
    for name, (shape, _) in param_shapes(g).items():
        suffix = name.rsplit(".", 1)[1]
        if suffix in ("weight", "dw", "pw"):
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            weights[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        elif suffix in ("gamma", "running_var"):
            weights[name] = np.ones(shape, dtype=dtype)
        else:
            weights[name] = np.zeros(shape, dtype=dtype)
    return weights


MAGIC = b"LSW1"


def save_weights(path, weights: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in weights.items():
            arr = np.asarray(arr, dtype="<f4")
            if arr.ndim not in (1, 4):
                raise ValueError(f"{name}: only rank 1 or 4 arrays can be stored, got rank {arr.ndim}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_weights(path, graph: Optional[ModelGraph] = None) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise WeightLoadError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    expected = param_shapes(graph) if graph is not None else None
    out = {}
    pos = 4
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if rank not in (1, 4):
                raise WeightLoadError(f"{name}: unsupported rank {rank}")
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims))
            if pos + 4 * count > len(data):
                raise WeightLoadError(f"{name}: truncated payload")
            out[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims).astype(DTYPE)
            pos += 4 * count
    except struct.error as exc:
        raise WeightLoadError(f"{path}: truncated record ({exc})") from None
    if expected is not None:
        for name, arr in out.items():
            if name not in expected:
                raise WeightLoadError(f"unknown weight {name!r} for graph {graph.name!r}")
            if arr.shape != expected[name][0]:
                raise WeightLoadError(f"weight {name!r}: shape {arr.shape} != expected {expected[name][0]}")
    return out


# ------------------------------------------------------------- execution


def _get(weights, name, layer):
    try:
        return weights[name]
    except KeyError:
        raise WeightLoadError(f"layer {layer.id!r}: missing weight {name!r}") from None


def _bn_params(weights, layer, eps=1e-5):
    return ops.BatchNormParams(
        *(_get(weights, f"{layer.id}.{s}", layer) for s in ("gamma", "beta", "running_mean", "running_var")),
        eps=eps,
    )


@dataclass
class RunState:
    values: dict[str, np.ndarray]
    ctx: dict[str, dict]
    bn_updates: dict[str, np.ndarray]


def _exec_layer(layer, ins, weights, mode, record, bn_updates):
    ctx = {} if record else None
    kind = layer.kind
    x = ins[0] if ins else None
    if kind == "conv":
        bias = _get(weights, f"{layer.id}.bias", layer) if layer.bias else None
        w = ops.ConvWeights(_get(weights, f"{layer.id}.weight", layer), bias)
        y = ops.conv2d(x, w, layer.conv_params(), ctx)
    elif kind == "dwsep_conv":
        bias = _get(weights, f"{layer.id}.bias", layer) if layer.bias else None
        dw = ops.ConvWeights(_get(weights, f"{layer.id}.dw", layer))
        pw = ops.ConvWeights(_get(weights, f"{layer.id}.pw", layer), bias)
        y = ops.depthwise_separable_conv(x, dw, pw, layer.conv_params(), ctx)
    elif kind == "batchnorm":
        bn = _bn_params(weights, layer)
        if mode == "train":
            y, rm, rv = ops.batchnorm_train(x, bn, ctx=ctx)
            bn_updates[f"{layer.id}.running_mean"] = rm
            bn_updates[f"{layer.id}.running_var"] = rv
        else:
            y = ops.batchnorm_infer(x, bn, ctx)
    elif kind == "activation":
        y = ops.activation(x, layer.act, layer.slope, ctx)
    elif kind == "maxpool":
        y = ops.maxpool2d(x, layer.kernel, layer.stride, layer.padding, ctx)
    elif kind == "avgpool":
        y = ops.avgpool2d(x, layer.kernel, layer.stride, layer.padding, ctx)
    elif kind == "globalpool":
        y = ops.global_avgpool(x, ctx)
    elif kind == "upsample":
        y = ops.bilinear_upsample(x, ins[1].shape[2], ins[1].shape[3], ctx)
    elif kind == "concat":
        y = np.concatenate(ins, axis=1)
        if ctx is not None:
            ctx["split"] = ins[0].shape[1]
    elif kind == "add":
        y = ins[0] + ins[1]
    elif kind == "channel_shuffle":
        y = ops.channel_shuffle(x, layer.groups)
    else:
        raise GraphError(f"layer {layer.id!r}: cannot execute kind {kind!r}")
    return y, ctx


def topological_check(g: ModelGraph, order: Iterable[str]) -> list[LayerSpec]:
    order = list(order)
    if sorted(order) != sorted(layer.id for layer in g.layers):
        raise GraphError("execution order must list every layer exactly once")
    done: set[str] = set()
    for lid in order:
        missing = [s for s in g[lid].inputs if s not in done]
        if missing:
            raise GraphError(f"layer {lid!r} scheduled before its input {missing[0]!r}")
        done.add(lid)
    return [g[lid] for lid in order]


def run(
    g: ModelGraph,
    x: np.ndarray,
    weights: Mapping[str, np.ndarray],
    mode: str = "eval",
    record: bool = False,
    order: Optional[Iterable[str]] = None,
    check_shapes: bool = False,
    keep: Optional[set[str]] = None,
) -> RunState:
    """Executes every layer.  ``record`` keeps backward contexts (needed by ``backward``).

    Unless ``record`` is set, intermediate values not named in ``keep`` or
    the taps are released as soon as their last consumer has run.
    """
    if mode not in ("eval", "train"):
        raise ValueError(f"mode must be 'eval' or 'train', got {mode!r}")
    layers = topological_check(g, order) if order is not None else list(g.layers)
    expected = infer_shapes(g, x.shape) if check_shapes else None
    retain = set(g.taps.values()) | (keep or set())
    remaining: dict[str, int] = {}
    if not record:
        for layer in layers:
            for s in layer.inputs:
                remaining[s] = remaining.get(s, 0) + 1
    values: dict[str, np.ndarray] = {}
    ctxs: dict[str, dict] = {}
    bn_updates: dict[str, np.ndarray] = {}
    for layer in layers:
        if layer.kind == "input":
            y = x
        else:
            try:
                y, ctx = _exec_layer(layer, [values[s] for s in layer.inputs], weights, mode, record, bn_updates)
            except ShapeError as exc:
                raise GraphError(f"layer {layer.id!r} ({layer.kind}): {exc}") from None
            check_finite(y, f"layer {layer.id!r}")
            if record:
                ctxs[layer.id] = ctx
        if expected is not None and tuple(y.shape) != tuple(expected[layer.id]):
            raise GraphError(f"layer {layer.id!r}: produced {y.shape}, shape inference said {expected[layer.id]}")
        values[layer.id] = y
        if not record:
            for s in layer.inputs:
                remaining[s] -= 1
                if remaining[s] == 0 and s not in retain:
                    del values[s]
    return RunState(values, ctxs, bn_updates)


def forward(g: ModelGraph, x: np.ndarray, weights: Mapping[str, np.ndarray], **kw) -> dict[str, np.ndarray]:
    state = run(g, x, weights, **kw)
    return {tap: state.values[lid] for tap, lid in g.taps.items()}


def backward(g: ModelGraph, state: RunState, seeds: Mapping[str, np.ndarray]) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Reverse-mode pass.  ``seeds`` maps layer ids to upstream gradients.

    Returns (parameter gradients keyed like the weights, gradient w.r.t. the input).
    Running-stat entries get no gradient.
    """
    if not state.ctx:
        raise ops.UsageError("backward needs a run recorded with record=True")
    grads: dict[str, np.ndarray] = {k: v for k, v in seeds.items()}
    pgrads: dict[str, np.ndarray] = {}

    def acc(lid, gval):
        if lid in grads:
            grads[lid] = grads[lid] + gval
        else:
            grads[lid] = gval

    input_id = g.input_layer.id
    for layer in reversed(g.layers):
        if layer.kind == "input" or layer.id not in grads:
            continue
        gy = grads.pop(layer.id)
        ctx = state.ctx.get(layer.id)
        kind = layer.kind
        lid = layer.id
        if kind == "conv":
            dx, dk, db = ops.conv2d_backward(gy, ctx)
            pgrads[f"{lid}.weight"] = dk
            if db is not None:
                pgrads[f"{lid}.bias"] = db
            acc(layer.inputs[0], dx)
        elif kind == "dwsep_conv":
            dx, ddw, dpw, _, dpb = ops.depthwise_separable_conv_backward(gy, ctx)
            pgrads[f"{lid}.dw"] = ddw
            pgrads[f"{lid}.pw"] = dpw
            if dpb is not None:
                pgrads[f"{lid}.bias"] = dpb
            acc(layer.inputs[0], dx)
        elif kind == "batchnorm":
            dx, dgam, dbet = ops.bn_backward(gy, ctx)
            pgrads[f"{lid}.gamma"] = dgam
            pgrads[f"{lid}.beta"] = dbet
            acc(layer.inputs[0], dx)
        elif kind == "activation":
            acc(layer.inputs[0], ops.relu_backward(gy, ctx))
        elif kind == "maxpool":
            acc(layer.inputs[0], ops.maxpool2d_backward(gy, ctx))
        elif kind == "avgpool":
            acc(layer.inputs[0], ops.avgpool2d_backward(gy, ctx))
        elif kind == "globalpool":
            acc(layer.inputs[0], ops.global_avgpool_backward(gy, ctx))
        elif kind == "upsample":
            acc(layer.inputs[0], ops.upsample_backward(gy, ctx))
        elif kind == "concat":
            a, b = ops.concat_backward(gy, ctx["split"])
            acc(layer.inputs[0], a)
            acc(layer.inputs[1], b)
        elif kind == "add":
            acc(layer.inputs[0], gy)
            acc(layer.inputs[1], gy)
        elif kind == "channel_shuffle":
            acc(layer.inputs[0], ops.channel_unshuffle(gy, layer.groups))
    dinput = grads.get(input_id, np.zeros_like(state.values[input_id]))
    return pgrads, dinput
