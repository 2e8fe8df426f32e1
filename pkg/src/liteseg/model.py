"""LiteSeg assembly: backbone -> DASPP encoder head -> decoder."""
from __future__ import annotations

import warnings

from .backbones import BUILDERS, BackboneBuild
from .config import LiteSegConfig
from .graph import GraphBuilder, ModelGraph

LOWLEVEL_AUTO_CHANNELS = 48
# backbones whose low-level tap is consumed unreduced unless the config says otherwise
NO_AUTO_REDUCE = {"mobilenetv2", "shufflenet"}


def build_daspp(b: GraphBuilder, x: str, in_c: int, cfg: LiteSegConfig, prefix: str = "daspp") -> str:
    """Deeper ASPP.

    Branches: a 1x1 conv, and for each rate an atrous 3x3 conv followed by a
    plain 3x3 refinement conv.  The branch outputs are concatenated with the
    module input (short residual) and fused back to ``aspp_filters`` by 1x1.
    """
    f = cfg.aspp_filters
    sep = cfg.depthwise
    branches = [b.conv_bn_act(f"{prefix}.b0", x, f, 1)]
    for i, rate in enumerate(cfg.aspp_rates, 1):
        y = b.conv_bn_act(f"{prefix}.b{i}.atrous", x, f, 3, dilation=rate, separable=sep)
        y = b.conv_bn_act(f"{prefix}.b{i}.refine", y, f, 3, separable=sep)
        branches.append(y)
    shortcut = x
    if cfg.shortcut_reduce:
        shortcut = b.conv_bn_act(f"{prefix}.shortcut", x, cfg.shortcut_reduce, 1)
    cat = branches[0]
    for i, y in enumerate(branches[1:] + [shortcut], 1):
        cat = b.concat(f"{prefix}.cat{i}", cat, y)
    return b.conv_bn_act(f"{prefix}.fuse", cat, f, 1)


def lowlevel_reduction(cfg: LiteSegConfig, lowlevel_c: int) -> int:
    """Channel count of the 1x1 reduction applied to the low-level tap (0 = none)."""
    if cfg.lowlevel_reduce is None:
        if cfg.backbone in NO_AUTO_REDUCE:
            return 0
        return LOWLEVEL_AUTO_CHANNELS if lowlevel_c > LOWLEVEL_AUTO_CHANNELS else 0
    return cfg.lowlevel_reduce


def build_decoder(b: GraphBuilder, encoder: str, lowlevel: str, lowlevel_c: int, cfg: LiteSegConfig, prefix: str = "decoder") -> str:
    up = b.upsample_like(f"{prefix}.up", encoder, lowlevel)
    reduce_c = lowlevel_reduction(cfg, lowlevel_c)
    if reduce_c:
        lowlevel = b.conv_bn_act(f"{prefix}.reduce", lowlevel, reduce_c, 1)
    y = b.concat(f"{prefix}.cat", up, lowlevel)
    for i in range(3):
        y = b.conv_bn_act(f"{prefix}.conv{i}", y, cfg.decoder_filters, 3, separable=cfg.depthwise)
    y = b.conv(f"{prefix}.classifier", y, cfg.num_classes, 1, bias=True)
    return b.upsample_like(f"{prefix}.logits", y, b.input_id)


def build_backbone(cfg: LiteSegConfig, b: GraphBuilder) -> BackboneBuild:
    return BUILDERS[cfg.backbone](cfg.output_stride, builder=b, width=cfg.width)


def build_liteseg(cfg: LiteSegConfig) -> ModelGraph:
    msg = cfg.stride_warning()
    if msg:
        warnings.warn(msg, stacklevel=2)
    b = GraphBuilder(cfg.in_channels)
    bb = build_backbone(cfg, b)
    enc = build_daspp(b, bb.final_tap, bb.final_channels, cfg)
    logits = build_decoder(b, enc, bb.low_level_tap, bb.low_level_channels, cfg)
    b.taps.update(
        low_level_feature=bb.low_level_tap,
        backbone_out=bb.final_tap,
        encoder_out=enc,
        logits=logits,
    )
    return b.build(f"liteseg-{cfg.backbone}")


CLASSIFIER_INIT_SCALE = 1e-2


def init_liteseg_weights(g: ModelGraph, rng=0, dtype=None) -> dict:
    """He-uniform init with a near-zero classifier, so initial logits are ~0."""
    from .graph import init_weights

    kw = {} if dtype is None else {"dtype": dtype}
    weights = init_weights(g, rng, **kw)
    name = "decoder.classifier.weight"
    if name in weights:
        weights[name] = weights[name] * weights[name].dtype.type(CLASSIFIER_INIT_SCALE)
    return weights


def toy_config(base: LiteSegConfig | None = None, num_classes: int = 3) -> LiteSegConfig:
    """Width-reduced variant used for desk-scale training and gradient checks."""
    base = base or LiteSegConfig()
    return base.with_(width=0.25, aspp_filters=16, decoder_filters=16, num_classes=num_classes)
