"""Backbone feature extractors (classification heads removed).

Each builder appends layers to a ``GraphBuilder`` and reports the
low-level tap (stride 4; stride 8 by default for ShuffleNet) and the final
feature tap.  Output stride 16 is
obtained by turning the last downsampling step into a stride-1 step; no
dilation is added inside the backbone.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .graph import GraphBuilder, ModelGraph


class UnsupportedStrideError(ValueError):
    pass


@dataclass
class BackboneBuild:
    builder: GraphBuilder
    low_level_tap: str
    low_level_channels: int
    final_tap: str
    final_channels: int
    output_stride: int

    def graph(self, name="backbone") -> ModelGraph:
        self.builder.taps.update(low_level_feature=self.low_level_tap, backbone_out=self.final_tap)
        return self.builder.build(name)


def _check_os(os):
    if os not in (16, 32):
        raise UnsupportedStrideError(f"output stride {os} unsupported (expected 16 or 32)")


def _divisible(v: float, divisor: int = 8) -> int:
    new = max(divisor, int(v + divisor / 2) // divisor * divisor)
    if new < 0.9 * v:
        new += divisor
    return new


# (filters, kernel) per conv; "M" is a 2x2/2 max pool
DARKNET19 = [
    (32, 3), "M",
    (64, 3), "M",
    (128, 3), (64, 1), (128, 3), "M",
    (256, 3), (128, 1), (256, 3), "M",
    (512, 3), (256, 1), (512, 3), (256, 1), (512, 3), "M",
    (1024, 3), (512, 1), (1024, 3), (512, 1), (1024, 3),
]


def build_darknet19(os: int = 16, builder: Optional[GraphBuilder] = None, width: float = 1.0, prefix="darknet") -> BackboneBuild:
    _check_os(os)
    b = builder or GraphBuilder()
    x = b.input_id
    stride = 1
    n_pools = sum(1 for item in DARKNET19 if item == "M")
    pool_i = 0
    low = None
    low_c = c = 0
    for i, item in enumerate(DARKNET19):
        if item == "M":
            pool_i += 1
            if stride == 4 and low is None:
                low, low_c = x, c
            if pool_i == n_pools and os == 16:
                continue
            x = b.maxpool(f"{prefix}.pool{pool_i}", x)
            stride *= 2
            continue
        filters, k = item
        c = max(1, int(round(filters * width)))
        x = b.conv_bn_act(f"{prefix}.conv{i}", x, c, k, act="leaky")
    return BackboneBuild(b, low, low_c, x, c, stride)


# (expansion t, channels c, repeats n, first stride s)
MOBILENETV2 = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
]


def build_mobilenetv2(os: int = 32, builder: Optional[GraphBuilder] = None, width: float = 1.0, prefix="mobilenet") -> BackboneBuild:
    _check_os(os)
    b = builder or GraphBuilder()
    c = _divisible(32 * width)
    x = b.conv_bn_act(f"{prefix}.stem", b.input_id, c, 3, stride=2, act="relu6")
    stride = 2
    low = None
    low_c = 0
    last_down = max(i for i, (_, _, _, s) in enumerate(MOBILENETV2) if s == 2)
    for si, (t, ch, n, s) in enumerate(MOBILENETV2):
        out_c = _divisible(ch * width)
        if s == 2 and si == last_down and os == 16:
            s = 1
        for r in range(n):
            st = s if r == 0 else 1
            name = f"{prefix}.b{si}_{r}"
            hidden = c * t
            y = x
            if t != 1:
                y = b.conv_bn_act(f"{name}.expand", y, hidden, 1, act="relu6")
            y = b.conv_bn_act(f"{name}.dw", y, hidden, 3, stride=st, groups=hidden, act="relu6")
            y = b.conv_bn_act(f"{name}.project", y, out_c, 1, act="")
            if st == 1 and c == out_c:
                y = b.sum(f"{name}.add", x, y)
            x, c = y, out_c
            stride *= st
        if stride == 4:
            low, low_c = x, c
    last = _divisible(1280 * width)
    x = b.conv_bn_act(f"{prefix}.head", x, last, 1, act="relu6")
    return BackboneBuild(b, low, low_c, x, last, stride)


SHUFFLENET_CHANNELS = {1: (144, 288, 576), 2: (200, 400, 800), 3: (240, 480, 960), 4: (272, 544, 1088), 8: (384, 768, 1536)}
SHUFFLENET_REPEATS = (4, 8, 4)


def build_shufflenet(
    os: int = 32,
    builder: Optional[GraphBuilder] = None,
    width: float = 1.0,
    groups: int = 8,
    low_level_stride: int = 8,
    prefix="shufflenet",
) -> BackboneBuild:
    """ShuffleNet v1 feature stages (stem, max pool, three shuffle stages).

    The low-level tap is the max-pool output (stride 4) or the end of the
    first shuffle stage (stride 8).
    """
    if low_level_stride not in (4, 8):
        raise ValueError("ShuffleNet low-level tap must be at stride 4 or 8")
    _check_os(os)
    if groups not in SHUFFLENET_CHANNELS:
        raise ValueError(f"unsupported ShuffleNet groups {groups}")
    b = builder or GraphBuilder()
    stem = max(groups, int(round(24 * width / groups)) * groups)
    x = b.conv_bn_act(f"{prefix}.stem", b.input_id, stem, 3, stride=2)
    x = b.maxpool(f"{prefix}.pool", x, 3, 2, 1)
    c = stem
    low, low_c = (x, c) if low_level_stride == 4 else (None, 0)
    stride = 4
    for si, (base, reps) in enumerate(zip(SHUFFLENET_CHANNELS[groups], SHUFFLENET_REPEATS)):
        out_c = max(groups, int(round(base * width / groups)) * groups)
        for r in range(reps):
            name = f"{prefix}.s{si}_{r}"
            down = r == 0 and not (os == 16 and si == 2)
            first_groups = 1 if (si == 0 and r == 0) else groups
            mid = max(groups, (out_c // 4) // groups * groups)
            branch_c = out_c - c if r == 0 else out_c
            y = b.conv_bn_act(f"{name}.gconv1", x, mid, 1, groups=first_groups)
            y = b.shuffle(f"{name}.shuffle", y, groups)
            y = b.conv_bn_act(f"{name}.dw", y, mid, 3, stride=2 if down else 1, groups=mid, act="")
            y = b.conv_bn_act(f"{name}.gconv2", y, branch_c, 1, groups=groups, act="")
            if r == 0:
                short = b.avgpool(f"{name}.shortcut", x, 3, 2 if down else 1, 1)
                y = b.concat(f"{name}.cat", y, short)
            else:
                y = b.sum(f"{name}.add", x, y)
            x = b.act(f"{name}.relu", y)
            c = out_c
            if down:
                stride *= 2
        if low is None:
            low, low_c = x, c
    return BackboneBuild(b, low, low_c, x, c, stride)


BUILDERS = {
    "darknet19": build_darknet19,
    "mobilenetv2": build_mobilenetv2,
    "shufflenet": build_shufflenet,
}
