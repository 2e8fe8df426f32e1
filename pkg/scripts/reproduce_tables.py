"""Prints computed parameter and FLOP counts beside the published figures.

The last params column adds the ImageNet classifier each backbone normally
carries (1000 classes).  LiteSeg does not build it; the column only shows
how the published counts relate to the headless models.
"""
import argparse

from liteseg import build_liteseg, count_flops, count_params
from liteseg.reference import (
    FLOPS_INPUT,
    FLOPS_TOLERANCE,
    PARAMS_TOLERANCE,
    REFERENCE_GFLOPS,
    REFERENCE_MPARAMS,
    deviation,
    reference_config,
)

# final feature channels -> 1000-way classifier (weights + bias)
IMAGENET_HEAD_PARAMS = {"darknet19": 1024 * 1000 + 1000, "mobilenetv2": 1280 * 1000 + 1000, "shufflenet": 1536 * 1000 + 1000}


def flops_table():
    print(f"GFLOPs at {FLOPS_INPUT[3]}x{FLOPS_INPUT[2]}")
    print(f"{'backbone':<12} {'conv':<10} {'ref':>8} {'mac':>9} {'dev':>8} {'mac2':>9} {'dev':>8}  within")
    for (bb, dw), ref in sorted(REFERENCE_GFLOPS.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        g = build_liteseg(reference_config(bb, dw))
        mac = count_flops(g, FLOPS_INPUT, "mac").gflops
        mac2 = count_flops(g, FLOPS_INPUT, "mac2").gflops
        d1, d2 = deviation(mac, ref), deviation(mac2, ref)
        ok = "yes" if min(abs(d1), abs(d2)) <= FLOPS_TOLERANCE else "NO"
        kind = "depthwise" if dw else "standard"
        print(f"{bb:<12} {kind:<10} {ref:>8.2f} {mac:>9.2f} {100 * d1:>+7.1f}% {mac2:>9.2f} {100 * d2:>+7.1f}%  {ok}")


def params_table():
    print("\nParams (millions), depthwise models")
    print(f"{'backbone':<12} {'ref':>7} {'built':>8} {'dev':>8}  within  {'+head':>7} {'dev':>8}")
    for bb, ref in REFERENCE_MPARAMS.items():
        m = count_params(build_liteseg(reference_config(bb))).mparams
        mh = m + IMAGENET_HEAD_PARAMS[bb] / 1e6
        ok = "yes" if abs(deviation(m, ref)) <= PARAMS_TOLERANCE else "NO"
        print(f"{bb:<12} {ref:>7.2f} {m:>8.3f} {100 * deviation(m, ref):>+7.1f}%  {ok:<6}  {mh:>7.3f} {100 * deviation(mh, ref):>+7.1f}%")


if __name__ == "__main__":
    argparse.ArgumentParser(description=__doc__).parse_args()
    flops_table()
    params_table()
