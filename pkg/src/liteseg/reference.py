"""Published LiteSeg cost figures used for comparison (GPU FPS is informational)."""
from __future__ import annotations

from .config import PUBLISHED_OUTPUT_STRIDE, LiteSegConfig

# GFLOPs at 1024x512 input, keyed by (backbone, depthwise)
REFERENCE_GFLOPS = {
    ("darknet19", False): 123.26,
    ("mobilenetv2", False): 18.86,
    ("shufflenet", False): 9.36,
    ("darknet19", True): 103.09,
    ("mobilenetv2", True): 4.9,
    ("shufflenet", True): 2.75,
}
REFERENCE_MPARAMS = {"darknet19": 20.55, "mobilenetv2": 4.38, "shufflenet": 3.51}
REFERENCE_FPS = {  # (360x640, 1024x2048) on a GTX 1080 Ti
    "darknet19": (98, 15),
    "mobilenetv2": (161, 22),
    "shufflenet": (133, 31),
}
FLOPS_INPUT = (1, 3, 512, 1024)
PARAMS_TOLERANCE = 0.10
FLOPS_TOLERANCE = 0.15


def reference_config(backbone: str, depthwise: bool = True) -> LiteSegConfig:
    return LiteSegConfig(
        backbone=backbone, output_stride=PUBLISHED_OUTPUT_STRIDE[backbone], depthwise=depthwise
    )


def deviation(value: float, reference: float) -> float:
    return (value - reference) / reference
