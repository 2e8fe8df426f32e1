"""LiteSeg: lightweight DASPP encoder-decoder segmentation on a numpy NCHW engine."""
from .config import LiteSegConfig, load_config, parse_config
from .graph import ModelGraph, count_flops, count_params, forward, infer_shapes, init_weights
from .model import build_liteseg

__all__ = [
    "LiteSegConfig", "ModelGraph", "build_liteseg", "count_flops", "count_params",
    "forward", "infer_shapes", "init_weights", "load_config", "parse_config",
]
