"""LiteSeg model configuration and its ``key=value`` text format."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

BACKBONES = ("darknet19", "mobilenetv2", "shufflenet")
# output stride each backbone is run at in the reference experiments
PUBLISHED_OUTPUT_STRIDE = {"darknet19": 16, "mobilenetv2": 32, "shufflenet": 32}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LiteSegConfig:
    backbone: str = "mobilenetv2"
    output_stride: int = 32
    num_classes: int = 19
    aspp_filters: int = 96
    aspp_rates: tuple[int, int, int] = (3, 6, 9)
    depthwise: bool = True
    decoder_filters: int = 96
    # None: backbone default (darknet19 reduces to 48, the others keep the tap as is); 0: never reduce
    lowlevel_reduce: Optional[int] = None
    # optional 1x1 projection of the DASPP input before the short residual concat; 0 = off
    shortcut_reduce: int = 0
    width: float = 1.0
    in_channels: int = 3
    coarse_pretrain_epochs: int = 0

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone: unknown value {self.backbone!r} (expected one of {', '.join(BACKBONES)})")
        if self.output_stride not in (16, 32):
            raise ConfigError(f"output_stride: must be 16 or 32, got {self.output_stride}")
        if self.num_classes < 2:
            raise ConfigError("num_classes: must be >= 2")
        if self.aspp_filters < 1 or self.decoder_filters < 1:
            raise ConfigError("aspp_filters/decoder_filters: must be >= 1")
        rates = tuple(int(r) for r in self.aspp_rates)
        object.__setattr__(self, "aspp_rates", rates)
        if len(rates) != 3 or min(rates) < 1 or any(b < a for a, b in zip(rates, rates[1:])):
            raise ConfigError(f"aspp_rates: need three positive ascending rates, got {rates}")
        if self.lowlevel_reduce is not None and self.lowlevel_reduce < 0:
            raise ConfigError("lowlevel_reduce: must be >= 0")
        if self.width <= 0:
            raise ConfigError("width: must be positive")

    def with_(self, **kw) -> "LiteSegConfig":
        return replace(self, **kw)

    def stride_warning(self) -> Optional[str]:
        want = PUBLISHED_OUTPUT_STRIDE[self.backbone]
        if self.output_stride != want:
            return f"{self.backbone} is normally run at output_stride={want}, got {self.output_stride}"
        return None


def _parse_bool(v: str) -> bool:
    lv = v.lower()
    if lv in ("true", "1", "yes"):
        return True
    if lv in ("false", "0", "no"):
        return False
    raise ValueError(f"expected true/false, got {v!r}")


_PARSERS = {
    "backbone": str,
    "output_stride": int,
    "num_classes": int,
    "aspp_filters": int,
    "aspp_rates": lambda v: tuple(int(t) for t in v.split(",")),
    "depthwise": _parse_bool,
    "decoder_filters": int,
    "lowlevel_reduce": int,
    "shortcut_reduce": int,
    "width": float,
    "in_channels": int,
    "coarse_pretrain_epochs": int,
}


def parse_config(text: str, source: str = "<config>") -> LiteSegConfig:
    values = {}
    lines = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (t.strip() for t in line.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _PARSERS[key](value)
            lines[key] = lineno
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: key {key!r}: {exc}") from None
    try:
        cfg = LiteSegConfig(**values)
    except ConfigError as exc:
        key = str(exc).split(":", 1)[0]
        where = f"{source}:{lines[key]}" if key in lines else source
        raise ConfigError(f"{where}: {exc}") from None
    return cfg


def load_config(path) -> LiteSegConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def dump_config(cfg: LiteSegConfig) -> str:
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if v is None:
            continue
        if isinstance(v, bool):
            v = str(v).lower()
        elif isinstance(v, tuple):
            v = ",".join(str(t) for t in v)
        out.append(f"{f.name}={v}")
    return "\n".join(out) + "\n"
