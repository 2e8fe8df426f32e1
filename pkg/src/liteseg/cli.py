"""``liteseg`` command line: summarize, flops, infer, train-toy, bench, gradcheck."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import imageio
from .config import ConfigError, LiteSegConfig, load_config
from .graph import (
    CONVENTIONS,
    WeightLoadError,
    count_flops,
    forward,
    load_weights,
    param_shapes,
    save_weights,
    summarize,
)
from .metrics import benchmark_csv, benchmark_fps, format_benchmark
from .model import build_liteseg, init_liteseg_weights, toy_config
from .ops import InvalidLabelError, UnsupportedOperationError, UsageError
from .reference import FLOPS_INPUT, REFERENCE_GFLOPS, deviation
from .tensor import NonFiniteError, ShapeError, next_multiple, reflect_pad_to_multiple
from .train import (
    PUBLISHED_INITIAL_LR,
    TOY_INITIAL_LR,
    MultiScaleSpec,
    OptimizerState,
    gradcheck_model,
    history_csv,
    synthetic_dataset,
    train_toy,
)

STRIDE = 32


class CliError(Exception):
    def __init__(self, kind: str, detail: str):
        super().__init__(detail)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def parse_hw(text: str) -> tuple[int, int]:
    try:
        h, w = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise CliError("usage", f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise CliError("usage", f"extents must be positive, got {text!r}")
    return h, w


def check_divisible(h: int, w: int, what: str = "input") -> None:
    if h % STRIDE or w % STRIDE:
        lo = f"{max(h // STRIDE, 1) * STRIDE}x{max(w // STRIDE, 1) * STRIDE}"
        hi = f"{next_multiple(h, STRIDE)}x{next_multiple(w, STRIDE)}"
        raise CliError(
            "shape", f"{what} {h}x{w} is not divisible by {STRIDE}; try {lo} or {hi}"
        )


def _config(args) -> LiteSegConfig:
    return load_config(args.config) if args.config else LiteSegConfig()


def _weights(args, g):
    if not args.weights:
        return init_liteseg_weights(g, args.seed)
    try:
        w = load_weights(args.weights, g)
    except OSError as exc:
        raise CliError("weights", f"cannot read {args.weights}: {exc.strerror or exc}") from None
    missing = sorted(set(param_shapes(g)) - set(w))
    if missing:
        raise CliError("weights", f"{args.weights}: {len(missing)} weights missing, first {missing[0]!r}")
    return w


# ------------------------------------------------------------- commands


def cmd_summarize(args, out):
    h, w = parse_hw(args.input)
    check_divisible(h, w)
    cfg = _config(args)
    g = build_liteseg(cfg)
    print(summarize(g, (1, cfg.in_channels, h, w), args.convention), file=out)


def cmd_flops(args, out):
    h, w = parse_hw(args.input)
    check_divisible(h, w)
    cfg = _config(args)
    g = build_liteseg(cfg)
    rep = count_flops(g, (1, cfg.in_channels, h, w), args.convention)
    if args.csv:
        lines = ["layer,kind,flops"]
        lines += [f"{layer.id},{layer.kind},{rep.per_layer[layer.id].flops}" for layer in g.layers]
        lines.append(f"total,,{rep.total_flops}")
        Path(args.csv).write_text("\n".join(lines) + "\n")
    else:
        for layer in g.layers:
            fl = rep.per_layer[layer.id].flops
            if fl:
                print(f"{layer.id:<40} {fl / 1e9:12.6f}", file=out)
    print(f"total GFLOPs ({args.convention}, {h}x{w}): {rep.gflops:.4f}", file=out)
    if args.compare_paper:
        ref = REFERENCE_GFLOPS[(cfg.backbone, cfg.depthwise)]
        if (1, 3, h, w) != FLOPS_INPUT:
            print(f"note: reference figures are for input {FLOPS_INPUT[2]}x{FLOPS_INPUT[3]}", file=out)
        kind = "depthwise" if cfg.depthwise else "standard"
        print(
            f"reference ({cfg.backbone}, {kind}): {ref:.2f}  "
            f"deviation: {100 * deviation(rep.gflops, ref):+.1f}%",
            file=out,
        )


def cmd_infer(args, out):
    cfg = _config(args)
    g = build_liteseg(cfg)
    if cfg.num_classes > 256:
        raise CliError("usage", "PGM output holds at most 256 classes")
    weights = _weights(args, g)
    try:
        rgb = imageio.read_ppm(args.image)
    except imageio.ImageFormatError as exc:
        raise CliError("io", str(exc)) from None
    h, w = rgb.shape[:2]
    x = imageio.image_to_tensor(rgb)
    if args.pad:
        x = reflect_pad_to_multiple(x, STRIDE)
    else:
        check_divisible(h, w, "image")
    logits = forward(g, x, weights)["logits"][:, :, :h, :w]
    labels = logits[0].argmax(axis=0).astype(np.uint8)  # ties go to the lowest index
    imageio.write_pgm(args.out, labels)
    if args.color:
        pal = (
            imageio.read_palette(args.palette, cfg.num_classes)
            if args.palette
            else imageio.default_palette(cfg.num_classes, args.seed)
        )
        imageio.write_ppm(args.color, imageio.colorize(labels, pal))
    counts = np.bincount(labels.ravel(), minlength=cfg.num_classes)
    print(f"wrote {args.out} ({w}x{h}); class histogram: {counts.tolist()}", file=out)


def cmd_train_toy(args, out):
    cfg = toy_config(_config(args), num_classes=args.classes)
    g = build_liteseg(cfg)
    weights = _weights(args, g)
    if args.lr is not None:
        lr = args.lr
    elif args.published_lr:
        lr = PUBLISHED_INITIAL_LR[cfg.backbone]
    else:
        lr = TOY_INITIAL_LR
    ds = synthetic_dataset(args.images, args.size, args.classes, seed=args.seed)
    ms = None
    if args.multiscale:
        ms = MultiScaleSpec(tuple(parse_hw(t) for t in args.multiscale.split(",")))
    state = OptimizerState(initial_lr=lr, max_epochs=args.epochs)
    history, trained = train_toy(g, weights, ds, args.epochs, state, ms, seed=args.seed)
    csv = history_csv(history)
    if args.csv:
        Path(args.csv).write_text(csv)
    else:
        out.write(csv)
    if args.save:
        save_weights(args.save, trained)
    last = history[-1]
    print(f"final epoch {last.epoch}: loss={last.loss:.6f} pixel_acc={last.pixel_acc:.4f}", file=sys.stderr)


def cmd_bench(args, out):
    cfg = _config(args)
    g = build_liteseg(cfg)
    weights = _weights(args, g)
    reports = []
    for text in args.input:
        h, w = parse_hw(text)
        if args.verbose:
            print(f"benchmarking {h}x{w}", file=sys.stderr)
        reports.append(
            benchmark_fps(g, weights, (1, cfg.in_channels, h, w), args.burn_in, args.runs,
                          seed=args.seed, label=g.name)
        )
    print(format_benchmark(reports), file=out)
    if args.csv:
        Path(args.csv).write_text(benchmark_csv(reports))


def cmd_gradcheck(args, out):
    if args.samples < 1:
        raise CliError("usage", f"--samples must be >= 1, got {args.samples}")
    cfg = toy_config(_config(args))
    g = build_liteseg(cfg)
    weights = init_liteseg_weights(g, args.seed)
    x, y = synthetic_dataset(2, args.size, cfg.num_classes, seed=args.seed)
    res = gradcheck_model(g, weights, x, y, samples=args.samples, seed=args.seed, tolerance=args.tolerance)
    for name, idx, a, n, err in res.entries:
        print(f"{name}[{idx}]  analytic={a:+.9e}  numeric={n:+.9e}  rel={err:.3e}", file=out)
    verdict = "PASS" if res.passed else "FAIL"
    print(f"{verdict}: worst relative error {res.worst:.3e} over {len(res.entries)} parameters "
          f"(tolerance {res.tolerance:g})", file=out)
    if not res.passed:
        raise CliError("gradcheck", "mismatched parameters: " + ", ".join(res.failures))


COMMANDS = {
    "summarize": cmd_summarize,
    "flops": cmd_flops,
    "infer": cmd_infer,
    "train-toy": cmd_train_toy,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="liteseg", description="Build, analyze, run and toy-train LiteSeg models.")
    p.add_argument("--config", help="key=value model config file")
    p.add_argument("--weights", help="weights file (LSW1); random init when omitted")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (forward-only commands)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("summarize", help="per-layer shapes, params and FLOPs")
    s.add_argument("--input", default="512x1024", help="HxW")
    s.add_argument("--convention", choices=sorted(CONVENTIONS), default="mac")

    s = sub.add_parser("flops", help="per-layer and total GFLOPs")
    s.add_argument("--input", default="512x1024", help="HxW")
    s.add_argument("--convention", choices=sorted(CONVENTIONS), default="mac")
    s.add_argument("--compare-paper", action="store_true", help="print published figure and deviation")
    s.add_argument("--csv", help="write per-layer CSV here")

    s = sub.add_parser("infer", help="label a PPM image")
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True, help="output PGM label map")
    s.add_argument("--color", help="optional palette-colored PPM")
    s.add_argument("--palette", help="'classid R G B' lines")
    s.add_argument("--pad", action="store_true", help="reflect-pad to a multiple of 32, crop back")

    s = sub.add_parser("train-toy", help="overfit the synthetic dataset")
    s.add_argument("--epochs", type=int, default=300)
    s.add_argument("--lr", type=float)
    s.add_argument("--published-lr", action="store_true", help="use the published fine-tuning learning rate")
    s.add_argument("--images", type=int, default=4)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--multiscale", help="comma-separated HxW scales")
    s.add_argument("--csv", help="write the loss history here instead of stdout")
    s.add_argument("--save", help="save trained weights")

    s = sub.add_parser("bench", help="burn-in + timed forward passes")
    s.add_argument("--input", nargs="+", default=["360x640", "1024x2048"], help="HxW sizes")
    s.add_argument("--burn-in", type=int, default=200)
    s.add_argument("--runs", type=int, default=200)
    s.add_argument("--csv")
    s.add_argument("--verbose", action="store_true")

    s = sub.add_parser("gradcheck", help="finite-difference check on a width-reduced model")
    s.add_argument("--samples", type=int, default=20)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--tolerance", type=float, default=1e-3)
    return p


def _threads(n: int):
    if n < 1:
        raise CliError("usage", "--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
        with _threads(args.threads):
            COMMANDS[args.command](args, out)
    except CliError as exc:
        return _fail(exc.kind, str(exc))
    except ConfigError as exc:
        return _fail("config", str(exc))
    except WeightLoadError as exc:
        return _fail("weights", exc.args[0])
    except imageio.ImageFormatError as exc:
        return _fail("io", str(exc))
    except (ShapeError, UnsupportedOperationError) as exc:
        return _fail("shape", str(exc))
    except InvalidLabelError as exc:
        return _fail("label", str(exc))
    except (UsageError, ValueError) as exc:
        return _fail("usage", str(exc))
    except NonFiniteError as exc:
        return _fail("numeric", str(exc))
    except OSError as exc:
        return _fail("io", f"{exc.filename or ''}: {exc.strerror or exc}")
    return 0


def _fail(kind: str, detail: str) -> int:
    print(f"error: {kind}: {' '.join(detail.split())}", file=sys.stderr)
    return 2 if kind == "usage" else 1


if __name__ == "__main__":
    raise SystemExit(main())
