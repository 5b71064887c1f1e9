"""Command-line driver: ``lfvit {gen-weights,infer,flops,bench,heatmap,selftest}``.

Reports go to stdout (or ``--out``) as JSON.  Failures print a JSON object
to stderr and exit with 1 for validation errors, 2 for runtime errors.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from lfvit import attention_maps as amaps
from lfvit.config import FOCUS_MODES, PRESETS, ModelConfig
from lfvit.engine import FLOPS_CONVENTION, backbone_flops, flops_model, infer, localize, run_batch
from lfvit.errors import ConfigError, LfvitError
from lfvit.imageio import encode_ppm, load_image, to_pixels
from lfvit.weights import gen_weights, load_weights

EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _policy_args(p):
    p.add_argument("--eta", type=float)
    p.add_argument("--region-size", type=int, dest="region")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--focus-mode", choices=FOCUS_MODES)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lfvit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-weights", help="write a deterministic random LFW1 weight file")
    p.add_argument("--preset", choices=sorted(PRESETS), default="deit-s")
    p.add_argument("--classes", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _policy_args(p)

    p = sub.add_parser("infer", help="classify PPM images")
    p.add_argument("images", nargs="+")
    p.add_argument("--model", required=True)
    p.add_argument("--out")
    p.add_argument("--emit-attention", action="store_true")
    p.add_argument("--variant", choices=amaps.VARIANTS, default="ngca")
    p.add_argument("--seed", type=int, default=0, help="seed for the random region variant")
    _policy_args(p)

    p = sub.add_parser("flops", help="analytical FLOPs for a config")
    p.add_argument("--model")
    p.add_argument("--preset", choices=sorted(PRESETS), default="deit-s")
    p.add_argument("--out")
    _policy_args(p)

    p = sub.add_parser("bench", help="throughput over a batch of images")
    p.add_argument("images", nargs="*")
    p.add_argument("--model", required=True)
    p.add_argument("--random", type=int, default=64, help="random images when none are given")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--labels", help="comma-separated class labels, one per image")
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--workers", type=int)
    p.add_argument("--batch-size", type=int, default=1, help="images stacked per encoder call")
    p.add_argument("--out")
    _policy_args(p)

    p = sub.add_parser("heatmap", help="export GCA / NGCA maps and the selected region")
    p.add_argument("image")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--variant", choices=amaps.VARIANTS, default="ngca")
    p.add_argument("--seed", type=int, default=0)
    _policy_args(p)

    p = sub.add_parser("selftest", help="run the bundled invariant checks")
    p.add_argument("--out")
    return parser


def _overrides(args) -> dict:
    return {k: getattr(args, k, None) for k in ("eta", "region", "alpha", "beta", "focus_mode")}


def _load(args):
    w = load_weights(args.model)
    cfg = w.config.with_overrides(**_overrides(args))
    return w, cfg


def _emit(payload, out=None) -> None:
    text = json.dumps(payload, indent=2) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _workers(args) -> int:
    if args.workers is not None:
        n = args.workers
    else:
        raw = os.environ.get("LFVIT_WORKERS", "1")
        try:
            n = int(raw)
        except ValueError:
            raise UsageError(f"LFVIT_WORKERS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"worker count must be >= 1, got {n}")
    return n


def cmd_gen_weights(args) -> int:
    cfg = PRESETS[args.preset](classes=args.classes, **_overrides(args))
    gen_weights(cfg, args.seed, args.out)
    _emit({"written": args.out, "seed": args.seed, "config": cfg.to_dict()})
    return 0


def cmd_infer(args) -> int:
    w, cfg = _load(args)
    results = []
    for path in args.images:
        image = load_image(path, cfg.image_side)
        r = infer(image, w, cfg, region_variant=args.variant, variant_seed=args.seed)
        results.append({"image": path, **r.to_dict(emit_attention=args.emit_attention)})
    _emit({"config": cfg.to_dict(), "flops_convention": FLOPS_CONVENTION, "results": results}, args.out)
    return 0


def cmd_flops(args) -> int:
    if args.model:
        _, cfg = _load(args)
    else:
        cfg = PRESETS[args.preset](**_overrides(args))
    full = backbone_flops(cfg, cfg.image_side)
    half = backbone_flops(cfg, cfg.image_side // 2)
    report = {
        "config": cfg.to_dict(),
        "flops_convention": FLOPS_CONVENTION,
        "backbone_full_resolution": full,
        "backbone_half_resolution": half,
        "half_to_full_ratio": half / full,
        "early_exit": flops_model(cfg, exited_early=True).to_dict(),
        "two_stage": flops_model(cfg).to_dict(),
    }
    _emit(report, args.out)
    return 0


def cmd_bench(args) -> int:
    w, cfg = _load(args)
    if args.images:
        images = [load_image(p, cfg.image_side) for p in args.images]
    else:
        if args.random < 1:
            raise UsageError("--random must be >= 1")
        rng = np.random.default_rng(args.seed)
        images = list(rng.random((args.random, 3, cfg.image_side, cfg.image_side), dtype=np.float32))
    labels = None
    if args.labels:
        labels = [int(x) for x in args.labels.split(",")]
    report = run_batch(images, w, cfg, labels=labels, workers=_workers(args), warmup=args.warmup,
                       batch_size=args.batch_size)
    _emit(report.to_dict(), args.out)
    return 0


def _overlay(image, region, cfg) -> bytes:
    pixels = to_pixels(image).copy()
    cell = 2 * cfg.patch
    top, left = region.top_row * cell, region.top_col * cell
    bottom, right = top + region.size * cell - 1, left + region.size * cell - 1
    red = np.array([255, 0, 0], dtype=np.uint8)
    pixels[top, left:right + 1] = red
    pixels[bottom, left:right + 1] = red
    pixels[top:bottom + 1, left] = red
    pixels[top:bottom + 1, right] = red
    return encode_ppm(pixels)


def cmd_heatmap(args) -> int:
    w, cfg = _load(args)
    image = load_image(args.image, cfg.image_side)
    _, trace, _ = localize(image, w, cfg)
    gca = amaps.accumulate_gca(trace, cfg.beta, cfg.coarse_side, cfg.coarse_side)
    ngca = amaps.ngca_scan(gca, cfg.region)
    region = amaps.select_region_variant(gca, cfg.region, args.variant, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "gca.pgm": amaps.to_pgm(gca.grid),
        "gca.json": amaps.to_json(gca.grid).encode(),
        "ngca.pgm": amaps.to_pgm(ngca),
        "ngca.json": amaps.to_json(ngca).encode(),
        "overlay.ppm": _overlay(image, region, cfg),
    }
    for name, data in files.items():
        (out / name).write_bytes(data)
    _emit({
        "image": args.image,
        "gca_shape": list(gca.grid.shape),
        "ngca_shape": list(ngca.shape),
        "region": region.to_dict(),
        "files": sorted(str(out / name) for name in files),
    })
    return 0


def cmd_selftest(args) -> int:
    from lfvit.selftest import run_selftest

    checks = run_selftest()
    passed = all(c["passed"] for c in checks)
    _emit({"passed": passed, "checks": checks}, args.out)
    return 0 if passed else EXIT_RUNTIME


COMMANDS = {
    "gen-weights": cmd_gen_weights,
    "infer": cmd_infer,
    "flops": cmd_flops,
    "bench": cmd_bench,
    "heatmap": cmd_heatmap,
    "selftest": cmd_selftest,
}


def _fail(kind: str, exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except LfvitError as exc:
        return _fail("validation", exc, EXIT_VALIDATION)
    except Exception as exc:
        return _fail("runtime", exc, EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
