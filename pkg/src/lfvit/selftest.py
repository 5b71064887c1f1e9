"""Fast invariant checks bundled with the package (``lfvit selftest``)."""

import itertools

import numpy as np

from lfvit import config as presets
from lfvit.attention_maps import GcaMap, accumulate_gca, ngca_scan, select_region
from lfvit.backbone import ClassAttentionTrace, downsample_half
from lfvit.engine import backbone_flops, infer, loss, loss_grad
from lfvit.focus import build_focus_plan, upsample_nearest
from lfvit.weights import init_weights


def check_flops():
    cfg = presets.deit_small()
    full, half = backbone_flops(cfg, 224), backbone_flops(cfg, 112)
    ok = abs(full / 4.60e9 - 1) <= 0.02 and abs(half / 1.10e9 - 1) <= 0.02
    return ok, f"224: {full / 1e9:.3f}G, 112: {half / 1e9:.3f}G"


def check_region_argmax(trials: int = 200):
    rng = np.random.default_rng(0)
    for _ in range(trials):
        side = int(rng.choice([7, 9]))
        grid = rng.integers(0, 4, size=(side, side)).astype(np.float32)
        m = int(rng.integers(1, side + 1))
        best = None
        for r, c in itertools.product(range(side - m + 1), repeat=2):
            s = float(grid[r:r + m, c:c + m].sum())
            if best is None or s > best[0]:
                best = (s, r, c)
        region = select_region(ngca_scan(GcaMap(grid), m), m)
        if (region.top_row, region.top_col) != best[1:]:
            return False, f"mismatch on {side}x{side}, m={m}"
    return True, f"{trials} grids"


def check_gca_recurrence():
    rng = np.random.default_rng(1)
    rows = rng.random((6, 50))
    rows /= rows.sum(axis=1, keepdims=True)
    beta = 0.7
    expected = sum(beta ** (5 - l) * (1 - beta) * rows[l] for l in range(2, 6)) + beta ** 4 * rows[1]
    got = accumulate_gca(ClassAttentionTrace(rows), beta).grid.ravel()
    err = float(np.abs(got - expected[1:]).max())
    return err <= 1e-6, f"max error {err:.2e}"


def check_round_trip():
    grid = np.random.default_rng(2).random((3, 7, 7)).astype(np.float32)
    up = upsample_nearest(grid.transpose(1, 2, 0)).transpose(2, 0, 1)
    ok = up.shape == (3, 14, 14) and np.array_equal(downsample_half(up), grid)
    return ok, "7x7 -> 14x14 -> 7x7"


def check_partition():
    cfg = presets.deit_small(region=5, alpha=0.88)
    plan = build_focus_plan(select_region(np.zeros((3, 3)), 5), GcaMap(np.zeros((7, 7))), cfg)
    ok = (len(plan.fresh), len(plan.reused_region), len(plan.reused_background)) == (88, 12, 96)
    ok = ok and sorted(plan.fresh + plan.reused_region + plan.reused_background) == list(range(196))
    return ok, f"{len(plan.fresh)}/{len(plan.reused_region)}/{len(plan.reused_background)}"


def check_loss_gradient(trials: int = 10, h: float = 1e-4):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(trials):
        a, b, y = rng.normal(size=10), rng.normal(size=10), int(rng.integers(10))
        ga, gb = loss_grad(a, b, y)
        for vec, grad, which in ((a, ga, 0), (b, gb, 1)):
            num = np.zeros(10)
            for i in range(10):
                e = np.zeros(10)
                e[i] = h
                args_p = (vec + e, b, y) if which == 0 else (a, vec + e, y)
                args_m = (vec - e, b, y) if which == 0 else (a, vec - e, y)
                num[i] = (loss(*args_p) - loss(*args_m)) / (2 * h)
            worst = max(worst, np.linalg.norm(num - grad) / max(np.linalg.norm(num), 1e-12))
    return worst < 1e-3, f"worst relative error {worst:.2e}"


def check_attention_rows():
    cfg = presets.tiny(eta=1.0)
    w = init_weights(cfg, 0)
    image = np.random.default_rng(4).random((3, cfg.image_side, cfg.image_side)).astype(np.float32)
    result = infer(image, w, cfg, keep_attention=True)
    worst = 0.0
    for trace in result.traces:
        worst = max(worst, float(np.abs(trace.per_layer.sum(axis=1) - 1).max()))
        for attn in trace.attention:
            worst = max(worst, float(np.abs(attn.sum(axis=-1) - 1).max()))
    return result.stage == "focus" and worst <= 1e-5, f"max row-sum deviation {worst:.2e}"


CHECKS = {
    "flops_table": check_flops,
    "region_argmax": check_region_argmax,
    "gca_recurrence": check_gca_recurrence,
    "upsample_round_trip": check_round_trip,
    "partition": check_partition,
    "loss_gradient": check_loss_gradient,
    "attention_rows": check_attention_rows,
}


def run_selftest() -> list[dict]:
    results = []
    for name, check in CHECKS.items():
        try:
            ok, detail = check()
        except Exception as exc:  # a crashing check is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append({"check": name, "passed": bool(ok), "detail": detail})
    return results
