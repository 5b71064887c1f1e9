"""Two-stage inference with confidence-gated early exit, FLOPs accounting,
the training objective and the batch benchmark driver."""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from lfvit import numkern as nk
from lfvit.attention_maps import GcaMap, Region, accumulate_gca, ngca_scan, select_region, select_region_variant
from lfvit.backbone import ClassAttentionTrace, TokenSequence, downsample_half, embed, encode, encode_tokens, logits
from lfvit.config import ModelConfig
from lfvit.errors import ConfigError, DimensionError, LfvitError
from lfvit.focus import FocusPlan, align_features, build_focus_plan, fuse_and_assemble
from lfvit.weights import WeightStore

log = logging.getLogger(__name__)

FLOPS_CONVENTION = "multiply-accumulate operations, each counted once"


# ---------------------------------------------------------------- FLOPs model

@dataclass(frozen=True)
class FlopsReport:
    localization: int
    align: int
    focus: int
    exited_early: bool

    @property
    def total(self) -> int:
        if self.exited_early:
            return self.localization
        return self.localization + self.align + self.focus

    def to_dict(self) -> dict:
        return {
            "localization": self.localization,
            "align": self.align,
            "focus": self.focus,
            "total": self.total,
            "exited_early": self.exited_early,
        }


@dataclass(frozen=True)
class StageSpec:
    """Sequence lengths (class token included) and freshly embedded patch counts."""

    loc_tokens: int
    loc_embedded: int
    focus_tokens: int
    focus_embedded: int
    align_positions: int


def block_flops(n_tokens: int, dim: int) -> int:
    """MACs of one encoder block: projections, attention products, 4x FFN."""
    return 4 * n_tokens * dim ** 2 + 2 * n_tokens ** 2 * dim + 8 * n_tokens * dim ** 2


def stage_flops(cfg: ModelConfig, n_tokens: int, n_embedded: int) -> int:
    embed_cost = n_embedded * 3 * cfg.patch ** 2 * cfg.dim
    return cfg.depth * block_flops(n_tokens, cfg.dim) + embed_cost + cfg.dim * cfg.classes


def backbone_flops(cfg: ModelConfig, side: Optional[int] = None) -> int:
    """Cost of one plain single-pass ViT over a ``side`` x ``side`` input."""
    n = ((side or cfg.image_side) // cfg.patch) ** 2
    return stage_flops(cfg, n + 1, n)


def stage_spec(cfg: ModelConfig) -> StageSpec:
    m = cfg.region
    fresh = cfg.n_fresh
    if cfg.focus_mode == "full_sequence":
        focus_tokens = cfg.n_fine + 1
    else:
        focus_tokens = 1 + (2 * m) ** 2 + (cfg.n_coarse - m * m)
    return StageSpec(cfg.n_coarse + 1, cfg.n_coarse, focus_tokens, fresh, cfg.n_fine)


def flops_model(cfg: ModelConfig, spec: Optional[StageSpec] = None, exited_early: bool = False) -> FlopsReport:
    spec = spec or stage_spec(cfg)
    return FlopsReport(
        localization=stage_flops(cfg, spec.loc_tokens, spec.loc_embedded),
        align=spec.align_positions * cfg.dim ** 2,
        focus=stage_flops(cfg, spec.focus_tokens, spec.focus_embedded),
        exited_early=exited_early,
    )


# ---------------------------------------------------------------- inference

@dataclass
class InferenceResult:
    stage: str
    probs: np.ndarray
    pred: int
    conf: float
    region: Optional[Region]
    flops: FlopsReport
    timing: dict = field(default_factory=dict)
    loc_logits: Optional[np.ndarray] = field(default=None, repr=False)
    focus_logits: Optional[np.ndarray] = field(default=None, repr=False)
    traces: list = field(default_factory=list, repr=False)
    gca: Optional[GcaMap] = field(default=None, repr=False)
    ngca: Optional[np.ndarray] = field(default=None, repr=False)
    plan: Optional[FocusPlan] = field(default=None, repr=False)

    def to_dict(self, include_timing: bool = False, emit_attention: bool = False) -> dict:
        out = {
            "stage": self.stage,
            "pred": self.pred,
            "conf": self.conf,
            "probs": [float(p) for p in self.probs],
            "region": self.region.to_dict() if self.region else None,
            "flops": self.flops.to_dict(),
        }
        if self.plan is not None:
            out["plan"] = self.plan.to_dict()
        if emit_attention:
            out["gca"] = self.gca.grid.astype(np.float64).tolist() if self.gca is not None else None
            out["ngca"] = self.ngca.tolist() if self.ngca is not None else None
            out["class_attention"] = [t.per_layer.astype(np.float64).tolist() for t in self.traces]
        if include_timing:
            out["timing"] = dict(self.timing)
        return out


def localize(image, w: WeightStore, cfg: ModelConfig, keep_attention: bool = False):
    """Localization pass only: (encoded sequence, trace, logits)."""
    seq = embed(downsample_half(image), w, cfg)
    z, trace = encode(seq, w, cfg, keep_attention)
    return z, trace, logits(z, w)


def _check_image(image, cfg: ModelConfig) -> np.ndarray:
    image = nk.as_tensor(image)
    if image.shape != (3, cfg.image_side, cfg.image_side):
        raise DimensionError(
            f"expected image of shape (3, {cfg.image_side}, {cfg.image_side}), got {image.shape}"
        )
    return image


def _decide(row_logits):
    probs = nk.softmax(row_logits)
    pred = int(np.argmax(probs))
    return probs, pred, float(probs[pred])


def _trace(rows, attn, b) -> ClassAttentionTrace:
    return ClassAttentionTrace(rows[b], None if attn is None else [a[b] for a in attn])


def infer_batch(images, w: WeightStore, cfg: Optional[ModelConfig] = None, region_variant: str = "ngca",
                variant_seed: int = 0, keep_attention: bool = False) -> list:
    """Two-stage inference on a list of images, stacking each stage into one encoder call.

    Localization runs on every image; images whose confidence does not
    exceed ``cfg.eta`` go on to the focus stage together.  Stage timings
    are the batch wall-clock divided evenly over the images in that stage.
    """
    cfg = cfg or w.config
    images = [_check_image(im, cfg) for im in images]
    if not images:
        return []
    g = cfg.coarse_side

    t0 = time.perf_counter_ns()
    loc_in = np.stack([embed(downsample_half(im), w, cfg).tokens for im in images])
    z_loc, rows_loc, attn_loc = encode_tokens(loc_in, w, cfg, keep_attention)
    loc_logits = nk.linear(z_loc[:, 0], w["head_w"], w["head_b"])
    t1 = time.perf_counter_ns()
    loc_share = (t1 - t0) // len(images)

    results = [None] * len(images)
    focus_jobs = []
    for b, image in enumerate(images):
        probs, pred, conf = _decide(loc_logits[b])
        trace = _trace(rows_loc, attn_loc, b)
        if conf > cfg.eta:
            results[b] = InferenceResult(
                "localization", probs, pred, conf, None, flops_model(cfg, exited_early=True),
                {"localization_ns": loc_share}, loc_logits=loc_logits[b], traces=[trace],
            )
            continue
        gca = accumulate_gca(trace, cfg.beta, g, g)
        ngca = ngca_scan(gca, cfg.region)
        if region_variant == "ngca":
            region = select_region(ngca, cfg.region)
        else:
            region = select_region_variant(gca, cfg.region, region_variant, variant_seed)
        aligned = align_features(TokenSequence(z_loc[b], g, g), w, cfg)
        plan = build_focus_plan(region, gca, cfg)
        seq = fuse_and_assemble(image, plan, aligned, w, cfg)
        focus_jobs.append((b, trace, gca, ngca, plan, seq))

    by_length = {}
    for job in focus_jobs:
        by_length.setdefault(job[-1].tokens.shape[0], []).append(job)
    for length, jobs in by_length.items():
        z_foc, rows_foc, attn_foc = encode_tokens(np.stack([j[-1].tokens for j in jobs]), w, cfg, keep_attention)
        foc_logits = nk.linear(z_foc[:, 0], w["head_w"], w["head_b"])
        base = stage_spec(cfg)
        for i, (b, trace, gca, ngca, plan, seq) in enumerate(jobs):
            spec = StageSpec(base.loc_tokens, base.loc_embedded, length, len(plan.fresh), cfg.n_fine)
            probs, pred, conf = _decide(foc_logits[i])
            results[b] = InferenceResult(
                "focus", probs, pred, conf, plan.region, flops_model(cfg, spec),
                {"localization_ns": loc_share}, loc_logits=loc_logits[b], focus_logits=foc_logits[i],
                traces=[trace, _trace(rows_foc, attn_foc, i)], gca=gca, ngca=ngca, plan=plan,
            )
    if focus_jobs:
        focus_share = (time.perf_counter_ns() - t1) // len(focus_jobs)
        for job in focus_jobs:
            results[job[0]].timing["focus_ns"] = focus_share
    return results


def infer(image, w: WeightStore, cfg: Optional[ModelConfig] = None, region_variant: str = "ngca",
          variant_seed: int = 0, keep_attention: bool = False) -> InferenceResult:
    return infer_batch([image], w, cfg, region_variant, variant_seed, keep_attention)[0]


# ---------------------------------------------------------------- objective

def _log_softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max()
    return shifted - np.log(np.exp(shifted).sum())


def kl_divergence(logits_p, logits_q) -> float:
    """KL(softmax(p) || softmax(q)), natural log."""
    lp, lq = _log_softmax(logits_p), _log_softmax(logits_q)
    return float(np.sum(np.exp(lp) * (lp - lq)))


def cross_entropy(logits_, label: int) -> float:
    return float(-_log_softmax(logits_)[label])


def loss(logits_loc, logits_foc, label: int) -> float:
    """Focus-stage CE against the label plus KL(localization || focus)."""
    return cross_entropy(logits_foc, label) + kl_divergence(logits_loc, logits_foc)


def loss_variant(logits_loc, logits_foc, label: int) -> float:
    """CE on both stages.

    KL of a distribution against a one-hot target differs from cross-entropy
    only by the target's entropy, which is zero, so this is CE(focus) + CE(loc).
    """
    return cross_entropy(logits_foc, label) + cross_entropy(logits_loc, label)


def loss_grad(logits_loc, logits_foc, label: int, stop_gradient: Optional[str] = None):
    """Analytic gradients of :func:`loss` w.r.t. both logit vectors.

    ``stop_gradient="loc"`` treats the localization distribution as a
    constant inside the KL term (zero gradient for it); ``"foc"`` does the
    same for the focus distribution in the KL term only.
    """
    if stop_gradient not in (None, "loc", "foc"):
        raise ConfigError(f"stop_gradient must be None, 'loc' or 'foc', got {stop_gradient!r}")
    lp, lq = _log_softmax(logits_loc), _log_softmax(logits_foc)
    p_loc, p_foc = np.exp(lp), np.exp(lq)
    onehot = np.zeros_like(p_foc)
    onehot[label] = 1.0

    grad_foc = p_foc - onehot
    if stop_gradient != "foc":
        grad_foc = grad_foc + (p_foc - p_loc)
    if stop_gradient == "loc":
        grad_loc = np.zeros_like(p_loc)
    else:
        diff = lp - lq
        grad_loc = p_loc * (diff - np.sum(p_loc * diff))
    return grad_loc, grad_foc


# ---------------------------------------------------------------- batches

@dataclass
class BatchReport:
    config: ModelConfig
    per_image: list
    mean_flops: float
    exit_fraction: float
    throughput_ips: float
    elapsed_ns: int
    accuracy: Optional[float] = None

    @property
    def results(self) -> list:
        return [r for r in self.per_image if isinstance(r, InferenceResult)]

    def to_dict(self, include_timing: bool = True) -> dict:
        per_image = [
            r.to_dict(include_timing=include_timing) if isinstance(r, InferenceResult) else r
            for r in self.per_image
        ]
        out = {
            "config": self.config.to_dict(),
            "flops_convention": FLOPS_CONVENTION,
            "per_image": per_image,
            "mean_flops": self.mean_flops,
            "exit_fraction": self.exit_fraction,
        }
        if include_timing:
            out["throughput_ips"] = self.throughput_ips
            out["elapsed_ns"] = self.elapsed_ns
        if self.accuracy is not None:
            out["accuracy"] = self.accuracy
        return out


def _safe_infer_batch(chunk, w, cfg):
    try:
        return infer_batch(chunk, w, cfg)
    except LfvitError as exc:
        return [{"error": type(exc).__name__, "message": str(exc)}] * len(chunk)


def run_batch(images, w: WeightStore, cfg: Optional[ModelConfig] = None, labels=None,
              workers: int = 1, warmup: int = 0, batch_size: int = 1) -> BatchReport:
    """Run inference over ``images`` and aggregate FLOPs, exits and throughput.

    Images are processed ``batch_size`` at a time (each chunk stacked into a
    single encoder call per stage); chunks are spread over ``workers``
    threads and results keep input order.  Images with the wrong shape are
    recorded as error dicts and the rest of the batch continues.  ``warmup``
    untimed passes over the first chunk precede the timed run.
    """
    cfg = cfg or w.config
    images = list(images)
    if not images:
        raise ConfigError("run_batch needs at least one image")
    if labels is not None and len(labels) != len(images):
        raise ConfigError(f"{len(labels)} labels for {len(images)} images")
    if batch_size < 1 or workers < 1:
        raise ConfigError(f"batch_size and workers must be >= 1, got {batch_size}, {workers}")

    per_image = [None] * len(images)
    valid = []
    for i, im in enumerate(images):
        try:
            _check_image(im, cfg)
            valid.append(i)
        except LfvitError as exc:
            per_image[i] = {"error": type(exc).__name__, "message": str(exc)}
    chunks = [valid[k:k + batch_size] for k in range(0, len(valid), batch_size)]

    for _ in range(warmup if chunks else 0):
        _safe_infer_batch([images[i] for i in chunks[0]], w, cfg)

    start = time.perf_counter_ns()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(lambda c: _safe_infer_batch([images[i] for i in c], w, cfg), chunks))
    else:
        outs = [_safe_infer_batch([images[i] for i in c], w, cfg) for c in chunks]
    elapsed = time.perf_counter_ns() - start
    for chunk, out in zip(chunks, outs):
        for i, r in zip(chunk, out):
            per_image[i] = r

    ok = [r for r in per_image if isinstance(r, InferenceResult)]
    if len(ok) < len(per_image):
        log.warning("%d of %d images failed", len(per_image) - len(ok), len(per_image))
    mean_flops = sum(r.flops.total for r in ok) / len(ok) if ok else 0.0
    exit_fraction = sum(r.stage == "localization" for r in ok) / len(ok) if ok else 0.0
    accuracy = None
    if labels is not None:
        hits = [isinstance(r, InferenceResult) and r.pred == int(y) for r, y in zip(per_image, labels)]
        accuracy = sum(hits) / len(hits)
    throughput = len(images) / (elapsed / 1e9) if elapsed > 0 else float("inf")
    return BatchReport(cfg, per_image, mean_flops, exit_fraction, throughput, elapsed, accuracy)
