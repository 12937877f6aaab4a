"""Training objective, poly learning-rate schedule and the optimisation loop."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import lscd, mff, segnet
from .errors import ConfigError, DomainError, TrainError
from .mff import MODALITIES, ModalityBundle
from .segnet import IGNORE_INDEX, SegModel
from .synthdata import SceneSample
from .tensor import Tape, Tensor, cross_entropy, no_grad

log = logging.getLogger(__name__)

LOSS_TERMS = ("sup", "cr", "se", "base")
CURVE_HEADER = ("step", "lr", "L_sup", "L_cr", "L_se", "L_base", "L_total")


@dataclass
class TrainConfig:
    base_lr: float = 0.1
    total_steps: int = 2000
    warmup_steps: int | None = None  # None -> 5% of total_steps
    poly_power: float = 0.9
    tau: float = 1.0
    tau_w: float = 1.0
    w_sup: float = 1.0
    w_cr: float = 1.0
    w_se: float = 1.0
    w_base: float = 1.0
    enable_base_loss: bool = False
    aggregate: str = "mean"
    kl_order: str = "teacher_target"
    upsample: str = "bilinear"
    fuse_steps: int = 2
    modality_dropout_prob: float = 0.0
    optimizer: str = "gd"
    width: int = 32
    patch: int = 4
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def warmup(self) -> int:
        if self.warmup_steps is None:
            return int(round(0.05 * self.total_steps))
        return int(self.warmup_steps)

    def validate(self) -> None:
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        if self.total_steps > 0 and not 0 <= self.warmup < self.total_steps:
            raise ConfigError(f"warmup_steps ({self.warmup}) must be < total_steps ({self.total_steps})")
        if self.tau <= 0 or self.tau_w <= 0:
            raise ConfigError("temperatures must be positive")
        if self.aggregate not in mff.AGGREGATE_MODES:
            raise ConfigError(f"aggregate must be one of {mff.AGGREGATE_MODES}")
        if self.kl_order not in lscd.KL_ORDERS:
            raise ConfigError(f"kl_order must be one of {lscd.KL_ORDERS}")
        if self.upsample not in lscd.UPSAMPLE_MODES:
            raise ConfigError(f"upsample must be one of {lscd.UPSAMPLE_MODES}")
        if self.fuse_steps < 1:
            raise ConfigError("fuse_steps must be >= 1")
        if not 0.0 <= self.modality_dropout_prob <= 1.0:
            raise ConfigError("modality_dropout_prob must lie in [0, 1]")
        if self.optimizer != "gd":
            raise ConfigError(f"optimizer {self.optimizer!r} is reserved; only 'gd' is implemented")

    def with_losses(self, terms: Sequence[str]) -> "TrainConfig":
        """Copy with weight 1 for the listed terms and 0 for the others."""
        terms = set(terms)
        unknown = terms - set(LOSS_TERMS)
        if unknown:
            raise ConfigError(f"unknown loss terms {sorted(unknown)}")
        d = asdict(self)
        for t in LOSS_TERMS:
            d[f"w_{t}"] = 1.0 if t in terms else 0.0
        d["enable_base_loss"] = "base" in terms
        return TrainConfig(**d)

    @classmethod
    def field_names(cls) -> tuple:
        return tuple(f.name for f in fields(cls))


@dataclass
class LossBreakdown:
    """Weighted loss terms of one step; disabled terms are 0."""

    L_sup: float = 0.0
    L_cr: float = 0.0
    L_se: float = 0.0
    L_base: float = 0.0
    L_total: float = 0.0

    def row(self) -> tuple:
        return (self.L_sup, self.L_cr, self.L_se, self.L_base, self.L_total)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Constant ``0.1 * base_lr`` during warmup, then poly decay to zero at ``total_steps``."""
    t, w = cfg.total_steps, cfg.warmup
    if step < 0 or step > t:
        raise DomainError(f"step {step} outside 0..{t}")
    if step < w:
        return 0.1 * cfg.base_lr
    return cfg.base_lr * (1.0 - (step - w) / (t - w)) ** cfg.poly_power


# -- forward ----------------------------------------------------------------


@dataclass
class Forward:
    logits: Tensor
    f_ma: Tensor
    bundle: ModalityBundle
    traces: list
    features: dict = field(default_factory=dict)


class PreparedSample:
    """Per-sample constants reused across steps: patches, coarse labels, pooling weights."""

    def __init__(self, sample: SceneSample, num_classes: int, patch: int, upsample: str):
        self.sample = sample
        self.patches = {m: segnet.patchify(sample[m], patch) for m in MODALITIES}
        self.coarse = segnet.downsample_labels(sample.y, patch)
        h, w = sample.y.shape
        self.feat_hw = (h // patch, w // patch)
        self.pool = lscd.pooling_weights(sample.y, self.feat_hw, num_classes, IGNORE_INDEX, upsample)


def forward(model: SegModel, sample: SceneSample, available: Sequence[str] = MODALITIES,
            cfg: TrainConfig | None = None, prepared: PreparedSample | None = None) -> Forward:
    cfg = cfg or TrainConfig()
    feats = {}
    for m in MODALITIES:
        if m in available:
            patches = prepared.patches[m] if prepared is not None else None
            feats[m] = segnet.encode(sample[m], model.encoder, patches)
    bundle = ModalityBundle(feats, tuple(m for m in MODALITIES if m in available))
    f_ma, traces = mff.fuse(bundle, steps=cfg.fuse_steps, tau_w=cfg.tau_w, mode=cfg.aggregate)
    logits = segnet.seg_head(f_ma, model.head)
    return Forward(logits, f_ma, bundle, traces, feats)


def predict(model: SegModel, sample: SceneSample, available: Sequence[str] = MODALITIES,
            cfg: TrainConfig | None = None) -> np.ndarray:
    """Label map at ground-truth resolution (nearest upsampling of coarse argmax)."""
    with no_grad():
        out = forward(model, sample, available, cfg)
    return segnet.upsample_nearest(out.logits.data.argmax(axis=0), model.patch)


def compute_losses(model: SegModel, sample: SceneSample, teacher: lscd.TeacherEmbeddings,
                   cfg: TrainConfig, available: Sequence[str] = MODALITIES,
                   prepared: PreparedSample | None = None):
    """Forward pass plus every enabled weighted loss term, on the current tape.

    Returns ``(total Tensor or None, {term: Tensor})``.
    """
    if prepared is None:
        prepared = PreparedSample(sample, model.num_classes, model.patch, cfg.upsample)
    out = forward(model, sample, available, cfg, prepared)
    terms: dict[str, Tensor] = {}
    if cfg.w_sup:
        terms["sup"] = cross_entropy(out.logits, prepared.coarse, IGNORE_INDEX) * cfg.w_sup
    if cfg.w_cr:
        m_f = lscd.inter_modal_corr_student(out.bundle, out.f_ma)
        m_e = lscd.inter_modal_corr_teacher(teacher, out.bundle.names)
        terms["cr"] = lscd.loss_cr(m_f, m_e, cfg.tau, cfg.kl_order) * cfg.w_cr
    if cfg.w_se:
        reps = lscd.map_pool(out.f_ma, sample.y, model.num_classes, IGNORE_INDEX, cfg.upsample, prepared.pool)
        terms["se"] = lscd.loss_se(reps, teacher.classes, cfg.tau, cfg.kl_order) * cfg.w_se
    if cfg.enable_base_loss and cfg.w_base:
        per = [cross_entropy(segnet.seg_head(out.features[m], model.head), prepared.coarse, IGNORE_INDEX)
               for m in out.bundle.names]
        base = per[0]
        for t in per[1:]:
            base = base + t
        terms["base"] = base * (cfg.w_base / len(per))
    total = None
    for key in ("se", "cr", "sup", "base"):
        if key in terms:
            total = terms[key] if total is None else total + terms[key]
    return total, terms


def _breakdown(total, terms) -> LossBreakdown:
    vals = {k: float(v.data) for k, v in terms.items()}
    return LossBreakdown(
        L_sup=vals.get("sup", 0.0),
        L_cr=vals.get("cr", 0.0),
        L_se=vals.get("se", 0.0),
        L_base=vals.get("base", 0.0),
        L_total=float(total.data) if total is not None else 0.0,
    )


def gradients(model: SegModel, sample: SceneSample, teacher, cfg: TrainConfig,
              available: Sequence[str] = MODALITIES, prepared=None):
    """Loss breakdown and ``{param name: gradient}`` for one sample."""
    with Tape() as tape:
        total, terms = compute_losses(model, sample, teacher, cfg, available, prepared)
        breakdown = _breakdown(total, terms)
        if not np.isfinite(breakdown.L_total):
            raise TrainError(f"non-finite loss: {breakdown}")
        named = model.named_tensors()
        if total is None or not total.requires_grad:
            return breakdown, {k: np.zeros_like(v.data) for k, v in named.items()}
        tape.backward(total)
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in named.items()}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainError(f"non-finite gradient in {k}; losses {breakdown}")
    return breakdown, grads


def apply_update(model: SegModel, grads: dict, lr: float) -> SegModel:
    new = {k: v.data - lr * grads[k] for k, v in model.named_tensors().items()}
    return SegModel.from_named(new)


def train_step(model: SegModel, sample: SceneSample, teacher, cfg: TrainConfig, step: int,
               available: Sequence[str] = MODALITIES, prepared=None):
    """One plain gradient-descent step on one sample. Returns ``(model', LossBreakdown)``."""
    breakdown, grads = gradients(model, sample, teacher, cfg, available, prepared)
    if breakdown.L_total == 0.0 and not any(np.any(g) for g in grads.values()):
        return model, breakdown
    return apply_update(model, grads, lr_schedule(step, cfg)), breakdown


# -- loop -------------------------------------------------------------------


@dataclass
class TrainResult:
    model: SegModel
    initial: SegModel
    curve: list  # rows matching CURVE_HEADER


def train_loop(dataset, teacher: lscd.TeacherEmbeddings, cfg: TrainConfig,
               out_dir: str | os.PathLike | None = None, log_every: int = 0) -> TrainResult:
    """Seeded-shuffle SGD-style loop over single samples.

    Modality dropout, when enabled, independently removes each of D, E, L with
    ``modality_dropout_prob``; R is always kept.
    """
    n = len(dataset)
    if n == 0:
        raise TrainError("dataset is empty")
    num_classes = dataset.num_classes if hasattr(dataset, "num_classes") else int(
        max(int(s.y[s.y != IGNORE_INDEX].max()) for s in dataset) + 1)
    model = segnet.init_model(cfg.seed, num_classes, cfg.width, cfg.patch)
    initial = model
    order_rng = np.random.default_rng([cfg.seed, 1])
    drop_rng = np.random.default_rng([cfg.seed, 2])
    prepared: dict[int, PreparedSample] = {}
    order: list[int] = []
    curve = []
    for step in range(cfg.total_steps):
        if not order:
            order = list(order_rng.permutation(n))
        idx = int(order.pop(0))
        sample = dataset[idx]
        if idx not in prepared:
            prepared[idx] = PreparedSample(sample, num_classes, cfg.patch, cfg.upsample)
        available = list(MODALITIES)
        if cfg.modality_dropout_prob > 0:
            keep = drop_rng.random(3) >= cfg.modality_dropout_prob
            available = ["R"] + [m for m, k in zip(MODALITIES[1:], keep) if k]
        lr = lr_schedule(step, cfg)
        model, b = train_step(model, sample, teacher, cfg, step, available, prepared[idx])
        curve.append((step, lr) + b.row())
        if log_every and step % log_every == 0:
            log.info("step %d lr %.3g total %.4f (sup %.4f cr %.4f se %.4f)",
                     step, lr, b.L_total, b.L_sup, b.L_cr, b.L_se)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        segnet.save_checkpoint(out / "checkpoint.a2sg", model)
        write_curve(out / "curve.csv", curve)
    return TrainResult(model, initial, curve)


def write_curve(path: str | os.PathLike, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_HEADER)
        for r in rows:
            w.writerow([r[0]] + [repr(float(x)) for x in r[1:]])
