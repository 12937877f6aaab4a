"""Modality-agnostic feature fusion.

Each refinement step takes the previous fused map as an anchor and

1. weights every available modality per location by the softmax (over
   modalities) of its channel-wise cosine to the anchor, giving ``f_mb``;
2. picks, per location, the modality whose features are most similar to
   ``f_mb`` and gathers its channel vector, giving ``f_ms``;
3. aggregates the two into the new fused map ``f_ma``.

The anchor of the first step is the mean of the available maps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DomainError, ShapeError
from .tensor import Tensor, as_tensor, cosine, softmax, stack

MODALITIES = ("R", "D", "E", "L")
AGGREGATE_MODES = ("mean", "sum")


def canonical_rank(name: str) -> int:
    try:
        return MODALITIES.index(name)
    except ValueError:
        raise DomainError(f"unknown modality {name!r}") from None


@dataclass
class ModalityBundle:
    """Per-modality feature maps plus an availability mask.

    ``order`` is the iteration order used for weighted sums; selection ties
    are always broken by canonical rank (R, D, E, L) regardless of order.
    """

    maps: dict
    available: tuple = ()
    order: tuple = ()

    def __post_init__(self):
        self.maps = {k: as_tensor(v) for k, v in self.maps.items() if v is not None}
        if not self.order:
            self.order = tuple(sorted(self.maps, key=canonical_rank))
        for name in self.order:
            canonical_rank(name)
        if not self.available:
            self.available = tuple(self.order)
        missing = [m for m in self.available if m not in self.maps]
        if missing:
            raise DomainError(f"modalities marked available but absent: {missing}")
        if not self.names:
            raise DomainError("bundle has no available modality")
        shapes = {self.maps[m].shape for m in self.names}
        if len(shapes) != 1:
            raise ShapeError(f"available maps disagree in shape: {sorted(shapes)}")

    @classmethod
    def subset(cls, maps: Mapping, available: Sequence[str]) -> "ModalityBundle":
        return cls(dict(maps), tuple(available))

    @property
    def names(self) -> tuple:
        return tuple(m for m in self.order if m in self.available)

    @property
    def mask(self) -> tuple:
        return tuple(m in self.available for m in MODALITIES)

    @property
    def shape(self) -> tuple:
        return self.maps[self.names[0]].shape

    def stacked(self) -> Tensor:
        return stack([self.maps[m] for m in self.names], axis=0)


@dataclass
class FusionTrace:
    anchor: Tensor
    weights: Tensor  # raw cosines, M x H x W
    norm_weights: Tensor
    f_mb: Tensor
    similarity: Tensor
    index_map: np.ndarray  # canonical modality ids
    f_ms: Tensor
    f_ma: Tensor
    names: tuple = field(default=())

    def summary(self) -> dict:
        ids, counts = np.unique(self.index_map, return_counts=True)
        return {
            "modalities": list(self.names),
            "shapes": {
                "anchor": list(self.anchor.shape),
                "weights": list(self.weights.shape),
                "f_mb": list(self.f_mb.shape),
                "similarity": list(self.similarity.shape),
                "index_map": list(self.index_map.shape),
                "f_ms": list(self.f_ms.shape),
                "f_ma": list(self.f_ma.shape),
            },
            "index_histogram": {MODALITIES[int(i)]: int(c) for i, c in zip(ids, counts)},
        }


def dump_traces(traces: Sequence[FusionTrace]) -> str:
    return json.dumps({"steps": [t.summary() for t in traces]}, indent=2)


def init_anchor(bundle: ModalityBundle, feats: Tensor | None = None) -> Tensor:
    if not bundle.names:
        raise DomainError("cannot initialise an anchor from an empty bundle")
    return (bundle.stacked() if feats is None else feats).mean(axis=0)


def _check_like(bundle: ModalityBundle, other: Tensor, what: str) -> None:
    if other.shape != bundle.shape:
        raise ShapeError(f"{what} shape {other.shape} does not match maps {bundle.shape}")


def _reweight(bundle: ModalityBundle, anchor: Tensor, tau_w: float, feats: Tensor | None = None):
    _check_like(bundle, anchor, "anchor")
    if feats is None:
        feats = bundle.stacked()  # M x C x H x W
    w = cosine(feats, anchor.reshape((1,) + anchor.shape), axis=1)  # M x H x W
    w_hat = softmax(w, axis=0, temperature=tau_w)
    m, c, h, wd = feats.shape
    f_mb = (w_hat.reshape(m, 1, h, wd) * feats).sum(axis=0)
    return w, w_hat, f_mb


def reweight(bundle: ModalityBundle, anchor, tau_w: float = 1.0):
    """Return ``(normalized weights M x H x W, f_mb)``."""
    _, w_hat, f_mb = _reweight(bundle, as_tensor(anchor), tau_w)
    return w_hat, f_mb


def select(bundle: ModalityBundle, f_mb, feats: Tensor | None = None):
    """Return ``(similarity maps, index map, f_ms)``.

    The index map holds canonical modality ids. Gradients reach only the gathered
    values; the argmax itself is a constant of the tape.
    """
    f_mb = as_tensor(f_mb)
    _check_like(bundle, f_mb, "f_mb")
    names = bundle.names
    if feats is None:
        feats = bundle.stacked()
    sims = cosine(feats, f_mb.reshape((1,) + f_mb.shape), axis=1)
    winner = _argmax_canonical(sims.data, names)
    onehot = (winner[None] == np.arange(len(names))[:, None, None]).astype(np.float64)
    m, c, h, w = feats.shape
    f_ms = (Tensor._wrap(onehot.reshape(m, 1, h, w)) * feats).sum(axis=0)
    ranks = np.array([canonical_rank(n) for n in names])
    return sims, ranks[winner], f_ms


def _argmax_canonical(sims: np.ndarray, names: Sequence[str]) -> np.ndarray:
    """Per-location argmax over axis 0; exact ties resolve to the lowest canonical rank."""
    ranks = np.array([canonical_rank(n) for n in names])
    order = np.argsort(ranks, kind="stable")
    return order[np.argmax(sims[order], axis=0)]


def aggregate(f_mb, f_ms, mode: str = "mean") -> Tensor:
    f_mb, f_ms = as_tensor(f_mb), as_tensor(f_ms)
    if f_mb.shape != f_ms.shape:
        raise ShapeError(f"cannot aggregate {f_mb.shape} with {f_ms.shape}")
    if mode == "mean":
        return (f_mb + f_ms) * 0.5
    if mode == "sum":
        return f_mb + f_ms
    raise DomainError(f"aggregate mode must be one of {AGGREGATE_MODES}, got {mode!r}")


def fuse(bundle: ModalityBundle, steps: int = 2, tau_w: float = 1.0, mode: str = "mean"):
    """Run ``steps`` refinement steps; returns ``(f_ma, [FusionTrace, ...])``."""
    if steps < 1:
        raise DomainError(f"fusion needs at least one step, got {steps}")
    feats = bundle.stacked()
    anchor = init_anchor(bundle, feats)
    traces = []
    for _ in range(steps):
        w, w_hat, f_mb = _reweight(bundle, anchor, tau_w, feats)
        sims, index_map, f_ms = select(bundle, f_mb, feats)
        f_ma = aggregate(f_mb, f_ms, mode)
        traces.append(FusionTrace(anchor, w, w_hat, f_mb, sims, index_map, f_ms, f_ma, bundle.names))
        anchor = f_ma
    return anchor, traces


def selection_margin(traces: Sequence[FusionTrace]) -> float:
    """Smallest gap between the best and runner-up similarity over all steps.

    Infinite when only one modality is available.
    """
    gaps = []
    for t in traces:
        s = np.sort(t.similarity.data, axis=0)
        if s.shape[0] < 2:
            return float("inf")
        gaps.append(float((s[-1] - s[-2]).min()))
    return min(gaps)

