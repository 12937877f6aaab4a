"""Shared-weight patch encoder and per-location segmentation head.

One parameter set encodes every modality. A raster ``3 x H x W`` is cut into
non-overlapping ``p x p`` patches which pass through linear-ReLU-linear, giving
a feature map ``C x H/p x W/p``. The head is a single affine map per location.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import serialization
from .errors import FormatError, ShapeError
from .tensor import Tensor, matmul, relu

IGNORE_INDEX = 255


@dataclass(frozen=True)
class EncoderParams:
    W1: Tensor  # hidden x (3 p^2)
    b1: Tensor  # hidden x 1
    W2: Tensor  # C x hidden
    b2: Tensor  # C x 1
    patch: int = 4

    @property
    def width(self) -> int:
        return self.W2.shape[0]


@dataclass(frozen=True)
class HeadParams:
    W: Tensor  # K x C
    b: Tensor  # K x 1

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]


@dataclass(frozen=True)
class SegModel:
    encoder: EncoderParams
    head: HeadParams

    def named_tensors(self) -> dict[str, Tensor]:
        e, h = self.encoder, self.head
        return {
            "encoder.W1": e.W1,
            "encoder.b1": e.b1,
            "encoder.W2": e.W2,
            "encoder.b2": e.b2,
            "head.W": h.W,
            "head.b": h.b,
        }

    @classmethod
    def from_named(cls, arrays: dict, requires_grad: bool = True) -> "SegModel":
        try:
            t = {k: Tensor(arrays[k], requires_grad=requires_grad) for k in _PARAM_NAMES}
        except KeyError as exc:
            raise FormatError(f"checkpoint missing section {exc.args[0]!r}") from None
        in_dim = t["encoder.W1"].shape[1]
        patch = int(round(np.sqrt(in_dim / 3)))
        if 3 * patch * patch != in_dim:
            raise FormatError(f"encoder input width {in_dim} is not 3*p^2")
        enc = EncoderParams(t["encoder.W1"], t["encoder.b1"], t["encoder.W2"], t["encoder.b2"], patch)
        head = HeadParams(t["head.W"], t["head.b"])
        if head.W.shape[1] != enc.width:
            raise FormatError("head width does not match encoder width")
        return cls(enc, head)

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    @property
    def patch(self) -> int:
        return self.encoder.patch


_PARAM_NAMES = ("encoder.W1", "encoder.b1", "encoder.W2", "encoder.b2", "head.W", "head.b")


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


OUTPUT_BIAS_SCALE = 0.1


def init_params(seed: int, num_classes: int, width: int = 32, patch: int = 4, in_channels: int = 3):
    """Uniform Glorot weights and zero biases. Returns ``(EncoderParams, HeadParams)``.

    The encoder output bias is the exception: it is drawn from
    ``U(-0.1, 0.1)``. Flat raster patches (e.g. the edge modality away from
    edges) are exactly zero, and a zero bias would map them to zero feature
    vectors, where the cosine used by fusion has a gradient of order ``1/eps``.
    """
    rng = np.random.default_rng(seed)
    in_dim = in_channels * patch * patch

    def uniform(fan_out, fan_in):
        s = xavier_bound(fan_in, fan_out)
        return Tensor(rng.uniform(-s, s, size=(fan_out, fan_in)), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros((n, 1)), requires_grad=True)

    w1, w2 = uniform(width, in_dim), uniform(width, width)
    b2 = Tensor(rng.uniform(-OUTPUT_BIAS_SCALE, OUTPUT_BIAS_SCALE, size=(width, 1)), requires_grad=True)
    enc = EncoderParams(w1, zeros(width), w2, b2, patch)
    head = HeadParams(uniform(num_classes, width), zeros(num_classes))
    return enc, head


def init_model(seed: int, num_classes: int, width: int = 32, patch: int = 4) -> SegModel:
    return SegModel(*init_params(seed, num_classes, width, patch))


def patchify(x: np.ndarray, patch: int) -> np.ndarray:
    """``c x H x W`` raster to ``(c p p) x (H/p W/p)`` patch columns, row-major locations."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"raster must be c x H x W, got {x.shape}")
    c, h, w = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"extent {h}x{w} not divisible by patch {patch}")
    hp, wp = h // patch, w // patch
    cols = x.reshape(c, hp, patch, wp, patch).transpose(0, 2, 4, 1, 3)
    return cols.reshape(c * patch * patch, hp * wp)


def encode(x, params: EncoderParams, patches: np.ndarray | None = None) -> Tensor:
    """Feature map ``C x H/p x W/p`` for one modality raster.

    ``patches`` may carry a precomputed :func:`patchify` of ``x``.
    """
    x = np.asarray(x)
    if x.shape[0] != 3:
        raise ShapeError(f"modality rasters have 3 channels, got {x.shape[0]}")
    p = params.patch
    cols = patchify(x, p) if patches is None else patches
    hidden = relu(matmul(params.W1, Tensor._wrap(cols)) + params.b1)
    f = matmul(params.W2, hidden) + params.b2
    return f.reshape(params.width, x.shape[1] // p, x.shape[2] // p)


def seg_head(f: Tensor, params: HeadParams) -> Tensor:
    """Per-location logits ``K x H' x W'``."""
    if f.ndim != 3 or f.shape[0] != params.W.shape[1]:
        raise ShapeError(f"feature map {f.shape} does not fit head of width {params.W.shape[1]}")
    c, h, w = f.shape
    logits = matmul(params.W, f.reshape(c, h * w)) + params.b
    return logits.reshape(params.num_classes, h, w)


def downsample_labels(y: np.ndarray, patch: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Majority vote per ``p x p`` block over non-ignored pixels; ties go to the lower id."""
    y = np.asarray(y)
    h, w = y.shape
    if h % patch or w % patch:
        raise ShapeError(f"label extent {h}x{w} not divisible by patch {patch}")
    blocks = y.reshape(h // patch, patch, w // patch, patch).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(h // patch, w // patch, patch * patch)
    valid = blocks != ignore_index
    top = int(y[y != ignore_index].max()) + 1 if np.any(y != ignore_index) else 1
    counts = np.stack([((blocks == k) & valid).sum(axis=-1) for k in range(top)], axis=-1)
    out = counts.argmax(axis=-1)
    out[~valid.any(axis=-1)] = ignore_index
    return out.astype(np.int64)


def upsample_nearest(pred: np.ndarray, patch: int) -> np.ndarray:
    return np.repeat(np.repeat(np.asarray(pred), patch, axis=0), patch, axis=1)


def save_checkpoint(path: str | os.PathLike, model: SegModel) -> None:
    serialization.write_tensors(path, {k: v.data for k, v in model.named_tensors().items()})


def load_checkpoint(path: str | os.PathLike, requires_grad: bool = True) -> SegModel:
    return SegModel.from_named(serialization.read_tensors(path), requires_grad=requires_grad)
