"""Language-guided correlation distillation losses.

Two KL terms transfer similarity structure from frozen teacher embeddings to
the student's fused features:

* ``loss_cr`` matches the inter-modal profile: teacher cosines of each
  modality embedding to the scene embedding versus student cosines of each
  (globally pooled) modality feature map to the pooled fused map.
* ``loss_se`` matches the class self-similarity matrix of mask-average-pooled
  student features against the one of the class text embeddings, row by row.

Teacher quantities always enter as constants.
"""

from __future__ import annotations

import functools
import os
from dataclasses import dataclass

import numpy as np

from . import serialization
from .errors import DataError, DomainError, FormatError, ShapeError
from .mff import MODALITIES, ModalityBundle
from .tensor import Tensor, as_tensor, cosine, kl_div, matmul, no_grad, softmax, stack

IGNORE_INDEX = 255
KL_ORDERS = ("teacher_target", "literal")
UPSAMPLE_MODES = ("bilinear", "nearest")
TEACHER_SECTIONS = ("E_R", "E_D", "E_E", "E_L", "E_S", "E_C")


def _unit_rows(a: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    return a / norms


@dataclass(frozen=True)
class TeacherEmbeddings:
    modality: dict  # name -> (d,)
    scene: np.ndarray  # (d,)
    classes: np.ndarray  # (K, d)

    @property
    def dim(self) -> int:
        return self.scene.shape[0]

    @property
    def num_classes(self) -> int:
        return self.classes.shape[0]

    def sections(self) -> dict:
        out = {f"E_{m}": self.modality[m] for m in MODALITIES}
        out["E_S"] = self.scene
        out["E_C"] = self.classes
        return out


def _random_unit(rng: np.random.Generator, *shape) -> np.ndarray:
    return _unit_rows(rng.standard_normal(shape))


def teacher_synthesize(seed: int, num_classes: int, dim: int = 64, coherence: float = 0.8,
                       scene_seed: int | None = None) -> TeacherEmbeddings:
    """Random stand-in for frozen vision-language embeddings.

    Class rows are random unit vectors. Each modality vector is
    ``coherence * E_S + (1 - coherence) * noise`` renormalised, so ``coherence``
    sets how tightly the modalities bind to the scene. ``scene_seed`` redraws
    the scene and modality vectors while keeping the class rows.
    """
    if dim < 2:
        raise DomainError(f"embedding dim must be >= 2, got {dim}")
    if not 0.0 <= coherence <= 1.0:
        raise DomainError(f"coherence must lie in [0, 1], got {coherence}")
    rng = np.random.default_rng(seed)
    classes = _random_unit(rng, num_classes, dim)
    if scene_seed is not None:
        rng = np.random.default_rng([seed, scene_seed])
    scene = _random_unit(rng, dim)
    modality = {}
    for m in MODALITIES:
        noise = _random_unit(rng, dim)
        if coherence == 1.0:
            modality[m] = scene.copy()
        else:
            modality[m] = _unit_rows(coherence * scene + (1.0 - coherence) * noise)
    return TeacherEmbeddings(modality, scene, classes)


def teacher_save(path: str | os.PathLike, te: TeacherEmbeddings) -> None:
    serialization.write_tensors(path, te.sections())


def teacher_load(path: str | os.PathLike) -> TeacherEmbeddings:
    sections = serialization.read_tensors(path)
    missing = [s for s in TEACHER_SECTIONS if s not in sections]
    if missing:
        raise FormatError(f"teacher file lacks sections {missing}")
    arrays = {}
    for name in TEACHER_SECTIONS:
        a = sections[name]
        if not np.all(np.isfinite(a)):
            raise DataError(f"section {name} has non-finite values")
        if name == "E_C":
            if a.ndim != 2:
                raise FormatError(f"E_C must be K x d, got shape {a.shape}")
        elif a.ndim != 1:
            raise FormatError(f"{name} must be a vector, got shape {a.shape}")
        if np.any(np.linalg.norm(a, axis=-1) == 0):
            raise DataError(f"section {name} has a zero row; cannot normalise")
        # rows already unit length are kept bit-exact so save/load round-trips losslessly
        norms = np.linalg.norm(a, axis=-1, keepdims=True)
        arrays[name] = np.where(np.abs(norms - 1.0) <= 1e-12, a, a / norms)
    dims = {arrays[n].shape[-1] for n in TEACHER_SECTIONS}
    if len(dims) != 1:
        raise FormatError(f"teacher sections disagree in dimension: {sorted(dims)}")
    return TeacherEmbeddings({m: arrays[f"E_{m}"] for m in MODALITIES}, arrays["E_S"], arrays["E_C"])


# -- inter-modal correlation ------------------------------------------------


def inter_modal_corr_teacher(te: TeacherEmbeddings, available=MODALITIES) -> Tensor:
    names = [m for m in MODALITIES if m in available]
    if not names:
        raise DomainError("no available modality")
    scene = as_tensor(te.scene).detach()
    return stack([cosine(as_tensor(te.modality[m]).detach(), scene) for m in names])


def global_pool(f: Tensor) -> Tensor:
    return f.mean(axis=(1, 2))


def inter_modal_corr_student(bundle: ModalityBundle, f_ma) -> Tensor:
    """Cosine of each pooled available map to the pooled fused map, canonical order."""
    f_ma = as_tensor(f_ma)
    if f_ma.shape != bundle.shape:
        raise ShapeError(f"fused map {f_ma.shape} does not match bundle maps {bundle.shape}")
    anchor = global_pool(f_ma)
    names = [m for m in MODALITIES if m in bundle.names]
    pooled = stack([bundle.maps[m] for m in names]).mean(axis=(2, 3))  # M x C
    return cosine(pooled, anchor.reshape(1, -1), axis=1)


def _distill_kl(student: Tensor, teacher: Tensor, tau: float, kl_order: str, axis: int = -1) -> Tensor:
    p_t = softmax(teacher.detach(), axis=axis, temperature=tau)
    p_s = softmax(student, axis=axis, temperature=tau)
    if kl_order == "teacher_target":
        return kl_div(p_t, p_s, axis=axis)
    if kl_order == "literal":
        return kl_div(p_s, p_t, axis=axis)
    raise DomainError(f"kl_order must be one of {KL_ORDERS}, got {kl_order!r}")


def loss_cr(m_student, m_teacher, tau: float = 1.0, kl_order: str = "teacher_target") -> Tensor:
    m_student, m_teacher = as_tensor(m_student), as_tensor(m_teacher)
    if m_student.shape != m_teacher.shape:
        raise ShapeError(f"correlation lengths differ: {m_student.shape} vs {m_teacher.shape}")
    if m_student.shape[0] < 2:
        return Tensor(0.0)
    return _distill_kl(m_student, m_teacher, tau, kl_order)


# -- intra-modal semantic distillation -------------------------------------


@dataclass(frozen=True)
class ClassReps:
    vectors: Tensor | None  # n_present x C
    classes: np.ndarray  # dataset class ids with >= 1 pixel
    num_classes: int

    @property
    def present(self) -> np.ndarray:
        mask = np.zeros(self.num_classes, dtype=bool)
        mask[self.classes] = True
        return mask

    def __len__(self) -> int:
        return len(self.classes)


def _interp_matrix(n_out: int, n_in: int, mode: str) -> np.ndarray:
    """1-D resampling matrix (n_out x n_in), half-pixel centres, edge clamped."""
    a = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        if mode == "nearest":
            a[i, min(int(np.floor((i + 0.5) * scale)), n_in - 1)] = 1.0
            continue
        src = min(max(src, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        a[i, i0] += 1.0 - frac
        a[i, i1] += frac
    return a


@functools.lru_cache(maxsize=64)
def upsample_matrix(out_hw: tuple, in_hw: tuple, mode: str = "bilinear") -> np.ndarray:
    """Dense ``(H W) x (H' W')`` operator mapping a flattened map to label resolution."""
    if mode not in UPSAMPLE_MODES:
        raise DomainError(f"upsample mode must be one of {UPSAMPLE_MODES}, got {mode!r}")
    m = np.kron(_interp_matrix(out_hw[0], in_hw[0], mode), _interp_matrix(out_hw[1], in_hw[1], mode))
    m.flags.writeable = False
    return m


def pooling_weights(y: np.ndarray, feat_hw: tuple, num_classes: int, ignore_index: int = IGNORE_INDEX,
                    mode: str = "bilinear"):
    """Constant part of mask average pooling: ``(classes, n_present x H'W' matrix)``."""
    y = np.asarray(y)
    h, w = y.shape
    if h % feat_hw[0] or w % feat_hw[1]:
        raise ShapeError(f"label extent {y.shape} is not a multiple of feature extent {feat_hw}")
    flat = y.reshape(-1)
    valid = flat != ignore_index
    if np.any(flat[valid] >= num_classes) or np.any(flat[valid] < 0):
        raise DataError(f"label outside 0..{num_classes - 1}")
    classes = np.unique(flat[valid]).astype(np.int64)
    if len(classes) == 0:
        return classes, np.zeros((0, feat_hw[0] * feat_hw[1]))
    up = upsample_matrix((h, w), tuple(feat_hw), mode)
    rows = [up[flat == k].mean(axis=0) for k in classes]
    return classes, np.stack(rows)


def map_pool(f_ma, y, num_classes: int | None = None, ignore_index: int = IGNORE_INDEX,
             mode: str = "bilinear", weights=None) -> ClassReps:
    """Upsample ``f_ma`` to the label grid and average it inside each class mask.

    ``weights`` may carry a precomputed :func:`pooling_weights` result.
    """
    f_ma = as_tensor(f_ma)
    y = np.asarray(y)
    c, hp, wp = f_ma.shape
    if num_classes is None:
        valid = y[y != ignore_index]
        num_classes = int(valid.max()) + 1 if valid.size else 0
    classes, b = weights if weights is not None else pooling_weights(y, (hp, wp), num_classes, ignore_index, mode)
    if len(classes) == 0:
        return ClassReps(None, classes, num_classes)
    flat = f_ma.reshape(c, hp * wp)
    vectors = matmul(Tensor._wrap(b), flat.T)
    return ClassReps(vectors, classes, num_classes)


def cosine_matrix(rows, eps: float = 1e-8) -> Tensor:
    """Pairwise cosines of the rows of an ``n x c`` matrix."""
    rows = as_tensor(rows)
    n, c = rows.shape
    return cosine(rows.reshape(n, 1, c), rows.reshape(1, n, c), axis=-1, eps=eps)


def loss_se(reps: ClassReps, class_embeddings, tau: float = 1.0, kl_order: str = "teacher_target") -> Tensor:
    if len(reps) < 2:
        return Tensor(0.0)
    e_c = as_tensor(class_embeddings).detach()
    if e_c.shape[0] < reps.num_classes:
        raise ShapeError(f"{e_c.shape[0]} class embeddings for {reps.num_classes} classes")
    teacher_rows = Tensor._wrap(e_c.data[reps.classes])
    with no_grad():
        s_t = cosine_matrix(teacher_rows)
    s_s = cosine_matrix(reps.vectors)
    return _distill_kl(s_s, s_t, tau, kl_order, axis=1).mean()


def loss_kd(l_cr, l_se) -> Tensor:
    return as_tensor(l_cr) + as_tensor(l_se)
