"""Distillation feature volumes (DFVs) from front/back feature-map pairs.

Pipeline per layer module: flatten each map to ``(H*W) x D``, take a
truncated SVD (rank k for the teacher, k+1 for the student), turn the right
singular vectors into energy-scaled feature vectors (student vectors are first
matched to the teacher's by absolute cosine similarity), and correlate the
front and back vectors entry by entry through a Gaussian RBF.

Every function accepts leading batch dimensions; a single sample is simply
the no-batch case.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autograd import ops
from .autograd.tensor import DTYPE, ShapeError, Tensor, as_tensor
from .linalg import TruncatedSVD, svd_right_vectors, truncated_svd


@dataclass
class CompressedFeatureSet:
    """k scaled singular vectors ``f_i = (sigma_T,i / ||sigma_T||) * v_i`` (rows).

    ``vectors`` is a Tensor so that the student path stays differentiable.
    ``selected``/``signs`` record the alignment choice for student sets.
    """

    vectors: Tensor
    scales: np.ndarray
    source_sigma: np.ndarray
    role: str
    selected: Optional[np.ndarray] = None
    signs: Optional[np.ndarray] = None

    @property
    def k(self) -> int:
        return self.vectors.shape[-2]


@dataclass
class DFV:
    values: Tensor  # (..., k, D_F, D_B)
    beta: float

    @property
    def shape(self) -> tuple:
        return self.values.shape


@dataclass
class LayerModuleTap:
    ffm: Tensor  # (..., H_F, W_F, D_F)
    bfm: Tensor  # (..., H_B, W_B, D_B)
    group: int = 1


@dataclass
class TeacherReference:
    """Teacher SVD products for one tap, needed to align the student."""

    front_V: np.ndarray
    front_sigma: np.ndarray
    back_V: np.ndarray
    back_sigma: np.ndarray
    dfv: DFV = field(repr=False, default=None)


def importance_scales(sigma: np.ndarray) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    norm = np.linalg.norm(sigma, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("postprocess_teacher: all-zero singular values (degenerate feature map)")
    return sigma / norm


def postprocess_teacher(svd: TruncatedSVD) -> CompressedFeatureSet:
    """Scale each teacher vector by its share of the retained singular-value energy."""
    scales = importance_scales(svd.sigma)
    vectors = svd.V * scales[..., :, None]
    return CompressedFeatureSet(Tensor(vectors), scales, svd.sigma, "teacher")


def select_alignment(teacher_V: np.ndarray, student_V: np.ndarray) -> tuple:
    """Greedy matching of teacher vectors to student candidates.

    For i = 1..k in order, pick the unused candidate with the largest
    ``|cos(v_T,i, v_S,j)|`` (lowest j on ties). Returns ``(selected, signs)``
    with ``signs = sign(v_T,i . v_S,selected)``, +1 when the dot is 0.
    """
    T = np.asarray(teacher_V, dtype=np.float64)
    S = np.asarray(student_V, dtype=np.float64)
    k, kc = T.shape[-2], S.shape[-2]
    if kc < k:
        raise ShapeError("align_student", T.shape, S.shape, detail="fewer candidates than teacher vectors")
    dots = T @ np.swapaxes(S, -1, -2)  # (..., k, k+1)
    tn = np.linalg.norm(T, axis=-1)[..., :, None]
    sn = np.linalg.norm(S, axis=-1)[..., None, :]
    denom = tn * sn
    cos = np.divide(np.abs(dots), denom, out=np.zeros_like(dots), where=denom > 0)
    batch = cos.shape[:-2]
    used = np.zeros(batch + (kc,), dtype=bool)
    selected = np.zeros(batch + (k,), dtype=np.intp)
    signs = np.ones(batch + (k,), dtype=np.float64)
    for i in range(k):
        score = np.where(used, -np.inf, cos[..., i, :])
        j = score.argmax(axis=-1)
        selected[..., i] = j
        np.put_along_axis(used, j[..., None], True, axis=-1)
        d = np.take_along_axis(dots[..., i, :], j[..., None], axis=-1)[..., 0]
        signs[..., i] = np.where(d < 0, -1.0, 1.0)
    return selected, signs


def _gather_rows(V: Tensor, selected: np.ndarray) -> Tensor:
    """``V[..., selected[..., i], :]`` per leading index, as a graph op."""
    *batch, kc, d = V.shape
    k = selected.shape[-1]
    nb = int(np.prod(batch)) if batch else 1
    offsets = (np.arange(nb) * kc)[:, None]
    flat_idx = (selected.reshape(nb, k) + offsets).reshape(-1)
    rows = ops.take(ops.reshape(V, (nb * kc, d)), flat_idx, axis=0)
    return ops.reshape(rows, tuple(batch) + (k, d))


def align_student(teacher_V, student_V, teacher_sigma) -> CompressedFeatureSet:
    """Align student candidates (``k+1`` rows) to the teacher's ``k`` vectors.

    ``student_V`` may be a Tensor; the selection and sign are constants of the
    graph, gradients flow through the selected vectors' values.
    """
    student_V = as_tensor(student_V)
    teacher_V = np.asarray(teacher_V, dtype=np.float64)
    if teacher_V.shape[-1] != student_V.shape[-1]:
        raise ShapeError("align_student", teacher_V.shape, student_V.shape)
    selected, signs = select_alignment(teacher_V, student_V.data)
    scales = importance_scales(teacher_sigma)
    coef = (signs * scales)[..., None].astype(DTYPE)
    vectors = ops.mul(_gather_rows(student_V, selected), Tensor(coef))
    return CompressedFeatureSet(vectors, scales, np.asarray(teacher_sigma), "student", selected, signs)


def compute_dfv(front: CompressedFeatureSet, back: CompressedFeatureSet, beta: float) -> DFV:
    """``DFV[l, m, n] = exp(-(f_front[l, m] - f_back[l, n])^2 / beta)``."""
    if not beta > 0:
        raise ValueError(f"compute_dfv: beta must be > 0, got {beta}")
    ff, fb = front.vectors, back.vectors
    if ff.shape[:-1] != fb.shape[:-1]:
        raise ShapeError("compute_dfv", ff.shape, fb.shape, detail="front/back must share k")
    fshape, bshape = ff.shape, fb.shape
    col = ops.reshape(ff, fshape + (1,))
    row = ops.reshape(fb, bshape[:-1] + (1, bshape[-1]))
    diff = ops.sub(col, row)
    values = ops.exp(ops.scale(ops.mul(diff, diff), -1.0 / beta))
    return DFV(values, beta)


def _as_matrix_stack(fmap: Tensor) -> Tensor:
    *lead, h, w, d = fmap.shape
    return ops.reshape(fmap, tuple(lead) + (h * w, d))


def _check_rank(fmap: Tensor, rank: int, where: str, group: int) -> None:
    h, w, d = fmap.shape[-3:]
    if rank > min(h * w, d):
        raise ValueError(
            f"distill_knowledge: tap g={group} {where} of shape {h}x{w}x{d} cannot be "
            f"decomposed at rank {rank} (needs rank <= min(H*W, D) = {min(h * w, d)})"
        )


def teacher_reference(tap: LayerModuleTap, k: int, beta: float) -> TeacherReference:
    """Teacher-side knowledge for one tap; never part of a graph."""
    for fmap, where in ((tap.ffm, "FFM"), (tap.bfm, "BFM")):
        _check_rank(fmap, k, where, tap.group)
    front = truncated_svd(_flat(tap.ffm), k)
    back = truncated_svd(_flat(tap.bfm), k)
    dfv = compute_dfv(postprocess_teacher(front), postprocess_teacher(back), beta)
    dfv = DFV(Tensor(dfv.values.data), beta)
    return TeacherReference(front.V, front.sigma, back.V, back.sigma, dfv)


def _flat(fmap) -> np.ndarray:
    data = fmap.data if isinstance(fmap, Tensor) else np.asarray(fmap)
    *lead, h, w, d = data.shape
    return data.reshape(tuple(lead) + (h * w, d))


def distill_knowledge(tap: LayerModuleTap, k: int, beta: float, role: str = "teacher",
                      teacher_ref: Optional[TeacherReference] = None,
                      backward_sign: float = 1.0) -> DFV:
    """DFV for one layer-module tap.

    The teacher path decomposes at rank k; the student path at rank k+1,
    aligns to ``teacher_ref`` and stays differentiable back to the tap's
    feature maps.
    """
    if role == "teacher":
        return teacher_reference(tap, k, beta).dfv
    if role != "student":
        raise ValueError(f"distill_knowledge: role must be 'teacher' or 'student', got {role!r}")
    if teacher_ref is None:
        raise ValueError("distill_knowledge: student role needs the teacher's SVD products")
    for fmap, where in ((tap.ffm, "FFM"), (tap.bfm, "BFM")):
        _check_rank(fmap, k + 1, where, tap.group)
    sides = []
    for fmap, tV, tS in ((tap.ffm, teacher_ref.front_V, teacher_ref.front_sigma),
                         (tap.bfm, teacher_ref.back_V, teacher_ref.back_sigma)):
        V, _ = svd_right_vectors(_as_matrix_stack(as_tensor(fmap)), k + 1, backward_sign=backward_sign)
        sides.append(align_student(tV, V, tS))
    return compute_dfv(sides[0], sides[1], beta)
