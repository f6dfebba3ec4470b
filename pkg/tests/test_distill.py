import math

import numpy as np
import pytest

from svdkd.autograd import ShapeError, Tensor, check_gradients
from svdkd.distill import (CompressedFeatureSet, LayerModuleTap, align_student, compute_dfv, distill_knowledge,
                           postprocess_teacher, select_alignment, teacher_reference)
from svdkd.linalg import truncated_svd


def _set(vectors, role="teacher"):
    v = np.asarray(vectors, dtype=np.float64)
    return CompressedFeatureSet(Tensor(v), np.ones(v.shape[0]), np.ones(v.shape[0]), role)


def _greedy_reference(T, S):
    """Per teacher vector in order, the unused candidate with the largest |cos|, by explicit loops."""
    used, picks = set(), []
    for t in T:
        best, best_j = -1.0, None
        for j, s in enumerate(S):
            if j in used:
                continue
            c = abs(t @ s) / (np.linalg.norm(t) * np.linalg.norm(s))
            if c > best:
                best, best_j = c, j
        used.add(best_j)
        picks.append(S[best_j] * (1.0 if t @ S[best_j] >= 0 else -1.0))
    return np.array(picks)


# ---------------------------------------------------------------- teacher post-processing

def test_teacher_scales_three_four_five():
    s = truncated_svd(np.diag([3.0, 4.0]), 2)
    f = postprocess_teacher(s)
    # singular values come out as (4, 3): the larger one is v = e2
    np.testing.assert_allclose(f.scales, [0.8, 0.6])
    np.testing.assert_allclose(np.abs(f.vectors.data), [[0, 0.8], [0.6, 0]], atol=1e-12)


def test_teacher_single_vector_has_unit_scale():
    s = truncated_svd(np.random.default_rng(0).standard_normal((6, 4)), 1)
    f = postprocess_teacher(s)
    assert f.scales[0] == 1.0
    np.testing.assert_array_equal(f.vectors.data, s.V.astype(np.float32))


def test_teacher_energy_sums_to_one():
    s = truncated_svd(np.random.default_rng(1).standard_normal((10, 7)), 4)
    f = postprocess_teacher(s)
    norms = np.linalg.norm(f.vectors.data.astype(np.float64), axis=1)
    assert np.sum(norms ** 2) == pytest.approx(1.0, abs=1e-6)
    assert np.all(norms <= 1 + 1e-6) and np.all(np.diff(f.scales) <= 0)


def test_teacher_all_zero_sigma_rejected():
    with pytest.raises(ValueError, match="all-zero"):
        postprocess_teacher(truncated_svd(np.zeros((4, 3)), 2))


# ---------------------------------------------------------------- alignment

def test_alignment_orthogonal_example():
    e = np.eye(3)
    out = align_student(e[:2], np.array([e[1], -e[0], e[2]]), np.array([1.0, 1.0]))
    scale = 1 / math.sqrt(2)
    np.testing.assert_allclose(out.vectors.data, np.array([e[0], e[1]]) * scale, atol=1e-7)
    assert out.selected.tolist() == [1, 0] and out.signs.tolist() == [-1.0, 1.0]


def test_alignment_identity_case_any_order():
    rng = np.random.default_rng(2)
    T = np.linalg.qr(rng.standard_normal((6, 3)))[0].T
    S = np.vstack([T[2], T[0], np.linalg.qr(rng.standard_normal((6, 6)))[0][0], T[1]])
    sel, signs = select_alignment(T, S)
    np.testing.assert_allclose(S[sel] * signs[:, None], T, atol=1e-12)


@pytest.mark.parametrize("seed", range(50))
def test_alignment_matches_explicit_greedy_search(seed):
    rng = np.random.default_rng(seed)
    k, d = int(rng.integers(1, 5)), int(rng.integers(6, 12))
    T = np.linalg.qr(rng.standard_normal((d, k)))[0].T
    S = np.linalg.qr(rng.standard_normal((d, k + 1)))[0].T
    sel, signs = select_alignment(T, S)
    np.testing.assert_allclose(S[sel] * signs[:, None], _greedy_reference(T, S), atol=1e-12)


def test_alignment_permutation_and_sign_invariance():
    rng = np.random.default_rng(3)
    for _ in range(200):
        T, S = rng.standard_normal((3, 8)), rng.standard_normal((4, 8))
        sel, sg = select_alignment(T, S)
        ref = S[sel] * sg[:, None]
        P = S[rng.permutation(4)] * rng.choice([-1.0, 1.0], size=(4, 1))
        sel2, sg2 = select_alignment(T, P)
        np.testing.assert_allclose(P[sel2] * sg2[:, None], ref, atol=1e-12)


def test_zero_candidate_has_zero_similarity():
    T = np.array([[1.0, 0.0, 0.0]])
    S = np.array([[0.0, 0.0, 0.0], [0.1, 0.5, 0.0]])
    sel, _ = select_alignment(T, S)
    assert sel.tolist() == [1]


def test_alignment_without_replacement():
    T = np.array([[1.0, 0.0], [1.0, 0.1]])
    S = np.array([[1.0, 0.0], [0.0, 1.0], [0.7, 0.7]])
    sel, _ = select_alignment(T, S)
    assert len(set(sel.tolist())) == 2


def test_alignment_rejects_too_few_candidates():
    with pytest.raises(ShapeError):
        select_alignment(np.eye(3), np.eye(3)[:2])


# ---------------------------------------------------------------- DFV

def test_dfv_identical_scalars_give_one():
    d = compute_dfv(_set([[0.3]]), _set([[0.3]]), beta=8.0)
    assert d.values.data.item() == 1.0


def test_dfv_difference_equal_to_beta_gives_exp_minus_one():
    d = compute_dfv(_set([[0.0]]), _set([[math.sqrt(8.0)]]), beta=8.0)
    assert d.values.data.item() == pytest.approx(math.exp(-1), rel=1e-6)


def test_dfv_hand_table():
    f, b, beta = [0.5, -0.25], [0.0, 1.0, 0.5], 2.0
    d = compute_dfv(_set([f]), _set([b]), beta)
    hand = [[math.exp(-(fm - bn) ** 2 / beta) for bn in b] for fm in f]
    assert d.shape == (1, 2, 3)
    np.testing.assert_allclose(d.values.data[0], hand, rtol=1e-6)


@pytest.mark.parametrize("beta", [0.0, -1.0])
def test_dfv_rejects_non_positive_beta(beta):
    with pytest.raises(ValueError, match="beta"):
        compute_dfv(_set([[0.0]]), _set([[0.0]]), beta)


def test_dfv_entries_in_unit_interval_and_monotone():
    rng = np.random.default_rng(4)
    f, b = rng.standard_normal((2, 5)), rng.standard_normal((2, 4))
    v = compute_dfv(_set(f), _set(b), 8.0).values.data.astype(np.float64)
    assert np.all(v > 0) and np.all(v <= 1)
    d2 = (f[:, :, None] - b[:, None, :]) ** 2
    order = np.argsort(d2.ravel())
    assert np.all(np.diff(v.ravel()[order]) <= 1e-7)


# ---------------------------------------------------------------- end to end per tap

def test_same_ffm_and_bfm_give_unit_diagonal():
    fmap = Tensor(np.random.default_rng(5).standard_normal((4, 4, 3)))
    d = distill_knowledge(LayerModuleTap(fmap, fmap, 1), k=2, beta=8.0)
    for l in range(2):
        np.testing.assert_array_equal(np.diag(d.values.data[l]), 1.0)


def test_student_copy_matches_teacher():
    rng = np.random.default_rng(6)
    tap = LayerModuleTap(Tensor(rng.standard_normal((5, 5, 4))), Tensor(rng.standard_normal((3, 3, 6))), 1)
    ref = teacher_reference(tap, 2, 8.0)
    s = distill_knowledge(tap, 2, 8.0, "student", ref)
    np.testing.assert_allclose(s.values.data, ref.dfv.values.data, atol=1e-6)


def test_shape_law_with_spatial_mismatch():
    rng = np.random.default_rng(7)
    tap = LayerModuleTap(Tensor(rng.standard_normal((4, 4, 3))), Tensor(rng.standard_normal((2, 2, 5))), 1)
    ref = teacher_reference(tap, 1, 8.0)
    stud = LayerModuleTap(Tensor(rng.standard_normal((6, 6, 3))), Tensor(rng.standard_normal((3, 3, 5))), 1)
    assert ref.dfv.shape == (1, 3, 5)
    assert distill_knowledge(stud, 1, 8.0, "student", ref).shape == (1, 3, 5)


def test_batched_taps_give_per_sample_dfvs():
    rng = np.random.default_rng(8)
    ffm, bfm = rng.standard_normal((3, 4, 4, 3)), rng.standard_normal((3, 2, 2, 5))
    batched = teacher_reference(LayerModuleTap(Tensor(ffm), Tensor(bfm)), 1, 8.0).dfv.values.data
    for i in range(3):
        one = teacher_reference(LayerModuleTap(Tensor(ffm[i]), Tensor(bfm[i])), 1, 8.0).dfv.values.data
        np.testing.assert_allclose(batched[i], one, atol=1e-6)


def test_student_needs_teacher_reference():
    fmap = Tensor(np.ones((3, 3, 3)))
    with pytest.raises(ValueError, match="teacher"):
        distill_knowledge(LayerModuleTap(fmap, fmap), 1, 8.0, "student")


def test_student_rank_error_names_tap_shape():
    rng = np.random.default_rng(9)
    tap = LayerModuleTap(Tensor(rng.standard_normal((2, 2, 3))), Tensor(rng.standard_normal((2, 2, 3))), 4)
    ref = teacher_reference(tap, 3, 8.0)
    with pytest.raises(ValueError, match=r"g=4 FFM of shape 2x2x3"):
        distill_knowledge(tap, 3, 8.0, "student", ref)


def test_student_path_matches_finite_differences():
    rng = np.random.default_rng(10)
    teacher_tap = LayerModuleTap(Tensor(rng.standard_normal((3, 3, 4))), Tensor(rng.standard_normal((2, 3, 5))))
    ref = teacher_reference(teacher_tap, 1, 2.0)
    ffm = Tensor(rng.standard_normal((3, 3, 4)), requires_grad=True)
    bfm = Tensor(rng.standard_normal((2, 3, 5)), requires_grad=True)

    def f(a, b):
        return distill_knowledge(LayerModuleTap(a, b), 1, 2.0, "student", ref).values

    # float32 singular vectors put the difference quotient's noise near 1e-3 here;
    # the float64 gate on svd_backward itself lives in test_linalg
    assert check_gradients(f, [ffm, bfm]) < 1e-2
