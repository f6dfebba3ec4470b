import math

import numpy as np
import pytest

from svdkd.autograd import SGD, Tensor, grad
from svdkd.autograd import ops
from svdkd.data import AugmentConfig, subset_labels
from svdkd.distill import distill_knowledge, teacher_reference
from svdkd.training import (NumericalError, TrainConfig, clip_transfer_gradient, gate_factor, global_norm,
                            run_one_stage, run_two_stage, total_loss, train_teacher, transfer_loss)


def quick_cfg(**kw):
    base = dict(epochs=1, batch_size=8, lr_drop_every=1, beta=1.0, augment=AugmentConfig(enabled=False))
    base.update(kw)
    return TrainConfig(**base)


def _losses(teacher, student, x, labels, k=1, beta=1.0, mask=None):
    logits, staps = student.forward(x)
    _, ttaps = teacher.forward(x)
    refs = [teacher_reference(t, k, beta) for t in ttaps]
    sdfv = [distill_knowledge(t, k, beta, "student", r) for t, r in zip(staps, refs)]
    main = ops.softmax_cross_entropy(logits, labels, mask)
    return main, transfer_loss([r.dfv for r in refs], sdfv, batch_size=x.shape[0])


# ---------------------------------------------------------------- losses

def test_transfer_loss_identical_lists_is_zero():
    a = Tensor(np.random.default_rng(0).random((1, 2, 3)))
    assert transfer_loss([a, a], [a, a]).item() == 0.0


def test_transfer_loss_unit_difference():
    t = Tensor(np.zeros((1, 2, 3)))
    s = Tensor(np.ones((1, 2, 3)))
    assert transfer_loss([t], [s]).item() == 3.0


def test_transfer_loss_two_groups_brute_force():
    rng = np.random.default_rng(1)
    ts = [rng.random((2, 3, 4)), rng.random((2, 5, 2))]
    ss = [rng.random((2, 3, 4)), rng.random((2, 5, 2))]
    brute = 0.0
    for t, s in zip(ts, ss):
        for idx in np.ndindex(t.shape):
            brute += (float(np.float32(t[idx])) - float(np.float32(s[idx]))) ** 2 / 2
    got = transfer_loss([Tensor(t) for t in ts], [Tensor(s) for s in ss]).item()
    assert got == pytest.approx(brute, rel=1e-5)


def test_transfer_loss_shape_mismatch_names_group():
    with pytest.raises(ValueError, match="g=2"):
        transfer_loss([Tensor(np.ones((1, 2))), Tensor(np.ones((1, 2)))],
                      [Tensor(np.ones((1, 2))), Tensor(np.ones((1, 3)))])


def test_total_loss_examples():
    assert total_loss(Tensor(0.7), Tensor(0.3)).item() == pytest.approx(1.0)
    assert total_loss(Tensor(1.25), Tensor(0.0)).item() == 1.25
    with pytest.raises(NumericalError, match="transfer"):
        total_loss(Tensor(1.0), Tensor(np.nan))


def test_unlabeled_rows_only_feed_transfer(tiny_pair, tiny_splits):
    teacher, student = tiny_pair
    train, _ = tiny_splits
    x = student.normalize(train.images[:4])
    labels = train.labels[:4]
    mask = np.array([True, False, True, False])
    main, trans = _losses(teacher, student, x, labels, mask=mask)
    params = list(student.parameters().values())
    g_main = grad(main, params)
    x2 = x.copy()
    x2[1] += 0.5
    main2, trans2 = _losses(teacher, student, x2, labels, mask=mask)
    assert main2.item() == main.item()
    assert trans2.item() != trans.item()
    # logits of unlabeled rows receive no main-task gradient
    logits = Tensor(np.random.default_rng(2).standard_normal((4, 3)), requires_grad=True)
    g = grad(ops.softmax_cross_entropy(logits, labels, mask), [logits])[0]
    assert not np.any(g[~mask])
    assert all(np.all(np.isfinite(a)) for a in g_main)


# ---------------------------------------------------------------- clipping

def test_clip_off_passes_through_unchanged():
    gm, gt = [np.ones(3)], [np.full(3, 0.1)]
    out, info = clip_transfer_gradient(gm, gt, 5, "off")
    assert out[0] is gt[0] and info.scale == 1.0


def test_gate_at_tau_equal_p_is_half():
    assert gate_factor(4.0, 4) == 0.5
    gm, gt = [np.array([3.0, 4.0])], [np.array([1.0, 0.0])]
    _, info = clip_transfer_gradient(gm, gt, 5, "literal")
    assert info.tau == 5.0 and info.scale == 0.5


def test_literal_scale_matches_hand_evaluation():
    rng = np.random.default_rng(3)
    gm = [rng.standard_normal((4, 3)), rng.standard_normal(7)]
    gt = [0.1 * rng.standard_normal((4, 3)), 0.1 * rng.standard_normal(7)]
    main = math.sqrt(sum(float((g ** 2).sum()) for g in gm))
    trans = math.sqrt(sum(float((g ** 2).sum()) for g in gt))
    out, info = clip_transfer_gradient(gm, gt, 3, "literal")
    expected = 1 / (1 + math.exp(-main / trans + 3))
    assert info.scale == pytest.approx(expected, abs=1e-12)
    np.testing.assert_allclose(out[1], gt[1] * expected, rtol=1e-6)


def test_modes_gate_complementary_cases():
    small, big = [np.full(2, 0.1)], [np.full(2, 1.0)]
    # transfer smaller than main: literal gates, inverted passes
    assert clip_transfer_gradient(big, small, 20, "literal")[1].scale < 1
    assert clip_transfer_gradient(big, small, 20, "inverted")[1].scale == 1.0
    # transfer larger than main: the reverse
    assert clip_transfer_gradient(small, big, 20, "literal")[1].scale == 1.0
    assert clip_transfer_gradient(small, big, 20, "inverted")[1].scale < 1


def test_zero_transfer_gradient_passes_with_infinite_tau():
    out, info = clip_transfer_gradient([np.ones(2)], [np.zeros(2)], 0, "literal")
    assert math.isinf(info.tau) and info.scale == 1.0


@pytest.mark.parametrize("p", [0, 10, 1000])
def test_scale_stays_in_unit_interval(p):
    rng = np.random.default_rng(p)
    for _ in range(50):
        _, info = clip_transfer_gradient([rng.standard_normal(5)], [0.2 * rng.standard_normal(5)], p, "literal")
        assert 0.0 < info.scale <= 1.0


def test_unknown_clip_mode_rejected():
    with pytest.raises(ValueError, match="clip mode"):
        clip_transfer_gradient([np.ones(1)], [np.ones(1)], 0, "both")


def test_two_backward_passes_sum_to_joint_gradient(tiny_pair, tiny_splits):
    teacher, student = tiny_pair
    train, _ = tiny_splits
    x = student.normalize(train.images[:4])
    params = list(student.parameters().values())
    main, trans = _losses(teacher, student, x, train.labels[:4])
    separate = [a + b for a, b in zip(grad(main, params), clip_transfer_gradient(
        grad(main, params), grad(trans, params), 0, "off")[0])]
    joint = grad(total_loss(main, trans), params)
    assert global_norm([a - b for a, b in zip(separate, joint)]) <= 1e-5 * global_norm(joint)


def test_fixed_point_copy_of_teacher(tiny_pair, tiny_splits):
    teacher, _ = tiny_pair
    train, _ = tiny_splits
    student = teacher.copy()
    x = teacher.normalize(train.images[:6])
    _, trans = _losses(teacher, student, x, train.labels[:6])
    g = grad(trans, list(student.parameters().values()))
    assert trans.item() < 1e-6 and global_norm(g) < 1e-4


# ---------------------------------------------------------------- mechanisms

def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.momentum, cfg.weight_decay, cfg.batch_size, cfg.epochs) == (1e-2, 0.9, 1e-4, 128, 200)
    assert (cfg.lr_drop_every, cfg.lr_drop_factor, cfg.k, cfg.beta) == (50, 0.1, 1, 8.0)
    assert cfg.lr_at(49) == 1e-2 and cfg.lr_at(50) == pytest.approx(1e-3) and cfg.lr_at(100) == pytest.approx(1e-4)
    for bad in (dict(mechanism="three"), dict(clip_mode="x"), dict(k=0), dict(beta=0), dict(label_fraction=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_stage_one_on_copy_of_teacher_stays_at_zero(tiny_pair, tiny_splits):
    teacher, _ = tiny_pair
    train, test = tiny_splits
    result = run_two_stage(teacher, teacher.copy(), quick_cfg(mechanism="two_stage", lr=1e-3), train, test)
    stage1 = [r for r in result.history if r["stage"] == "stage1"]
    assert stage1 and all(r["transfer_loss"] < 1e-4 for r in stage1)


def test_stage_one_objective_decreases_on_fixed_batch(tiny_pair, tiny_splits):
    teacher, student = tiny_pair
    train, _ = tiny_splits
    x = student.normalize(train.images[:6])
    params = list(student.parameters().values())
    opt = SGD(params, lr=1e-3, momentum=0.0, nesterov=False, weight_decay=0.0)
    values = []
    for _ in range(8):
        _, trans = _losses(teacher, student, x, train.labels[:6])
        values.append(trans.item())
        opt.step(grad(trans, params))
    assert all(b < a for a, b in zip(values, values[1:])), values


def test_metrics_rows_have_documented_columns(tiny_pair, tiny_splits):
    teacher, student = tiny_pair
    train, test = tiny_splits
    result = run_one_stage(teacher, student, quick_cfg(epochs=2), train, test)
    assert [r["epoch"] for r in result.history] == [0, 1]
    for col in ("epoch", "stage", "lr", "main_loss", "transfer_loss", "clip_factor_mean", "train_acc", "test_acc"):
        assert col in result.history[0]
    assert 0 < result.history[0]["clip_factor_mean"] <= 1


def test_two_stage_records_both_stages(tiny_pair, tiny_splits):
    teacher, student = tiny_pair
    train, test = tiny_splits
    result = run_two_stage(teacher, student, quick_cfg(mechanism="two_stage", epochs=2), train, test)
    assert [r["stage"] for r in result.history] == ["stage1"] * 2 + ["stage2"] * 2
    assert [r["epoch"] for r in result.history] == [0, 1, 0, 1]


def test_full_label_fraction_is_byte_identical(tiny_pair, tiny_splits):
    teacher, student = tiny_pair
    train, test = tiny_splits
    a = run_one_stage(teacher, student.copy(), quick_cfg(epochs=2), train, test)
    b = run_one_stage(teacher, student.copy(), quick_cfg(epochs=2, label_fraction=1.0),
                      subset_labels(train, 1.0, 0), test)
    assert a.history == b.history
    for name, p in a.model.parameters().items():
        assert p.data.tobytes() == b.model.parameters()[name].data.tobytes()


def test_semi_supervised_counts_unlabeled(tiny_pair, tiny_splits):
    teacher, student = tiny_pair
    train, test = tiny_splits
    part = subset_labels(train, 0.5, 0)
    result = run_one_stage(teacher, student, quick_cfg(label_fraction=0.5), part, test)
    assert result.history[0]["n_unlabeled"] == 9


def test_incompatible_taps_abort_before_training(tiny_pair, tiny_splits):
    teacher, student = tiny_pair
    train, test = tiny_splits
    with pytest.raises(ValueError, match="cannot hold rank"):
        run_one_stage(teacher, student, quick_cfg(k=80), train, test)


def test_nan_aborts_run(tiny_pair, tiny_splits):
    teacher, student = tiny_pair
    train, test = tiny_splits
    student.params["fc1.w"].data[:] = np.nan
    with pytest.raises(NumericalError):
        run_one_stage(teacher, student, quick_cfg(), train, test)


def test_teacher_training_runs_and_is_deterministic(tiny_splits):
    from svdkd import models

    train, test = tiny_splits
    runs = []
    for _ in range(2):
        m = models.build(models.preset("tiny-vgg-T", 3), seed=0)
        runs.append(repr(train_teacher(m, quick_cfg(), train, test).history))  # repr: nan == nan
    assert runs[0] == runs[1]
