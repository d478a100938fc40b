import math
import warnings

import numpy as np
import pytest

from sfgnet.autograd import Tensor, backward, ops
from sfgnet.autograd.gradcheck import check_gradients
from sfgnet.concrete import GroupingParams
from sfgnet.objective import (DEFAULT_LAMBDA1, DEFAULT_LAMBDA2, dice_ce, kl_surrogate, loss_for_head,
                              nll_classification, nll_regression, soft_dice_loss, total_loss)
from sfgnet.sfg import SfgLayer


def one_kernel_layer(kernel, p, trainable=True):
    kernel = np.asarray(kernel, dtype=float)
    gp = GroupingParams.from_probs(np.atleast_2d(p), trainable=trainable)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        layer = SfgLayer(kernel.size, 1, gp, np.random.default_rng(0), kernel_size=1)
    layer.kernels.data = kernel.reshape(1, -1, 1, 1)
    return layer


def test_default_weights():
    assert DEFAULT_LAMBDA1 == 1e-6
    assert DEFAULT_LAMBDA2 == 1e-5


def test_kl_single_kernel_hand_value():
    kl = kl_surrogate([one_kernel_layer([1.0, 1.0], [1 / 3, 1 / 3, 1 / 3])], 1.0, 1.0)
    assert kl.weight_l2.item() == 2.0
    assert kl.combined.item() == pytest.approx(2.0 - math.log(3.0), abs=1e-12)


def test_kl_vanishes_for_zero_kernels_and_one_hot_groupings():
    layers = [one_kernel_layer([0.0, 0.0], [0.0, 1.0, 0.0], trainable=False),
              one_kernel_layer([0.0], [1.0, 0.0, 0.0], trainable=False)]
    assert kl_surrogate(layers).combined.item() == 0.0


def test_kl_counts_only_sfg_kernels():
    rng = np.random.default_rng(1)
    layers = [one_kernel_layer(rng.normal(size=3), [0.2, 0.6, 0.2]),
              one_kernel_layer(rng.normal(size=2), [0.5, 0.25, 0.25])]
    direct = sum(float(np.sum(l.kernels.data ** 2)) for l in layers)
    assert kl_surrogate(layers).weight_l2.item() == pytest.approx(direct, abs=1e-14)


def test_rmse_values_and_errors():
    assert nll_regression(Tensor([1.0, 2.0, 3.0, 4.0]), np.zeros(4)).item() == pytest.approx(math.sqrt(7.5))
    with pytest.raises(ValueError):
        nll_regression(Tensor(np.zeros(0)), np.zeros(0))
    with pytest.raises(ValueError):
        nll_regression(Tensor(np.zeros(3)), np.zeros(4))


def test_rmse_at_zero_error_has_finite_zero_gradient():
    pred = Tensor(np.ones(3), requires_grad=True)
    loss = nll_regression(pred, np.ones(3))
    backward(loss)
    assert loss.item() == 0.0
    np.testing.assert_array_equal(pred.grad, 0.0)


def test_rmse_gradient():
    pred = Tensor(np.random.default_rng(2).normal(size=(5, 1)), requires_grad=True)
    target = np.random.default_rng(3).normal(size=5)
    assert max(check_gradients(lambda: nll_regression(pred, target), [pred])) < 1e-6


def test_cross_entropy_values():
    assert nll_classification(Tensor(np.zeros((4, 2))), np.array([0, 1, 1, 0])).item() == pytest.approx(math.log(2))
    logits = Tensor(np.array([[20.0, 0.0], [0.0, 20.0]]))
    assert nll_classification(logits, np.array([0, 1])).item() < 1e-8


def test_cross_entropy_label_checks():
    with pytest.raises(ValueError):
        nll_classification(Tensor(np.zeros((2, 2))), np.array([0, 2]))
    with pytest.raises(ValueError):
        nll_classification(Tensor(np.zeros((2, 2))), np.array([-1, 0]))


def test_cross_entropy_gradient():
    logits = Tensor(np.random.default_rng(4).normal(size=(6, 3)), requires_grad=True)
    labels = np.array([0, 1, 2, 2, 1, 0])
    assert max(check_gradients(lambda: nll_classification(logits, labels), [logits])) < 1e-6


def onehot_logits(labels, classes, scale=50.0):
    return Tensor(scale * (np.moveaxis(np.eye(classes)[labels], -1, 1) * 2 - 1))


def test_dice_perfect_and_disjoint_predictions():
    labels = np.zeros((1, 4, 4), dtype=int)
    labels[0, :2] = 1
    perfect = soft_dice_loss(ops.softmax(onehot_logits(labels, 2), axis=1), labels)
    assert perfect.item() < 1e-6
    fg = np.ones((1, 4, 4), dtype=int)
    bg = np.zeros((1, 4, 4), dtype=int)
    disjoint = soft_dice_loss(ops.softmax(onehot_logits(bg, 2), axis=1), fg)
    # neither class overlaps its label: both per-class Dice scores are ~0
    assert disjoint.item() == pytest.approx(1.0, abs=1e-5)


def test_dice_ce_matches_counting_oracle():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(1, 2, 4, 4))
    labels = rng.integers(0, 2, size=(1, 4, 4))
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    prob = e / e.sum(axis=1, keepdims=True)
    dices, ce = [], 0.0
    for c in range(2):
        inter = sum(prob[0, c, i, j] for i in range(4) for j in range(4) if labels[0, i, j] == c)
        size_pred = sum(prob[0, c, i, j] for i in range(4) for j in range(4))
        size_true = sum(1 for i in range(4) for j in range(4) if labels[0, i, j] == c)
        dices.append((2 * inter + 1e-5) / (size_pred + size_true + 1e-5))
    for i in range(4):
        for j in range(4):
            ce -= math.log(prob[0, labels[0, i, j], i, j]) / 16
    expected = 1 - sum(dices) / 2 + ce
    assert dice_ce(Tensor(logits), labels).item() == pytest.approx(expected, abs=1e-12)


def test_dice_ce_gradient_and_shape_check():
    logits = Tensor(np.random.default_rng(6).normal(size=(2, 3, 3, 3)), requires_grad=True)
    labels = np.random.default_rng(7).integers(0, 3, size=(2, 3, 3))
    assert max(check_gradients(lambda: dice_ce(logits, labels), [logits])) < 1e-6
    with pytest.raises(ValueError):
        dice_ce(logits, labels[:, :2])


def test_total_loss_assembly_hand_case():
    layer = one_kernel_layer([0.5, -1.0], [0.2, 0.6, 0.2])
    kl = kl_surrogate([layer])
    h = -(0.4 * math.log(0.2) + 0.6 * math.log(0.6))
    nll1, nll2 = Tensor(0.7), Tensor(1.3)
    total = total_loss(nll1, nll2, kl, 100, 10).item()
    assert total == pytest.approx(10 * 2.0 + 1e-6 * 1.25 - 1e-5 * h, abs=1e-12)


def test_total_loss_scaling():
    kl = kl_surrogate([one_kernel_layer([1.0], [0.2, 0.6, 0.2])])
    a, b = Tensor(0.3), Tensor(0.9)
    unit = total_loss(a, b, kl, 8, 8).item()
    assert unit == pytest.approx(1.2 + kl.combined.item(), abs=1e-15)
    double = total_loss(a, b, kl, 16, 8).item()
    assert double - kl.combined.item() == pytest.approx(2 * (unit - kl.combined.item()), abs=1e-14)
    with pytest.raises(ValueError):
        total_loss(a, b, kl, 4, 8)
    with pytest.raises(ValueError):
        total_loss(a, b, kl, 4, 0)


def test_entropy_weight_sign():
    layer = one_kernel_layer([1.0, 2.0], [0.3, 0.4, 0.3])
    eps = 1e-3
    lo = total_loss(Tensor(1.0), Tensor(1.0), kl_surrogate([layer], 1e-6, 1.0), 10, 5).item()
    hi = total_loss(Tensor(1.0), Tensor(1.0), kl_surrogate([layer], 1e-6, 1.0 + eps), 10, 5).item()
    ent = kl_surrogate([layer]).entropy_sum.item()
    assert ent > 0
    assert (hi - lo) / eps == pytest.approx(-ent, rel=1e-6)


def test_kl_invariant_to_kernel_permutation():
    rng = np.random.default_rng(8)
    p = rng.dirichlet((1, 1, 1), size=5)
    kernels = rng.normal(size=(5, 2, 3, 3))
    perm = rng.permutation(5)

    def build(pp, kk):
        layer = SfgLayer(2, 5, GroupingParams.from_probs(pp), np.random.default_rng(0))
        layer.kernels.data = kk
        return layer

    a = kl_surrogate([build(p, kernels)]).combined.item()
    b = kl_surrogate([build(p[perm], kernels[perm])]).combined.item()
    assert a == pytest.approx(b, abs=1e-15)


def test_loss_for_head_dispatch():
    assert loss_for_head("classification", Tensor(np.zeros((2, 2))), [0, 1]).item() == pytest.approx(math.log(2))
    with pytest.raises(ValueError):
        loss_for_head("ranking", Tensor(np.zeros(2)), [0, 1])
