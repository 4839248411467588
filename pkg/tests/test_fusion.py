import mpmath
import numpy as np
import pytest

import gradcheck
from wsifuse.errors import EmptyDataset, ParseError, ShapeMismatch
from wsifuse.fusion import (
    BranchSpec,
    FixedWeights,
    WeigherHyper,
    WeightModel,
    fused_loss_wrt_weights,
    fusion_loss,
    load_weight_model,
    loss_gradient,
    predict_weights,
    prepare_pixels,
    save_weight_model,
    softmax,
    train_weigher,
    weighted_fuse,
)
from wsifuse.fusion import layers
from wsifuse.pyramid import Patch, PatchStack

from oracles import P_EXAMPLE, W_EXAMPLE, exact_softmax_example

def test_one_hot_weight_selects_level():
    P = np.zeros((6, 3))
    P[0] = (0.7, 0.2, 0.1)
    P[1:] = (0.0, 0.0, 1.0)
    res = weighted_fuse(np.eye(6)[0], P)
    assert np.allclose(res.w_sum, (0.7, 0.2, 0.1), atol=0) and res.w_softmax.argmax() == 0


def test_uniform_weights_on_identical_rows():
    p = np.array([0.2, 0.5, 0.3])
    res = weighted_fuse(np.full(6, 1 / 6), np.tile(p, (6, 1)))
    assert np.allclose(res.w_sum, p, atol=1e-15)


def test_worked_example_against_exact_arithmetic():
    s, soft = exact_softmax_example()
    res = weighted_fuse(W_EXAMPLE, P_EXAMPLE)
    assert np.allclose(res.w_sum, (0.52, 0.305, 0.175), atol=1e-15)
    assert np.allclose(res.w_pred[:3], W_EXAMPLE[:3, None] * P_EXAMPLE[:3])
    for i in range(3):
        assert abs(res.w_sum[i] - float(s[i])) < 1e-15
        assert round(res.w_softmax[i], 9) == round(float(soft[i]), 9)
    gt = np.array([1.0, 0.0, 0.0])
    assert fusion_loss(res.w_softmax, gt) == pytest.approx(float(-mpmath.log(soft[0])), abs=1e-12)


def test_loss_examples():
    assert fusion_loss(softmax(np.zeros(3)), np.eye(3)[1]) == pytest.approx(np.log(3), abs=1e-12)
    assert fusion_loss(np.array([0.0, 1.0, 0.0]), np.eye(3)[1]) == 0.0
    with pytest.raises(ShapeMismatch):
        fusion_loss(np.ones(3) / 3, np.eye(4)[0])


def test_fuse_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        weighted_fuse(np.ones(5) / 5, P_EXAMPLE)


def test_argmax_invariance_and_selection(rng):
    for _ in range(500):
        L, N = 6, int(rng.integers(2, 6))
        w = softmax(rng.normal(size=L) * 3)
        P = softmax(rng.normal(size=(L, N)) * 2)
        res = weighted_fuse(w, P)
        assert res.w_softmax.argmax() == res.w_sum.argmax()
        assert res.w_softmax.sum() == pytest.approx(1.0, abs=1e-12)
        k = int(rng.integers(L))
        assert weighted_fuse(np.eye(L)[k], P).w_softmax.argmax() == P[k].argmax()
        perm = rng.permutation(L)
        assert np.allclose(weighted_fuse(w[perm], P[perm]).w_sum, res.w_sum, atol=1e-15)


def test_weight_gradient_closed_form(rng):
    for _ in range(50):
        w = softmax(rng.normal(size=6))
        P = softmax(rng.normal(size=(6, 3)))
        gt = np.eye(3)[int(rng.integers(3))]
        _, dw = fused_loss_wrt_weights(w, P, gt)
        soft = weighted_fuse(w, P).w_softmax
        assert np.allclose(dw, P @ (soft - gt), atol=1e-14)


@pytest.mark.parametrize("kind", sorted(gradcheck.LAYER_CHECKS))
def test_layer_gradients(kind):
    rng = np.random.default_rng(sorted(gradcheck.LAYER_CHECKS).index(kind))
    for _ in range(20):
        assert gradcheck.LAYER_CHECKS[kind](rng) <= gradcheck.REL_TOL


def test_model_gradients():
    rng = np.random.default_rng(77)
    for seed in range(20):
        assert gradcheck.check_model(rng, seed) <= gradcheck.REL_TOL


def test_gradient_check_catches_a_wrong_gradient():
    rng = np.random.default_rng(1)
    x, W, b = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2)
    out, cols = layers.conv_forward(x, W, b)
    r = rng.normal(size=out.shape)
    _, dW, _ = layers.conv_backward(r, cols, x.shape, W)
    num = gradcheck.numeric_grad(lambda: float(np.sum(layers.conv_forward(x, W, b)[0] * r)), W)
    assert gradcheck.worst_error(dW, num) <= gradcheck.REL_TOL
    assert gradcheck.worst_error(dW * 1.001, num) > gradcheck.REL_TOL


def test_conv_matches_direct_loop(rng):
    x, W, b = rng.normal(size=(2, 3, 7, 9)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    out, _ = layers.conv_forward(x, W, b)
    assert out.shape == (2, 4, 3, 4)
    for n in range(2):
        for o in range(4):
            for i in range(3):
                for j in range(4):
                    ref = np.sum(x[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * W[o]) + b[o]
                    assert out[n, o, i, j] == pytest.approx(ref, abs=1e-12)


# --------------------------------------------------------------------------
# model


def stack_of(rng, levels=6, tile=16):
    return PatchStack(tuple(Patch(rng.integers(0, 256, (tile, tile, 3), dtype=np.uint8), (l, 0, 0), 5 - l) for l in range(levels)))


def test_fresh_model_gives_uniform_weights(rng):
    model = WeightModel.init(6, BranchSpec(input_size=16, widths=(4, 8)), seed=0)
    w = predict_weights(model, stack_of(rng))
    assert np.allclose(w, 1 / 6, atol=0)


def test_weights_sum_to_one_for_random_models(rng):
    model, _, _, _ = gradcheck.random_model(rng, 3)
    x = rng.normal(size=(10, model.levels, model.spec.in_channels, model.spec.input_size, model.spec.input_size))
    w = model.weights(x)
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-12) and (w >= 0).all()


def test_branch_permutation_equivariance(rng):
    model, x, _, _ = gradcheck.random_model(rng, 5)
    perm = rng.permutation(model.levels)
    permuted = WeightModel(model.spec, [model.params[i] for i in perm], model.seed)
    assert np.allclose(permuted.weights(x[:, perm]), model.weights(x)[:, perm], atol=1e-14)


def test_identical_rows_give_zero_score_gradient(rng):
    model, x, _, _ = gradcheck.random_model(rng, 9)
    P = np.tile(softmax(rng.normal(size=3)), (x.shape[0], model.levels, 1))
    gt = np.eye(3)[np.zeros(x.shape[0], int)]
    _, grads, info = model.loss_and_grads(x, P, gt)
    assert np.abs(info["d_scores"]).max() < 1e-15
    assert max(np.abs(g).max() for b in grads for g in b) < 1e-15


def test_exact_prediction_gives_zero_gradient():
    # W_softmax == gt only in the limit; with one level certain and the clamp
    # the gradient is zero once every level carries the same one-hot row
    model = WeightModel.init(2, BranchSpec(widths=(2,), input_size=5, in_channels=1), seed=0)
    P = np.tile(np.array([[[1.0, 0.0]]]), (1, 2, 1))
    g = loss_gradient(model, np.zeros((2, 1, 5, 5)), P[0], np.array([1.0, 0.0]))
    assert max(np.abs(a).max() for b in g for a in b) == 0.0


def test_loss_gradient_shape_checks(rng):
    model = WeightModel.init(3, BranchSpec(widths=(2,), input_size=5), seed=0)
    with pytest.raises(ShapeMismatch):
        loss_gradient(model, np.zeros((2, 3, 5, 5)), np.ones((2, 3)) / 3, np.eye(3)[0])
    with pytest.raises(ShapeMismatch):
        model.weights(np.zeros((1, 3, 3, 6, 6)))
    with pytest.raises(ShapeMismatch):
        predict_weights(model, stack_of(rng, levels=4))
    with pytest.raises(ShapeMismatch):
        BranchSpec(widths=(2, 2, 2), input_size=8).validate()


def test_prepare_pixels():
    px = np.arange(4 * 4 * 3, dtype=np.uint8).reshape(1, 4, 4, 3)
    down = prepare_pixels(px, 2)
    assert down.shape == (1, 3, 2, 2)
    assert down[0, 0, 0, 0] == pytest.approx(np.mean(px[0, :2, :2, 0]) / 255)
    same = prepare_pixels(px, 4)
    assert np.array_equal(same[0].transpose(1, 2, 0), px[0] / 255)
    assert prepare_pixels(px, 3).shape == (1, 3, 3, 3)


def test_fixed_weights():
    fw = FixedWeights.one_hot(6, 2)
    assert fw.w == (0, 0, 1.0, 0, 0, 0)
    with pytest.raises(ShapeMismatch):
        fw.predict(PatchStack(()))


# --------------------------------------------------------------------------
# training


def constructed_dataset(rng, n=120, levels=6, good=3, size=8):
    """Level ``good`` always predicts the truth; every other level is confidently wrong."""
    data = []
    for _ in range(n):
        c = int(rng.integers(3))
        P = np.full((levels, 3), 0.05)
        for l in range(levels):
            wrong = (c + 1 + int(rng.integers(2))) % 3
            P[l, wrong] = 0.9
        P[good] = 0.05
        P[good, c] = 0.9
        data.append((rng.uniform(size=(levels, 3, size, size)), P, np.eye(3)[c]))
    return data


def test_weigher_learns_the_reliable_level(rng):
    data = constructed_dataset(rng)
    spec = BranchSpec(widths=(4,), input_size=8)
    model, record = train_weigher(data, WeigherHyper(learning_rate=0.05, batch_size=16, max_epochs=60, seed=1), spec)
    x = np.stack([d[0] for d in data])
    w = model.weights(x)
    assert w[:, 3].mean() > 0.5
    fused = weighted_fuse(w, np.stack([d[1] for d in data])).w_softmax.argmax(axis=1)
    assert (fused == np.stack([d[2] for d in data]).argmax(axis=1)).mean() >= 0.95
    assert record.val_loss[record.best_epoch] == min(record.val_loss)


def test_zero_learning_rate_keeps_parameters(rng):
    data = constructed_dataset(rng, n=20)
    spec = BranchSpec(widths=(2,), input_size=8)
    init = WeightModel.init(6, spec, seed=4)
    model, _ = train_weigher(data, WeigherHyper(learning_rate=0.0, max_epochs=3), spec, init)
    assert all(np.array_equal(a, b) for ba, bb in zip(model.params, init.params) for a, b in zip(ba, bb))


@pytest.mark.parametrize("optimizer", ["adam", "sgd"])
def test_training_is_deterministic(rng, optimizer):
    data = constructed_dataset(rng, n=40)
    spec = BranchSpec(widths=(2,), input_size=8)
    hyper = WeigherHyper(learning_rate=0.01, batch_size=8, max_epochs=4, seed=2, optimizer=optimizer)
    a, ra = train_weigher(data, hyper, spec)
    b, rb = train_weigher(data, hyper, spec)
    assert ra.train_loss == rb.train_loss and ra.val_loss == rb.val_loss
    assert all(np.array_equal(p, q) for ba, bb in zip(a.params, b.params) for p, q in zip(ba, bb))


def test_early_stopping(rng):
    data = constructed_dataset(rng, n=30)
    spec = BranchSpec(widths=(2,), input_size=8)
    # with a zero step the validation loss never improves after epoch 0
    _, record = train_weigher(data, WeigherHyper(learning_rate=0.0, max_epochs=50, patience=3), spec)
    assert record.stopped_early and len(record.val_loss) == 4 and record.best_epoch == 0


def test_training_errors(rng):
    with pytest.raises(EmptyDataset):
        train_weigher([])
    data = constructed_dataset(rng, n=4)
    data.append((np.zeros((6, 3, 8, 8)), np.ones((5, 3)) / 3, np.eye(3)[0]))
    with pytest.raises(ShapeMismatch):
        train_weigher(data, spec=BranchSpec(widths=(2,), input_size=8))


def test_patch_stacks_accepted(rng):
    data = [(stack_of(rng, tile=8), np.ones((6, 3)) / 3, np.eye(3)[i % 3]) for i in range(6)]
    model, _ = train_weigher(data, WeigherHyper(max_epochs=1), BranchSpec(widths=(2,), input_size=8))
    assert model.levels == 6


def test_checkpoint_round_trip(tmp_path, rng):
    model, x, _, _ = gradcheck.random_model(rng, 1)
    save_weight_model(model, tmp_path / "w.txt")
    back = load_weight_model(tmp_path / "w.txt")
    assert back.spec == model.spec and back.seed == model.seed
    assert all(np.array_equal(p, q) for ba, bb in zip(model.params, back.params) for p, q in zip(ba, bb))
    assert np.array_equal(back.weights(x), model.weights(x))
    save_weight_model(back, tmp_path / "w2.txt")
    assert (tmp_path / "w.txt").read_bytes() == (tmp_path / "w2.txt").read_bytes()
    (tmp_path / "bad.txt").write_text("wsifuse-weigher 1\nlevels x\n")
    with pytest.raises(ParseError):
        load_weight_model(tmp_path / "bad.txt")
