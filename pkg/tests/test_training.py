import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from runet.data import SamplePair, generate_synthetic
from runet.errors import ContractViolation, DivergenceError, InvalidConfigError, InvalidDataError
from runet.models import ModelSpec, build_model
from runet.nn import Conv2d
from runet.tensor import Parameter, Tensor, backward, wide_precision
from runet.training import (LOG_HEADER, SGD, TrainConfig, augment_pair, clip_gradients, he_init,
                            multi_step_loss, sgd_momentum_step, stack_batch, step_weights, train)


def scalar_ce(logits, target):
    """Per-pixel log-softmax cross-entropy written as plain loops."""
    B, K, H, W = logits.shape
    total = 0.0
    for n in range(B):
        for i in range(H):
            for j in range(W):
                zs = [float(logits[n, k, i, j]) for k in range(K)]
                m = max(zs)
                lse = m + math.log(sum(math.exp(z - m) for z in zs))
                total += lse - zs[int(target[n, 0, i, j])]
    return total / (B * H * W)


# -- step weights --------------------------------------------------------------

def test_step_weights_examples():
    assert step_weights(3, 0.4) == [0.16, 0.4, 1.0]
    assert step_weights(4, 0.5) == [0.125, 0.25, 0.5, 1.0]
    assert step_weights(3, 1.0) == [1.0, 1.0, 1.0]
    assert step_weights(1, 0.3) == [1.0]


@given(st.integers(1, 10), st.floats(1e-3, 1.0))
def test_step_weights_non_decreasing_ending_at_one(n, alpha):
    w = step_weights(n, alpha)
    assert w[-1] == 1.0 and all(a <= b for a, b in zip(w, w[1:]))


@given(st.integers(1, 10), st.floats(1e-3, 1.0))
def test_step_weights_match_float_powers(n, alpha):
    for w, t in zip(step_weights(n, alpha), range(1, n + 1)):
        assert w == pytest.approx(alpha ** (n - t), rel=1e-14, abs=0)


@pytest.mark.parametrize("alpha", [0.0, -0.5, 1.5])
def test_step_weights_reject_bad_alpha(alpha):
    with pytest.raises(InvalidConfigError):
        step_weights(3, alpha)


# -- multi-step loss -----------------------------------------------------------

@given(st.integers(0, 10_000), st.integers(1, 4), st.floats(0.05, 1.0))
def test_multi_step_loss_matches_scalar_oracle(seed, n, alpha):
    rng = np.random.default_rng(seed)
    logits = [rng.standard_normal((2, 2, 3, 3)) * 3 for _ in range(n)]
    target = (rng.random((2, 1, 3, 3)) < 0.5).astype(np.float64)
    with wide_precision():
        loss, rep = multi_step_loss([Tensor(z) for z in logits], target, alpha)
    ref = sum(alpha ** (n - t) * scalar_ce(z, target) for t, z in enumerate(logits, 1))
    assert loss.item() == pytest.approx(ref, rel=1e-6)
    assert rep.total == pytest.approx(sum(w * l for w, l in zip(rep.weights, rep.per_step)), rel=1e-6)


def test_identical_steps_equal_weight_triple_single(rng):
    z = Tensor(rng.standard_normal((1, 2, 4, 4)))
    t = (rng.random((1, 1, 4, 4)) < 0.5).astype(np.float64)
    single, _ = multi_step_loss([z], t, 1.0)
    triple, _ = multi_step_loss([z, z, z], t, 1.0)
    assert triple.item() == pytest.approx(3 * single.item(), rel=1e-6)


def test_saturated_predictions_have_zero_loss(rng):
    t = (rng.random((2, 1, 4, 4)) < 0.5).astype(np.float64)
    z = np.concatenate([-30 * (2 * t - 1), 30 * (2 * t - 1)], axis=1)
    loss, _ = multi_step_loss([Tensor(z)] * 3, t, 0.4)
    assert loss.item() < 1e-12


@given(st.integers(0, 1000))
def test_equal_weight_loss_invariant_to_step_order(seed):
    rng = np.random.default_rng(seed)
    zs = [Tensor(rng.standard_normal((1, 2, 3, 3))) for _ in range(3)]
    t = (rng.random((1, 1, 3, 3)) < 0.5).astype(np.float64)
    a, _ = multi_step_loss(zs, t, 1.0)
    b, _ = multi_step_loss(zs[::-1], t, 1.0)
    assert a.item() == pytest.approx(b.item(), rel=1e-6)


def test_multi_step_loss_rejects_soft_target():
    with pytest.raises(InvalidDataError):
        multi_step_loss([Tensor(np.zeros((1, 2, 2, 2)))], np.full((1, 1, 2, 2), 0.3), 0.4)


# -- optimizer -----------------------------------------------------------------

def test_first_step_is_plain_gradient_descent():
    p = Parameter(np.array([1.0, -2.0]))
    p.grad = np.array([0.5, 0.25], dtype=np.float32)
    vel = {}
    sgd_momentum_step([("p", p)], vel, lr=0.1, momentum=0.9)
    np.testing.assert_allclose(p.data, [0.95, -2.025])


def test_velocity_decays_without_gradient():
    p = Parameter(np.zeros(1))
    vel = {"p": np.array([1.0], dtype=np.float32)}
    for k in range(1, 4):
        p.grad = np.zeros(1, dtype=np.float32)
        sgd_momentum_step([("p", p)], vel, lr=0.1, momentum=0.9)
        np.testing.assert_allclose(vel["p"], 0.9 ** k, rtol=1e-6)


def test_two_steps_decrease_quadratic():
    with wide_precision():
        p = Parameter(np.array([3.0]))
        vel, f = {}, [9.0]
        for _ in range(2):
            p.grad = 2 * p.data
            sgd_momentum_step([("p", p)], vel, lr=0.1)
            f.append(float(p.data[0] ** 2))
    # scalar simulation: v1 = 6, p1 = 2.4; v2 = 0.9 * 6 + 4.8, p2 = 2.4 - 1.02
    assert f[1] == pytest.approx(2.4 ** 2) and f[2] == pytest.approx(1.38 ** 2)
    assert f[0] > f[1] > f[2]


def test_missing_gradient_is_contract_violation():
    with pytest.raises(ContractViolation):
        sgd_momentum_step([("p", Parameter(np.ones(2)))], {}, 0.1)


def _with_grads(*grads):
    ps = []
    for g in grads:
        p = Parameter(np.zeros(len(g)))
        p.grad = np.array(g, dtype=np.float64)
        ps.append(p)
    return ps


def test_clip_below_threshold_is_noop():
    ps = _with_grads([3.0], [4.0])
    assert clip_gradients(ps, 10) == 1.0
    assert ps[0].grad[0] == 3.0 and ps[1].grad[0] == 4.0


def test_clip_scales_to_threshold():
    ps = _with_grads([12.0, 0.0], [16.0])
    assert clip_gradients(ps, 10) == pytest.approx(0.5)
    norm = math.sqrt(sum(float((p.grad ** 2).sum()) for p in ps))
    assert norm == pytest.approx(10.0, abs=1e-6)


def test_clip_single_vector():
    (p,) = _with_grads([30.0, 40.0])
    clip_gradients([p], 10)
    np.testing.assert_allclose(p.grad, [6.0, 8.0])


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=8))
def test_clip_idempotent(values):
    (p,) = _with_grads(values)
    clip_gradients([p], 10)
    once = p.grad.copy()
    clip_gradients([p], 10)
    np.testing.assert_allclose(p.grad, once, rtol=1e-12)


# -- initialization ------------------------------------------------------------

def test_he_init_zero_biases_and_deterministic():
    a = he_init(build_model(ModelSpec("runet-dru", level=2)), 5)
    b = he_init(build_model(ModelSpec("runet-dru", level=2)), 5)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)
        if n.endswith("conv1.bias") or n.endswith("up.bias"):
            assert np.all(p.data == 0)


def test_he_init_variance():
    conv = Conv2d(64, 64, 3)
    he_init(conv, 0)
    target = 2 / (64 * 9)
    assert abs(conv.weight.data.var() / target - 1) < 0.15
    assert abs(conv.weight.data.mean()) < 0.01


# -- augmentation --------------------------------------------------------------

def test_forced_double_flip_is_identity(rng):
    img = rng.random((3, 8, 8)).astype(np.float32)
    msk = (rng.random((1, 8, 8)) < 0.5).astype(np.float32)
    i1, m1 = augment_pair(img, msk, rng, angle=0.0, flip=True)
    i2, m2 = augment_pair(i1, m1, rng, angle=0.0, flip=True)
    np.testing.assert_array_equal(i2, img)
    np.testing.assert_array_equal(m2, msk)
    assert not np.array_equal(i1, img)


def test_no_rotation_no_flip_is_identity(rng):
    img = rng.random((3, 8, 8)).astype(np.float32)
    msk = (rng.random((1, 8, 8)) < 0.5).astype(np.float32)
    i1, m1 = augment_pair(img, msk, rng, angle=0.0, flip=False)
    np.testing.assert_array_equal(i1, img)
    np.testing.assert_array_equal(m1, msk)


@given(st.integers(0, 100_000))
def test_centered_disk_area_stable_under_augmentation(seed):
    yy, xx = np.mgrid[:64, :64]
    disk = (((yy - 31.5) ** 2 + (xx - 31.5) ** 2) <= 14 ** 2)[None].astype(np.float32)
    img = np.repeat(disk, 3, axis=0)
    rng = np.random.default_rng(seed)
    i, m = augment_pair(img, disk, rng)
    assert set(np.unique(m)) <= {0.0, 1.0}
    assert abs(m.sum() - disk.sum()) < 0.2 * disk.sum()


def test_augmentation_shares_transform(rng):
    img = np.zeros((3, 16, 16), np.float32)
    msk = np.zeros((1, 16, 16), np.float32)
    img[:, 2:6, 3:9] = 1
    msk[:, 2:6, 3:9] = 1
    i, m = augment_pair(img, msk, np.random.default_rng(4))
    np.testing.assert_array_equal(i[0] >= 0.5, m[0] == 1)


# -- loop ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_data():
    pairs = [s.sample for s in generate_synthetic(3, 8, 32)]
    return pairs[:4], pairs[4:6]


def test_train_config_validates_lr():
    with pytest.raises(InvalidConfigError):
        TrainConfig(lr=1e-2)
    with pytest.raises(InvalidConfigError):
        TrainConfig(lr=1e-10)


def test_one_epoch_writes_log_and_checkpoints(tiny_data, tmp_path):
    tr, _ = tiny_data
    res = train(ModelSpec("unet-g"), TrainConfig(epochs=1, batch_size=2), tr[:2], tr[2:4], tmp_path)
    rows = list(csv.reader(open(tmp_path / "train_log.csv")))
    assert rows[0] == LOG_HEADER
    assert [r[1] for r in rows[1:]] == ["train", "val"]
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "last.ckpt").exists()
    assert math.isfinite(res.final_loss)


def test_fixed_batch_loss_decreases(tiny_data):
    tr, _ = tiny_data
    model = he_init(build_model(ModelSpec("runet-sru", steps=2)), 0)
    opt = SGD(model.named_parameters(), lr=1e-3)
    x, y = stack_batch(tr)
    losses = []
    for _ in range(20):
        loss, _ = multi_step_loss(model(x), y, 0.4)
        losses.append(loss.item())
        backward(loss)
        clip_gradients(model.parameters(), 10)
        opt.step()
        opt.zero_grad()
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_training_is_reproducible(tiny_data):
    tr, va = tiny_data
    cfg = TrainConfig(epochs=2, batch_size=2, seed=3)
    a = train(ModelSpec("rec-simple", steps=2), cfg, tr, va)
    b = train(ModelSpec("rec-simple", steps=2), cfg, tr, va)
    assert a.final_loss == b.final_loss
    for (_, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)


def test_non_finite_loss_aborts(tiny_data):
    tr, _ = tiny_data
    bad = SamplePair(np.full_like(tr[0].image, np.nan), tr[0].mask, "bad")
    with pytest.raises(DivergenceError):
        train(ModelSpec("unet-g"), TrainConfig(epochs=1, augment=False), [bad])


def test_empty_training_set_rejected():
    with pytest.raises(InvalidDataError):
        train(ModelSpec("unet-g"), TrainConfig(epochs=1), [])
