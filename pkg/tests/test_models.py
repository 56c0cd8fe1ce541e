import math

import numpy as np
import pytest

from mtlat.errors import CheckpointError, ShapeError
from mtlat.models import (OptimState, accuracy, adam_step, init_params, input_gradient, load_checkpoint,
                          loss_and_grad, param_shapes, predict, save_checkpoint)
from mtlat.tensor import grad_check


@pytest.mark.parametrize("arch", ["small-conv", "small-mlp"])
def test_param_shapes_match_init(arch):
    m = init_params(arch, (8, 8, 3), 6, seed=0)
    assert [(k, v.shape) for k, v in m.params.items()] == [(k, tuple(s)) for k, s in
                                                           param_shapes(arch, (8, 8, 3), 6)]


def test_rejects_single_class_and_bad_arch():
    with pytest.raises(ValueError):
        init_params("small-conv", (8, 8, 3), 1)
    with pytest.raises(ValueError):
        init_params("resnet", (8, 8, 3), 3)
    with pytest.raises(ShapeError):
        init_params("small-conv", (10, 10, 3), 3)


def test_zero_final_layer_gives_uniform_softmax(random_conv, rng):
    m = random_conv.copy()
    m.params["fc2_w"][:] = 0
    z = predict(m, rng.uniform(size=(3, 8, 8, 3)))
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    assert np.allclose(p, 1 / 5, atol=1e-15)


def test_batching_invariance(random_conv, rng):
    x = rng.uniform(size=(4, 8, 8, 3))
    single = predict(random_conv, x[2][None])
    assert np.array_equal(single, predict(random_conv, x[2:3]))
    # across batch sizes BLAS may reorder sums, so only rounding-level agreement is promised
    assert np.allclose(single[0], predict(random_conv, x)[2], rtol=0, atol=1e-12)


def test_predict_shape_error(random_conv):
    with pytest.raises(ShapeError):
        predict(random_conv, np.zeros((1, 8, 8, 1)))


def test_own_softmax_labels_give_zero_logit_gradient(random_conv, rng):
    x = rng.uniform(size=(3, 8, 8, 3))
    z = predict(random_conv, x)
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    # d loss / d logits = p - y = 0, so the logit-space gradient through dot_const is 0 too
    _, grads = loss_and_grad(random_conv, x, p)
    assert max(np.abs(g).max() for g in grads.values()) < 1e-9


def test_duplicated_sample_same_gradient(random_conv, rng):
    x = rng.uniform(size=(1, 8, 8, 3))
    y = np.eye(5)[[1]]
    l1, g1 = loss_and_grad(random_conv, x, y)
    l2, g2 = loss_and_grad(random_conv, np.repeat(x, 2, 0), np.repeat(y, 2, 0))
    assert l1 == pytest.approx(l2, abs=1e-14)
    for k in g1:
        assert np.allclose(g1[k], g2[k], rtol=0, atol=1e-14)


def test_unnormalized_labels_rejected(random_conv):
    with pytest.raises(ValueError):
        loss_and_grad(random_conv, np.zeros((1, 8, 8, 3)), np.array([[0.5, 0.4, 0, 0, 0]]))


@pytest.mark.parametrize("arch", ["small-conv", "small-mlp"])
def test_param_gradient_matches_finite_differences(arch, rng):
    model = init_params(arch, (8, 8, 3), 4, seed=5)
    x = rng.uniform(size=(3, 8, 8, 3))
    y = rng.dirichlet(np.ones(4), size=3)
    for name in ("fc1_w", "fc1_b") if arch == "small-mlp" else ("conv1_w", "conv2_b"):
        def f(flat, name=name):
            m = model.copy()
            m.params[name] = flat.reshape(model.params[name].shape)
            loss, g = loss_and_grad(m, x, y)
            return loss, g[name].reshape(-1)
        assert grad_check(f, model.params[name].reshape(-1), n_samples=40) < 1e-5


def test_logit_weight_objective(random_conv, rng):
    x = rng.uniform(size=(2, 8, 8, 3))
    w = rng.normal(size=(2, 5))
    obj, g, z = input_gradient(random_conv, x, logit_weights=w)
    assert obj == pytest.approx(float((z * w).sum()), rel=1e-12)

    def f(flat):
        o, gg, _ = input_gradient(random_conv, flat.reshape(x.shape), logit_weights=w)
        return o, gg.reshape(-1)
    assert grad_check(f, x.reshape(-1), n_samples=50) < 1e-5


# --------------------------------------------------------------------------

def _zero_grads(m):
    return {k: np.zeros_like(v) for k, v in m.params.items()}


def test_adam_zero_grad_no_decay_is_noop(random_conv):
    new = adam_step(random_conv, _zero_grads(random_conv), OptimState(weight_decay=0.0))
    for k in new.params:
        assert np.array_equal(new.params[k], random_conv.params[k])


def test_adam_zero_grad_decoupled_decay(random_conv):
    st = OptimState(lr=0.002, weight_decay=1e-4)
    new = adam_step(random_conv, _zero_grads(random_conv), st)
    for k in new.params:
        assert np.array_equal(new.params[k], random_conv.params[k] * (1 - 0.002 * 1e-4))


def _scalar_adam(g_seq, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Independent scalar reference written from the textbook recurrence."""
    p, m, v, out = 0.0, 0.0, 0.0, []
    for t, g in enumerate(g_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(p)
    return out


def test_adam_matches_scalar_oracle_and_step_tends_to_lr():
    model = init_params("small-mlp", (1, 1, 1), 2, seed=0)
    model.params = {k: np.zeros_like(v) for k, v in model.params.items()}
    st = OptimState(lr=0.01, weight_decay=0.0)
    gs = [0.3] * 500
    ref = _scalar_adam(gs, 0.01)
    traj = []
    for g in gs:
        model = adam_step(model, {k: np.full_like(v, g) for k, v in model.params.items()}, st)
        traj.append(model.params["fc1_b"][0])
    assert np.allclose(traj, ref, rtol=1e-12, atol=0)
    assert abs(traj[-1] - traj[-2]) == pytest.approx(0.01, rel=1e-6)


def test_lr_schedule_divides_by_ten():
    st = OptimState(lr=0.002, decay_epochs=(10, 20, 25))
    lrs = []
    for e in (0, 9, 10, 19, 20, 25, 29):
        st.epoch = e
        lrs.append(st.current_lr())
    assert lrs == pytest.approx([2e-3, 2e-3, 2e-4, 2e-4, 2e-5, 2e-6, 2e-6])


# --------------------------------------------------------------------------

def test_checkpoint_roundtrip_bit_identical(random_conv, tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(random_conv, p)
    m = load_checkpoint(p)
    assert m.arch == random_conv.arch and m.input_shape == random_conv.input_shape
    for k in m.params:
        assert m.params[k].tobytes() == random_conv.params[k].tobytes()


def test_checkpoint_preserves_accuracy(tiny_model, tiny_data, tmp_path):
    save_checkpoint(tiny_model, tmp_path / "m.ckpt")
    m = load_checkpoint(tmp_path / "m.ckpt")
    t = tiny_data.test
    assert accuracy(m, t.images, t.labels) == accuracy(tiny_model, t.images, t.labels)


@pytest.mark.parametrize("damage", ["magic", "version", "truncate", "trailing", "manifest"])
def test_checkpoint_corruption_detected(random_conv, tmp_path, damage):
    p = tmp_path / "m.ckpt"
    save_checkpoint(random_conv, p)
    raw = bytearray(p.read_bytes())
    if damage == "magic":
        raw[0:2] = b"XX"
    elif damage == "version":
        raw[8] = 9
    elif damage == "truncate":
        raw = raw[:-9]
    elif damage == "trailing":
        raw += b"\0"
    else:
        raw = raw.replace(b'"n_classes":5', b'"n_classes":6')
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
