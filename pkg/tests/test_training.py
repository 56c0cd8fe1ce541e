import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtlat import training
from mtlat.data import Split, one_hot
from mtlat.models import OptimState, init_params
from mtlat.training import (TrainRecipe, mixup_pair, smoothed_label, tlat_craft, tlat_label, train,
                            training_step)

unit = st.floats(0.0, 1.0, allow_nan=False)


def test_recipe_validation():
    for kw in ({"mode": "cutmix"}, {"alpha": 0.0}, {"eps_max": 1.0}, {"eps_max": -0.1}):
        with pytest.raises(ValueError):
            TrainRecipe(**kw)


def test_mixup_lambda_one_returns_first(rng):
    x_i, x_j = rng.uniform(size=(2, 4, 4, 3))
    y_i, y_j = np.eye(5)[1], np.eye(5)[3]
    x, y = mixup_pair(x_i, y_i, x_j, y_j, 1.0)
    assert np.array_equal(x, x_i) and np.array_equal(y, y_i)


def test_mixup_half():
    _, y = mixup_pair(np.zeros(2), np.eye(10)[2], np.ones(2), np.eye(10)[5], 0.5)
    expect = np.zeros(10)
    expect[[2, 5]] = 0.5
    assert np.array_equal(y, expect)


@given(unit)
@settings(max_examples=300, deadline=None)
def test_mixup_symmetry_bit_exact(lam):
    rng = np.random.default_rng(0)
    x_i, x_j = rng.uniform(size=(2, 3, 3, 3))
    y_i, y_j = rng.dirichlet(np.ones(4), size=2)
    a = mixup_pair(x_i, y_i, x_j, y_j, lam)
    b = mixup_pair(x_j, y_j, x_i, y_i, 1.0 - lam)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_tlat_label_arithmetic():
    y = tlat_label(np.eye(10)[2], np.eye(10)[5], 0.025)
    assert y[2] == 0.975 and y[5] == 0.025 and y.sum() == pytest.approx(1, abs=1e-15)


def test_tlat_eps_zero_unchanged(tiny_model, tiny_data):
    x = tiny_data.test.images[:4]
    y = one_hot(tiny_data.test.labels[:4], 4)
    t = one_hot((tiny_data.test.labels[:4] + 1) % 4, 4)
    x_adv, y_adv = tlat_craft(tiny_model, x, y, t, 0.0)
    assert np.array_equal(x_adv, x) and np.array_equal(y_adv, y)


def test_tlat_same_target_keeps_label_but_moves_image(tiny_model, tiny_data):
    x = tiny_data.test.images[:4]
    y = one_hot(tiny_data.test.labels[:4], 4)
    x_adv, y_adv = tlat_craft(tiny_model, x, y, y, 0.02)
    assert np.array_equal(y_adv, y)
    assert not np.array_equal(x_adv, x)


def test_ls_label():
    y = smoothed_label(np.eye(10)[3], 0.025)
    assert y[3] == pytest.approx(0.9775, abs=1e-15)
    assert np.allclose(np.delete(y, 3), 0.0025, atol=1e-15)
    assert y.sum() == pytest.approx(1.0, abs=1e-15)


def test_mtlat_label_decomposition(rng):
    for _ in range(200):
        n = int(rng.integers(3, 12))
        a, b, c = rng.choice(n, size=3, replace=False)
        lam, eps = rng.uniform(), rng.uniform(0, 0.025)
        _, y_mix = mixup_pair(np.zeros(1), np.eye(n)[a], np.zeros(1), np.eye(n)[b], lam)
        y = tlat_label(y_mix, np.eye(n)[c], eps)
        assert abs(y.sum() - 1) < 1e-12
        assert np.allclose(y[[a, b, c]], [(1 - eps) * lam, (1 - eps) * (1 - lam), eps], atol=1e-15)


def _batch(n, rng, classes=4):
    return Split(rng.uniform(size=(n, 8, 8, 3)), rng.integers(0, classes, size=n))


def test_lambda_and_eps_statistics(monkeypatch):
    rng = np.random.default_rng(0)
    lam1, lam2, _ = training._draw_mixup(rng, 0.4, 50_000, 0)
    lam = np.concatenate([lam1, lam2])
    assert abs(lam.mean() - 0.5) < 0.01
    # Beta(a, a) variance 1 / (4 (2a + 1))
    assert abs(lam.var() - 1 / (4 * 1.8)) < 0.005

    seen = []
    real = training.tlat_craft

    def spy(model, x, y, t, eps):
        seen.append(np.asarray(eps))
        return real(model, x, y, t, eps)

    monkeypatch.setattr(training, "tlat_craft", spy)
    model = init_params("small-mlp", (8, 8, 3), 4, seed=0)
    recipe = TrainRecipe(mode="m-tlat", eps_max=0.025, arch="small-mlp")
    r = np.random.default_rng(1)
    for _ in range(120):
        model, _ = training_step(model, OptimState(), _batch(1024, r), r, recipe)
    eps = np.concatenate(seen)
    assert eps.min() >= 0 and eps.max() <= 0.025
    assert len(eps) == 30_720
    assert abs(eps.mean() / 0.0125 - 1) < 0.01  # 1% is ~3 standard errors at this count


def test_mtlat_with_zero_eps_equals_mixup(rng):
    model = init_params("small-conv", (8, 8, 3), 4, seed=0)
    batch = _batch(22, rng)  # 5 quadruples and a tail of 2
    m1, s1 = training_step(model, OptimState(), batch, np.random.default_rng(5),
                           TrainRecipe(mode="m-tlat", eps_max=0.0))
    m2, s2 = training_step(model, OptimState(), batch, np.random.default_rng(5), TrainRecipe(mode="mixup"))
    assert (s1.loss1, s1.loss2) == (s2.loss1, s2.loss2)
    for k in m1.params:
        assert np.array_equal(m1.params[k], m2.params[k])


def test_attack_counts(rng):
    model = init_params("small-mlp", (8, 8, 3), 4, seed=0)
    batch = _batch(32, rng)
    _, s_m = training_step(model, OptimState(), batch, np.random.default_rng(0), TrainRecipe(mode="m-tlat"))
    _, s_i = training_step(model, OptimState(), batch, np.random.default_rng(0), TrainRecipe(mode="iat"))
    assert s_m.input_grads == 8 and s_i.input_grads == 16


def test_tail_pairs_train_without_error(rng):
    model = init_params("small-mlp", (8, 8, 3), 4, seed=0)
    for n in (4, 5, 7, 9):
        for mode in training.MODES:
            new, stats = training_step(model, OptimState(), _batch(n, rng), np.random.default_rng(0),
                                       TrainRecipe(mode=mode, arch="small-mlp"))
            assert np.isfinite(stats.loss1) and np.isfinite(stats.loss2)


def test_tlat_mode_is_per_sample_craft(monkeypatch, rng):
    model = init_params("small-conv", (8, 8, 3), 4, seed=2)
    batch = _batch(10, rng)
    captured = {}
    real_update = training._update

    def spy(m, s, parts):
        captured["parts"] = parts
        return real_update(m, s, parts)

    monkeypatch.setattr(training, "_update", spy)
    recipe = TrainRecipe(mode="tlat", eps_max=0.025)
    training_step(model, OptimState(), batch, np.random.default_rng(3), recipe)
    replay = np.random.default_rng(3)
    eps = replay.uniform(0.0, 0.025, size=5)
    targets = one_hot(replay.integers(0, 4, size=5), 4)
    y = one_hot(batch.labels, 4)
    x_adv, y_adv = captured["parts"][1]
    for k in range(5):
        xs, ys = tlat_craft(model, batch.images[5 + k:6 + k], y[5 + k:6 + k], targets[k:k + 1], eps[k:k + 1])
        assert np.array_equal(xs[0], x_adv[k]) and np.array_equal(ys[0], y_adv[k])
    assert np.array_equal(captured["parts"][0][0], batch.images[:5])


def test_train_deterministic_and_logged(tiny_data, tmp_path):
    recipe = TrainRecipe(mode="m-tlat", epochs=2, batch_size=32, seed=4)
    a = train(tiny_data, recipe, log_path=tmp_path / "log.jsonl")
    b = train(tiny_data, recipe)
    for k in a.model.params:
        assert np.array_equal(a.model.params[k], b.model.params[k])
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == 2 and '"loss2"' in lines[0]
    assert a.log[0].loss2 > 0
