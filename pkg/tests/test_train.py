import math

import numpy as np
import pytest

import lipsoc.train as train_mod
from lipsoc.bench import time_soc_layer
from lipsoc.certify import MlpHead
from lipsoc.data import SyntheticSpec, synthetic_dataset
from lipsoc.network import LipConvnetConfig, build_lipconvnet
from lipsoc.tensor import NonFiniteError
from lipsoc.train import (
    TrainConfig,
    cross_entropy,
    curvature_regularizer,
    robust_loss,
    pair_curvature,
    penultimate_pgd,
    sgd_train,
)
from lipsoc.verify import random_head
from oracles import central_difference


def tiny(head="mlp", pool="max", **kw):
    return LipConvnetConfig(**(dict(depth=5, base_channels=4, blocks=2, pool=pool, head=head, hidden=6,
                                    in_shape=(3, 8, 8), classes=2, k_train=5, k_eval=15) | kw))


def tiny_data(seed=0, count=64):
    return synthetic_dataset(SyntheticSpec(classes=2, shape=(3, 8, 8), count=count, seed=seed))


def test_cross_entropy_gradient():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((4, 3))
    y = np.array([0, 2, 1, 2])
    loss, g = cross_entropy(z, y)
    fd = central_difference(lambda t: cross_entropy(t, y)[0].sum(), z)
    assert np.allclose(g, fd, atol=1e-8)
    assert np.all(loss > 0)


def test_pgd_zero_radius_returns_start():
    rng = np.random.default_rng(1)
    head = random_head(rng, 4, 5, 3)
    y0 = rng.standard_normal((5, 4))
    assert np.array_equal(penultimate_pgd(head, y0, np.zeros(5, int), 0.0), y0)
    with pytest.raises(ValueError):
        penultimate_pgd(head, y0, np.zeros(5, int), -1.0)


def test_pgd_never_below_start_and_stays_in_ball():
    rng = np.random.default_rng(2)
    for _ in range(20):
        head = random_head(rng, 4, 5, 3)
        y0 = rng.standard_normal((8, 4))
        labels = rng.integers(0, 3, 8)
        rho = float(rng.uniform(0.01, 2.0))
        ys = penultimate_pgd(head, y0, labels, rho, steps=int(rng.integers(1, 8)))
        assert np.all(np.linalg.norm(ys - y0, axis=1) <= rho * (1 + 1e-12))
        assert np.all(cross_entropy(head(ys), labels)[0] >= cross_entropy(head(y0), labels)[0])


def test_pgd_linear_head_closed_form():
    net = build_lipconvnet(tiny(head="linear", classes=3))
    W, b = net.head.weight(), net.head.params["b"]
    rng = np.random.default_rng(3)
    y0 = rng.standard_normal((6, net.feature_dim))
    labels = rng.integers(0, 3, 6)
    rho = 0.3
    _, g = cross_entropy(y0 @ W.T + b, labels)
    grad = g @ W
    expected = y0 + rho * grad / np.linalg.norm(grad, axis=1, keepdims=True)
    got = penultimate_pgd(net.head, y0, labels, rho, steps=1, step_size=rho)
    assert np.allclose(got, expected, atol=1e-6)


def test_plain_loss_gradients_match_finite_differences():
    net = build_lipconvnet(tiny(), seed=1)
    net.set_exact_grad(True)
    data = tiny_data(count=4)
    robust_loss(net, data.images, data.labels, rho=0.0, gamma=0.0)
    grads = {k: v.copy() for k, v in net.gradients().items()}
    rng = np.random.default_rng(4)
    for name, p in net.parameters().items():
        idx = tuple(int(rng.integers(0, s)) for s in p.shape)

        def f(val):
            old = p[idx]
            p[idx] = val
            net.after_update()
            # training mode, so the series length matches the gradient's
            out = robust_loss(net, data.images, data.labels, 0.0, 0.0).total
            p[idx] = old
            net.after_update()
            return out

        fd = (f(p[idx] + 1e-6) - f(p[idx] - 1e-6)) / 2e-6
        assert abs(fd - grads[name][idx]) <= 1e-5 * max(1.0, abs(fd)), name


def test_regularizer_gradients():
    rng = np.random.default_rng(5)
    head = random_head(rng, 3, 5, 3)
    logits = rng.standard_normal((7, 3))

    def reg(W1, W2):
        return curvature_regularizer(MlpHead(W1, head.b1, W2, head.b2), logits)[0]

    _, gW1, gW2 = curvature_regularizer(head, logits)
    assert np.allclose(gW1, central_difference(lambda w: reg(w, head.W2), head.W1), atol=1e-6)
    assert np.allclose(gW2, central_difference(lambda w: reg(head.W1, w), head.W2), atol=1e-6)
    k, _, _ = pair_curvature(head, 0, 1)
    assert k >= 0


def test_regularizer_zero_for_linear_head_and_linear_in_gamma():
    data = tiny_data(count=6)
    lin = build_lipconvnet(tiny(head="linear"))
    assert robust_loss(lin, data.images, data.labels, 0.1, 3.0, backward=False).reg == 0.0
    mlp = build_lipconvnet(tiny())
    one = robust_loss(mlp, data.images, data.labels, 0.1, 0.5, backward=False)
    two = robust_loss(mlp, data.images, data.labels, 0.1, 1.0, backward=False)
    assert one.reg > 0 and two.reg == 2 * one.reg
    assert two.ce == one.ce


def test_identity_map_matches_plain_gradient_when_pgd_idle():
    data = tiny_data(count=4)
    net = build_lipconvnet(tiny(), seed=2)
    robust_loss(net, data.images, data.labels, rho=0.5, gamma=0.0, pgd_steps=0)
    a = {k: v.copy() for k, v in net.gradients().items()}
    robust_loss(net, data.images, data.labels, rho=0.0, gamma=0.0)
    b = net.gradients()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_schedule_and_validation():
    cfg = TrainConfig(lr=0.1, drop_epochs=(2, 4))
    assert [cfg.lr_at(e) for e in (0, 1, 2, 4)] == pytest.approx([0.1, 0.1, 0.01, 0.001])
    for bad in (dict(rho=-1), dict(gamma=-0.1), dict(epochs=0), dict(k_train=6, k_eval=5)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_one_epoch_reduces_loss_on_most_seeds():
    wins = 0
    for seed in range(10):
        net = build_lipconvnet(tiny(head="linear"), seed=seed)
        res = sgd_train(net, tiny_data(seed), TrainConfig(epochs=1, lr=0.02, seed=seed, batch_size=16))
        wins += res.final_loss < res.initial_loss
    assert wins >= 8


def test_training_is_deterministic():
    outs = []
    for _ in range(2):
        net = build_lipconvnet(tiny(), seed=3)
        sgd_train(net, tiny_data(1, 32), TrainConfig(epochs=2, lr=0.02, seed=3, batch_size=16))
        outs.append(net.parameters())
    assert all(np.array_equal(outs[0][k], outs[1][k]) for k in outs[0])


def test_divergence_restores_last_good_parameters(monkeypatch):
    net = build_lipconvnet(tiny(), seed=4)
    calls = {"n": 0}
    real = train_mod.robust_loss

    def flaky(*args, **kw):
        if kw.get("backward", True):
            calls["n"] += 1
            if calls["n"] == 3:
                raise NonFiniteError("non-finite loss (ce=nan, reg=0)")
        return real(*args, **kw)

    monkeypatch.setattr(train_mod, "robust_loss", flaky)
    before = {}

    def snapshot(*_):
        before.update({k: v.copy() for k, v in net.parameters().items()})

    res = sgd_train(net, tiny_data(count=64), TrainConfig(epochs=3, lr=0.02, batch_size=32), log=snapshot)
    assert res.diverged and "epoch 2" in res.message
    assert all(np.array_equal(before[k], v) for k, v in net.parameters().items())
    assert math.isnan(res.final_loss)


def test_mismatched_dataset_rejected():
    net = build_lipconvnet(tiny())
    data = synthetic_dataset(SyntheticSpec(shape=(3, 4, 4), count=4))
    with pytest.raises(ValueError, match="shape"):
        sgd_train(net, data, TrainConfig(epochs=1))


def test_fast_weight_gradient_at_least_twice_as_fast_at_k10():
    t = time_soc_layer(channels=4, spatial=16, k=10, batch=8, reps=15, warmup=3)
    assert np.median(t["weight_grad_exact"]) >= 2 * np.median(t["weight_grad_fast"])
