import numpy as np
import pytest

from lipsoc.network import LipConvnetConfig, build_lipconvnet, shape_trace
from lipsoc.tensor import ShapeError


def small(pool="max", head="linear", depth=5, **kw):
    base = dict(depth=depth, base_channels=4, blocks=2, pool=pool, head=head, hidden=6,
                in_shape=(3, 8, 8), classes=3, k_train=12, k_eval=12)
    return LipConvnetConfig(**(base | kw))


def test_full_size_shape_trace():
    net = build_lipconvnet(LipConvnetConfig(depth=5, base_channels=32, blocks=5, k_train=2, k_eval=2))
    trace = shape_trace(net)
    assert trace[0] == ("pad", (32, 32, 32))
    assert trace[-1] == ("flatten", (1024,))
    assert [s for name, s in trace if name == "rearrange"][0] == (128, 16, 16)
    assert len(net.soc_layers()) == 6


def test_depth_controls_conv_count():
    for depth, blocks, count in [(5, 2, 3), (10, 5, 11), (15, 2, 7)]:
        cfg = small(depth=depth, blocks=blocks, in_shape=(3, 32, 32))
        assert cfg.conv_layers == count
        assert len(build_lipconvnet(cfg).soc_layers()) == count


@pytest.mark.parametrize("bad", [dict(depth=7), dict(pool="avg"), dict(head="deep"), dict(kernel=4),
                                 dict(in_shape=(3, 6, 6)), dict(in_shape=(5, 8, 8))])
def test_config_validation(bad):
    with pytest.raises((ValueError, ShapeError)):
        small(**bad)


def test_kernel_shrinks_at_tiny_extent():
    net = build_lipconvnet(small(blocks=3, kernel=3))
    last = net.soc_layers()[-1]
    assert last.spatial == 1 and last.soc.free.shape[-1] == 1


def _loss_and_grads(net, x, G):
    net.zero_grad()
    out = net.logits(x, train=True)
    net.backward_features(net.head.backward(G))
    return float(np.sum(G * out)), net.gradients()


@pytest.mark.parametrize("pool", ["max", "angular", "polyline"])
@pytest.mark.parametrize("head", ["linear", "mlp"])
def test_parameter_gradients_match_finite_differences(pool, head):
    net = build_lipconvnet(small(pool, head), seed=1)
    net.set_exact_grad(True)
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(2, 3, 8, 8))
    G = rng.standard_normal((2, 3))
    _, grads = _loss_and_grads(net, x, G)
    params = net.parameters()
    h = 1e-6
    for name, p in params.items():
        for _ in range(2):
            idx = tuple(int(rng.integers(0, s)) for s in p.shape)
            old = p[idx]
            p[idx] = old + h
            net.after_update()
            fp = float(np.sum(G * net.logits(x, train=True)))
            p[idx] = old - h
            net.after_update()
            fm = float(np.sum(G * net.logits(x, train=True)))
            p[idx] = old
            net.after_update()
            fd = (fp - fm) / (2 * h)
            assert abs(fd - grads[name][idx]) <= 1e-5 * max(1.0, abs(fd)), name


def test_input_gradient_matches_finite_differences():
    net = build_lipconvnet(small("angular", "mlp"), seed=2)
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(3, 8, 8))
    G = rng.standard_normal(3)
    g = net.input_gradient(x, G[None])[0]
    for _ in range(10):
        idx = tuple(int(rng.integers(0, s)) for s in x.shape)
        e = np.zeros_like(x)
        e[idx] = 1e-6
        fd = (G @ net.logits(x + e)[0] - G @ net.logits(x - e)[0]) / 2e-6
        assert g[idx] == pytest.approx(fd, abs=1e-6)


@pytest.mark.parametrize("pool", ["max", "angular", "polyline"])
def test_feature_map_is_one_lipschitz(pool):
    net = build_lipconvnet(small(pool, k_train=5, k_eval=15), seed=3)
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(50, 3, 8, 8))
    xp = x + rng.standard_normal(x.shape) * rng.choice([1e-3, 0.1, 1.0], (50, 1, 1, 1))
    dy = np.linalg.norm((net.features(x) - net.features(xp)).reshape(50, -1), axis=1)
    dx = np.linalg.norm((x - xp).reshape(50, -1), axis=1)
    assert np.all(dy <= dx * (1 + 1e-6))


def test_cap_bounds_operator_norm():
    net = build_lipconvnet(small(), seed=4)
    layer = net.soc_layers()[0]
    layer.params["free"] *= 5.0
    layer.sync()
    assert layer.operator_norm() > 4.0
    for _ in range(20):
        net.cap_operator_norms(1.0)
    assert layer.operator_norm() <= 1.0 + 1e-3


def test_load_parameters_round_trip():
    a = build_lipconvnet(small(head="mlp"), seed=5)
    b = build_lipconvnet(small(head="mlp"), seed=6)
    x = np.random.default_rng(3).uniform(size=(2, 3, 8, 8))
    assert not np.allclose(a(x), b(x))
    b.load_parameters({k: v.copy() for k, v in a.parameters().items()})
    assert np.array_equal(a(x), b(x))
    with pytest.raises(KeyError):
        b.load_parameters({})
    with pytest.raises(TypeError):
        build_lipconvnet(small()).mlp_head()
