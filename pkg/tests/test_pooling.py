import math

import numpy as np
import pytest

from lipsoc.pooling import (
    PiecewiseLinearManifold,
    angular_pool,
    angular_pool_array,
    clamp_theta,
    half_max_pool,
    half_max_pool_backward,
    inside_polygon,
    maxmin,
    maxmin_backward,
    polyline_distance_array,
    polyline_pool_backward,
    polyline_pool_layer,
    projection_pool_backward,
    projection_pool_layer,
    rearrange,
    rearrange_inverse,
    signed_polyline_distance_array,
)
from lipsoc.tensor import ShapeError
from oracles import central_difference, angular_case_oracle, naive_polyline_distance

SQUARE = PiecewiseLinearManifold([[-1, -1], [1, -1], [1, 1], [-1, 1]], closed=True)
ZIGZAG = PiecewiseLinearManifold([[-2, 0], [-1, 1], [0, -0.5], [1.5, 0.5], [2, -1]])


def wedge(theta, far=1e4):
    """The two rays at +-theta, as an open polyline through the origin."""
    up = far * np.array([math.cos(theta), math.sin(theta)])
    return PiecewiseLinearManifold([up, [0, 0], up * [1, -1]])


def test_rearrange_index_formula_and_inverse():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 6, 4))
    y = rearrange(x)
    assert y.shape == (12, 3, 2)
    for c, i, j, di, dj in [(0, 0, 0, 0, 0), (2, 1, 1, 1, 0), (1, 2, 0, 1, 1)]:
        assert y[4 * c + 2 * di + dj, i, j] == x[c, 2 * i + di, 2 * j + dj]
    assert np.array_equal(rearrange_inverse(y), x)
    xb = rng.standard_normal((2, 1, 4, 4))
    assert np.array_equal(rearrange(xb)[1], rearrange(xb[1]))
    with pytest.raises(ShapeError):
        rearrange(np.zeros((1, 3, 4)))


def test_maxmin_is_a_norm_preserving_permutation():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 4, 3, 3))
    y = maxmin(x)
    assert np.allclose(np.sort(y.ravel()), np.sort(x.ravel()))
    assert np.all(y[:, :2] >= y[:, 2:])
    g = rng.standard_normal(y.shape)
    fd = central_difference(lambda t: np.vdot(g, maxmin(t)), x)
    assert np.allclose(maxmin_backward(x, g), fd, atol=1e-6)
    with pytest.raises(ShapeError):
        maxmin(np.zeros((3, 2, 2)))


def test_half_max_pool():
    z = np.arange(8.0).reshape(4, 1, 2)[[0, 3, 2, 1]]
    assert np.array_equal(half_max_pool(z), np.maximum(z[:2], z[2:]))
    g = np.ones((2, 1, 2))
    back = half_max_pool_backward(z, g)
    assert back.sum() == 4.0 and back.shape == z.shape


@pytest.mark.parametrize("theta", [0.1, math.pi / 6, math.pi / 4, 1.3])
def test_angular_matches_case_oracle(theta):
    rng = np.random.default_rng(2)
    pts = rng.standard_normal((2000, 2)) * 3
    v, *_ = angular_pool_array(pts[:, 0], pts[:, 1], theta)
    expected = [angular_case_oracle(x, y, theta) for x, y in pts]
    assert np.allclose(v, expected, atol=1e-12)


@pytest.mark.parametrize("theta", [0.2, math.pi / 4, 1.2])
def test_angular_matches_polyline_oracle(theta):
    rng = np.random.default_rng(3)
    pts = rng.uniform(-5, 5, (1000, 2))
    v, *_ = angular_pool_array(pts[:, 0], pts[:, 1], theta, signed=False)
    oracle = [naive_polyline_distance(wedge(theta).vertices, p) for p in pts]
    assert np.allclose(v, oracle, atol=1e-6)
    # the signed variant is negative exactly inside the wedge
    signed, *_ = angular_pool_array(pts[:, 0], pts[:, 1], theta)
    inside = np.abs(np.arctan2(pts[:, 1], pts[:, 0])) < theta
    assert np.allclose(signed, np.where(inside, -v, v))


def test_angular_reference_values():
    t = math.pi / 4
    assert angular_pool(1.0, 0.0, t).value == pytest.approx(-math.sin(t))
    assert angular_pool(1.0, 0.0, t, signed=False).value == pytest.approx(math.sin(t))
    assert angular_pool(-1.0, 0.0, t).value == pytest.approx(1.0)
    assert angular_pool(0.0, 2.0, t).value == pytest.approx(2 * math.cos(t))
    assert angular_pool(0.0, 0.0, t).value == 0.0
    # on the upper ray itself
    assert angular_pool(math.cos(t), math.sin(t), t).value == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("theta", [0.0, -0.1, math.pi / 2, 2.0])
def test_theta_outside_open_interval_rejected(theta):
    with pytest.raises(ValueError, match="theta"):
        angular_pool(1.0, 1.0, theta)


def test_clamp_theta():
    assert 0 < clamp_theta(-3.0) < clamp_theta(10.0) < math.pi / 2
    assert clamp_theta(0.7) == 0.7


def _lipschitz_violations(fn, rng, pairs=20000, scale=3.0):
    p = rng.standard_normal((pairs, 2)) * scale
    q = p + rng.standard_normal((pairs, 2)) * rng.choice([1e-3, 0.1, 1.0, 5.0], (pairs, 1))
    return int(np.sum(np.abs(fn(p) - fn(q)) > np.linalg.norm(p - q, axis=1) + 1e-9))


def test_lipschitz_on_random_pairs():
    rng = np.random.default_rng(4)
    variants = {
        "angular": lambda P: angular_pool_array(P[:, 0], P[:, 1], 0.6)[0],
        "angular-unsigned": lambda P: angular_pool_array(P[:, 0], P[:, 1], 0.6, signed=False)[0],
        "polyline": lambda P: polyline_distance_array(ZIGZAG, P)[0],
        "signed": lambda P: signed_polyline_distance_array(SQUARE, P)[0],
        "half-max": lambda P: np.maximum(P[:, 0], P[:, 1]),
    }
    for name, fn in variants.items():
        assert _lipschitz_violations(fn, rng) == 0, name


def test_polyline_matches_oracle():
    rng = np.random.default_rng(5)
    pts = rng.uniform(-4, 4, (500, 2))
    for m in (ZIGZAG, SQUARE, PiecewiseLinearManifold([[0.5, -0.25]])):
        got, grads = polyline_distance_array(m, pts)
        want = [naive_polyline_distance(m.vertices, p, m.closed) for p in pts]
        assert np.allclose(got, want, atol=1e-12)
        assert np.all(np.linalg.norm(grads, axis=1) <= 1 + 1e-12)


def test_signed_distance_positive_inside():
    pts = np.array([[0.0, 0.0], [0.5, -0.3], [3.0, 0.0], [0.0, -2.0]])
    v, _ = signed_polyline_distance_array(SQUARE, pts)
    assert np.allclose(v, [1.0, 0.5, -2.0, -1.0])
    # grazing a vertex height must not flip the parity
    assert inside_polygon(SQUARE, np.array([[0.0, 1.0 - 1e-9], [5.0, 1.0]])).tolist() == [True, False]


def test_manifold_validation():
    with pytest.raises(ValueError):
        PiecewiseLinearManifold(np.zeros((0, 2)))
    with pytest.raises(ValueError, match="distinct"):
        PiecewiseLinearManifold([[0, 0], [0, 0], [1, 1]])
    with pytest.raises(ValueError):
        PiecewiseLinearManifold([[0, 0], [1, 0]], closed=True)
    bowtie = PiecewiseLinearManifold([[0, 0], [1, 1], [1, 0], [0, 1]], closed=True)
    assert not bowtie.is_simple()
    with pytest.raises(ValueError, match="self-intersecting"):
        signed_polyline_distance_array(bowtie, np.zeros((1, 2)))
    with pytest.raises(ValueError, match="closed"):
        signed_polyline_distance_array(ZIGZAG, np.zeros((1, 2)))


def test_projection_layer_gradients():
    rng = np.random.default_rng(6)
    z = rng.standard_normal((2, 4, 3, 3))
    g = rng.standard_normal((2, 2, 3, 3))
    for signed in (True, False):
        gz, gt = projection_pool_backward(z, 0.7, g, signed)
        fd = central_difference(lambda t: np.vdot(g, projection_pool_layer(t, 0.7, signed)), z)
        assert np.allclose(gz, fd, atol=1e-6)
        fdt = (np.vdot(g, projection_pool_layer(z, 0.7 + 1e-6, signed))
               - np.vdot(g, projection_pool_layer(z, 0.7 - 1e-6, signed))) / 2e-6
        assert gt == pytest.approx(fdt, rel=1e-6)


@pytest.mark.parametrize("manifold,signed", [(ZIGZAG, False), (SQUARE, True), (SQUARE, False)])
def test_polyline_layer_gradients(manifold, signed):
    rng = np.random.default_rng(7)
    z = rng.standard_normal((4, 3, 3)) * 2
    g = rng.standard_normal((2, 3, 3))
    gz, gv = polyline_pool_backward(z, manifold, g, signed)
    fd = central_difference(lambda t: np.vdot(g, polyline_pool_layer(t, manifold, signed)), z)
    assert np.allclose(gz, fd, atol=1e-6)

    def by_vertices(V):
        return np.vdot(g, polyline_pool_layer(z, PiecewiseLinearManifold(V, manifold.closed), signed))

    assert np.allclose(gv, central_difference(by_vertices, manifold.vertices), atol=1e-6)


def test_reference_examples():
    assert angular_pool(-2.0, 0.0, 0.7).value == 2.0
    assert projection_pool_layer(np.zeros((4, 2, 2)), 0.7).tolist() == np.zeros((2, 2, 2)).tolist()
    unit = PiecewiseLinearManifold([[0, 0], [1, 0], [1, 1], [0, 1]], closed=True)
    v, _ = signed_polyline_distance_array(unit, np.array([[0.5, 0.5], [2.0, 0.5]]))
    assert np.allclose(v, [0.5, -1.0])
    point = PiecewiseLinearManifold([[0.3, -0.4]])
    assert polyline_distance_array(point, np.zeros((1, 2)))[0][0] == pytest.approx(0.5)
    assert polyline_distance_array(ZIGZAG, np.array([[-1.5, 0.5]]))[0][0] == pytest.approx(0.0, abs=1e-15)
