"""Norm-preserving reshuffles, MaxMin and 1-Lipschitz pooling layers.

Projection pooling maps each pair ``(x, y)`` (first channel half, second
channel half) to its distance from a 2-D curve.  Distance functions are
1-Lipschitz for any curve; for a closed simple curve the distance may be
signed (positive inside) without losing that property.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError

THETA_MIN = 0.05
THETA_MAX = math.pi / 2 - 0.05
GRAZE = 1e-12


def _channel_axis(x: np.ndarray) -> int:
    if x.ndim < 3:
        raise ShapeError(f"expected (C, H, W) or (B, C, H, W), got shape {x.shape}")
    return x.ndim - 3


# -- rearrangement -------------------------------------------------------

def rearrange(x: np.ndarray) -> np.ndarray:
    """Space-to-depth: ``out[4c + 2di + dj, i, j] = x[c, 2i + di, 2j + dj]``."""
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ShapeError(f"rearrange needs even spatial extents, got {x.shape[-2:]}")
    *lead, c, h, w = x.shape
    y = x.reshape(*lead, c, h // 2, 2, w // 2, 2)
    nl = len(lead)
    y = y.transpose(*range(nl), nl, nl + 2, nl + 4, nl + 1, nl + 3)
    return np.ascontiguousarray(y.reshape(*lead, 4 * c, h // 2, w // 2))


def rearrange_inverse(x: np.ndarray) -> np.ndarray:
    *lead, c4, h, w = x.shape
    if c4 % 4:
        raise ShapeError(f"inverse rearrange needs channels divisible by 4, got {c4}")
    nl = len(lead)
    y = x.reshape(*lead, c4 // 4, 2, 2, h, w)
    y = y.transpose(*range(nl), nl, nl + 3, nl + 1, nl + 4, nl + 2)
    return np.ascontiguousarray(y.reshape(*lead, c4 // 4, 2 * h, 2 * w))


# -- MaxMin and max-of-halves ----------------------------------------------

def _halves(x: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray, int]:
    ax = _channel_axis(x)
    c = x.shape[ax]
    if c % 2:
        raise ShapeError(f"{what} needs an even channel count, got {c}")
    a, b = np.split(x, 2, axis=ax)
    return a, b, ax


def maxmin(x: np.ndarray) -> np.ndarray:
    """Replace each channel pair ``(c, c + C/2)`` by ``(max, min)``."""
    a, b, ax = _halves(x, "maxmin")
    return np.concatenate([np.maximum(a, b), np.minimum(a, b)], axis=ax)


def maxmin_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    a, b, ax = _halves(x, "maxmin")
    ga, gb = np.split(grad, 2, axis=ax)
    first = a >= b
    return np.concatenate([np.where(first, ga, gb), np.where(first, gb, ga)], axis=ax)


def half_max_pool(z: np.ndarray) -> np.ndarray:
    a, b, _ = _halves(z, "half_max_pool")
    return np.maximum(a, b)


def half_max_pool_backward(z: np.ndarray, grad: np.ndarray) -> np.ndarray:
    a, b, ax = _halves(z, "half_max_pool")
    first = a >= b
    return np.concatenate([np.where(first, grad, 0.0), np.where(first, 0.0, grad)], axis=ax)


# -- angular projection pooling ---------------------------------------------

@dataclass
class PoolOutcome:
    value: float
    gradient: np.ndarray
    theta_gradient: float = 0.0


def _check_theta(theta: float) -> None:
    if not 0.0 < theta < math.pi / 2:
        raise ValueError(f"theta must lie in (0, pi/2), got {theta}")


def angular_pool_array(x: np.ndarray, y: np.ndarray, theta: float, signed: bool = True):
    """Distance of ``(x, y)`` to the two rays at angles ``+theta`` and ``-theta``.

    Returns ``(value, d/dx, d/dy, d/dtheta)``.  Inside the wedge
    ``|angle| < theta`` the value is negative unless ``signed`` is False.
    Region boundaries take the first applicable case: upper ray, lower ray,
    origin.
    """
    _check_theta(theta)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ct, st = math.cos(theta), math.sin(theta)
    alpha = np.arctan2(y, x)
    r = np.hypot(x, y)
    upper = (alpha >= 0) & (alpha <= theta + math.pi / 2)
    lower = ~upper & (alpha < 0) & (-alpha <= theta + math.pi / 2)
    far = ~(upper | lower)

    value = np.where(upper, y * ct - x * st, np.where(lower, -(y * ct + x * st), r))
    safe_r = np.where(r > 0, r, 1.0)
    gx = np.where(far, x / safe_r, -st)
    gy = np.where(upper, ct, np.where(lower, -ct, y / safe_r))
    gt = np.where(upper, -y * st - x * ct, np.where(lower, y * st - x * ct, 0.0))
    if not signed:
        sign = np.where(value < 0, -1.0, 1.0)
        value, gx, gy, gt = value * sign, gx * sign, gy * sign, gt * sign
    return value, gx, gy, gt


def angular_pool(x: float, y: float, theta: float, signed: bool = True) -> PoolOutcome:
    v, gx, gy, gt = angular_pool_array(np.array(x), np.array(y), theta, signed)
    return PoolOutcome(float(v), np.array([float(gx), float(gy)]), float(gt))


def projection_pool_layer(z: np.ndarray, theta: float, signed: bool = True) -> np.ndarray:
    a, b, _ = _halves(z, "projection pooling")
    return angular_pool_array(a, b, theta, signed)[0]


def projection_pool_backward(z: np.ndarray, theta: float, grad: np.ndarray, signed: bool = True):
    """Returns ``(grad_z, grad_theta)``; the theta gradient is a plain sum."""
    a, b, ax = _halves(z, "projection pooling")
    _, gx, gy, gt = angular_pool_array(a, b, theta, signed)
    grad_z = np.concatenate([grad * gx, grad * gy], axis=ax)
    return grad_z, float(np.sum(grad * gt))


# -- piecewise linear curves ----------------------------------------------

def _segments_intersect(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if abs(v) < 1e-15 else (1 if v > 0 else -1)

    def on_seg(a, b, c):
        return (min(a[0], b[0]) - 1e-15 <= c[0] <= max(a[0], b[0]) + 1e-15
                and min(a[1], b[1]) - 1e-15 <= c[1] <= max(a[1], b[1]) + 1e-15)

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    return ((o1 == 0 and on_seg(p1, p2, q1)) or (o2 == 0 and on_seg(p1, p2, q2))
            or (o3 == 0 and on_seg(q1, q2, p1)) or (o4 == 0 and on_seg(q1, q2, p2)))


@dataclass
class PiecewiseLinearManifold:
    """Open or closed 2-D polyline; a single vertex is a point manifold."""

    vertices: np.ndarray
    closed: bool = False
    _segs: tuple = field(init=False, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 2)
        v = self.vertices
        if len(v) == 0:
            raise ValueError("manifold needs at least one vertex")
        if len(v) > 1 and np.any(np.all(np.diff(v, axis=0) == 0, axis=1)):
            raise ValueError("consecutive vertices must be distinct")
        if self.closed:
            if len(v) < 3:
                raise ValueError("a closed polyline needs at least 3 vertices")
            if np.all(v[0] == v[-1]):
                raise ValueError("closed polylines are implicit; do not repeat the first vertex")
        self._segs = self._segments()

    def _segments(self):
        v = self.vertices
        if len(v) == 1:
            return v, v
        a = v if self.closed else v[:-1]
        b = np.roll(v, -1, axis=0) if self.closed else v[1:]
        return a, b

    @property
    def segments(self) -> tuple[np.ndarray, np.ndarray]:
        return self._segs

    def is_simple(self) -> bool:
        a, b = self._segs
        n = len(a)
        for i in range(n):
            for j in range(i + 1, n):
                adjacent = j == i + 1 or (self.closed and i == 0 and j == n - 1)
                if adjacent:
                    # shared endpoint only; reject folding back along the same line
                    d1, d2 = b[i] - a[i], b[j] - a[j]
                    cross = d1[0] * d2[1] - d1[1] * d2[0]
                    if abs(cross) < 1e-15 and np.dot(d1, d2) < 0:
                        return False
                    continue
                if _segments_intersect(a[i], b[i], a[j], b[j]):
                    return False
        return True


def _nearest(manifold: PiecewiseLinearManifold, pts: np.ndarray):
    """Per point: distance, nearest point, segment index and segment parameter."""
    a, b = manifold.segments
    d = b - a
    len2 = np.einsum("ij,ij->i", d, d)
    rel = pts[:, None, :] - a[None, :, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(len2 > 0, np.einsum("psj,sj->ps", rel, d) / np.where(len2 > 0, len2, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    proj = a[None] + t[..., None] * d[None]
    dist = np.linalg.norm(pts[:, None, :] - proj, axis=-1)
    idx = np.argmin(dist, axis=1)
    rows = np.arange(len(pts))
    return dist[rows, idx], proj[rows, idx], idx, t[rows, idx]


def polyline_distance_array(manifold: PiecewiseLinearManifold, pts: np.ndarray):
    """Vectorised unsigned distance; returns ``(values, gradients)``."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    dist, near, _, _ = _nearest(manifold, pts)
    diff = pts - near
    safe = np.where(dist > 0, dist, 1.0)
    grad = np.where(dist[:, None] > 0, diff / safe[:, None], 0.0)
    return dist, grad


def polyline_distance(manifold: PiecewiseLinearManifold, p) -> PoolOutcome:
    v, g = polyline_distance_array(manifold, np.asarray(p, dtype=np.float64)[None])
    return PoolOutcome(float(v[0]), g[0])


def inside_polygon(manifold: PiecewiseLinearManifold, pts: np.ndarray) -> np.ndarray:
    """Even-odd test with a horizontal ray towards +x."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    a, b = manifold.segments
    px = pts[:, 0][:, None]
    py = pts[:, 1][:, None]
    grazing = np.any(py == manifold.vertices[None, :, 1], axis=1, keepdims=True)
    py = np.where(grazing, py + GRAZE, py)
    ay, by = a[None, :, 1], b[None, :, 1]
    straddle = (ay > py) != (by > py)
    with np.errstate(invalid="ignore", divide="ignore"):
        xint = a[None, :, 0] + (py - ay) * (b[None, :, 0] - a[None, :, 0]) / (by - ay)
    crossings = np.sum(straddle & (px < xint), axis=1)
    return crossings % 2 == 1


def signed_polyline_distance_array(manifold: PiecewiseLinearManifold, pts: np.ndarray):
    if not manifold.closed:
        raise ValueError("signed distance needs a closed polyline")
    if not manifold.is_simple():
        raise ValueError("signed distance needs a non-self-intersecting polyline")
    dist, grad = polyline_distance_array(manifold, pts)
    sign = np.where(inside_polygon(manifold, pts), 1.0, -1.0)
    return dist * sign, grad * sign[:, None]


def signed_polyline_distance(manifold: PiecewiseLinearManifold, p) -> PoolOutcome:
    v, g = signed_polyline_distance_array(manifold, np.asarray(p, dtype=np.float64)[None])
    return PoolOutcome(float(v[0]), g[0])


def polyline_pool_layer(z: np.ndarray, manifold: PiecewiseLinearManifold, signed: bool = False):
    a, b, _ = _halves(z, "polyline pooling")
    pts = np.stack([a.ravel(), b.ravel()], axis=1)
    fn = signed_polyline_distance_array if signed else polyline_distance_array
    vals, _ = fn(manifold, pts)
    return vals.reshape(a.shape)


def polyline_pool_backward(z: np.ndarray, manifold: PiecewiseLinearManifold,
                           grad: np.ndarray, signed: bool = False):
    """Returns ``(grad_z, grad_vertices)``.

    Moving the nearest point ``a + t (b - a)`` changes the distance by
    ``-(1 - t) n`` per unit of ``a`` and ``-t n`` per unit of ``b``, ``n`` the
    unit vector from the curve to the point.
    """
    a, b, ax = _halves(z, "polyline pooling")
    pts = np.stack([a.ravel(), b.ravel()], axis=1)
    dist, near, idx, t = _nearest(manifold, pts)
    diff = pts - near
    safe = np.where(dist > 0, dist, 1.0)
    unit = np.where(dist[:, None] > 0, diff / safe[:, None], 0.0)
    if signed:
        unit = unit * np.where(inside_polygon(manifold, pts), 1.0, -1.0)[:, None]
    g = grad.ravel()
    grad_z = np.concatenate([(g * unit[:, 0]).reshape(a.shape),
                             (g * unit[:, 1]).reshape(a.shape)], axis=ax)
    nv = len(manifold.vertices)
    gv = np.zeros((nv, 2))
    if nv > 1:
        start = idx
        end = (idx + 1) % nv
        np.add.at(gv, start, -(g * (1 - t))[:, None] * unit)
        np.add.at(gv, end, -(g * t)[:, None] * unit)
    else:
        np.add.at(gv, np.zeros(len(g), dtype=int), -g[:, None] * unit)
    return grad_z, gv


def clamp_theta(theta: float) -> float:
    return min(max(theta, THETA_MIN), THETA_MAX)
