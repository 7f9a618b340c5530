"""Invariant suites behind ``lipsoc verify``.

Each suite returns a list of :class:`Check` records; a suite passes when
every check passes.  ``corrupt_skew`` symmetrizes the SOC filters instead of
skew-symmetrizing them, a negative control that must fail the orthogonality
checks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import pooling
from .certify import MlpHead, crc_binary_certificate, curvature_bound, softplus
from .soc import (
    SocLayer,
    approximation_error_bound,
    orthogonality_residual_bound,
)
from .tensor import (
    conv2d,
    conv2d_transpose,
    materialize_jacobian,
    spectral_norm_power_method,
    transpose_filter,
)

SUITES = ("tensor", "soc", "pooling", "certify")


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def _dense_layer(rng, n, norm, k, corrupt=False):
    P = rng.standard_normal((n, n))
    layer = SocLayer(P, k_train=min(k, 5), k_eval=k)
    if corrupt:
        layer.operator = P + P.T
    scale = norm / max(np.linalg.norm(layer.operator, 2), 1e-300)
    layer.set_free(P * scale)
    if corrupt:
        layer.operator = (P + P.T) * scale
    return layer


def _conv_layer(rng, c, norm, k, spatial, corrupt=False):
    free = rng.standard_normal((c, c, 3, 3))
    layer = SocLayer(free, k_train=min(k, 5), k_eval=k)
    if corrupt:
        layer.operator = free + transpose_filter(free)
    J = materialize_jacobian(layer.operator, spatial)
    scale = norm / max(np.linalg.norm(J, 2), 1e-300)
    layer.set_free(free * scale)
    if corrupt:
        layer.operator = (free + transpose_filter(free)) * scale
    return layer


def layer_jacobian(layer: SocLayer, k: int, shape) -> np.ndarray:
    dim = int(np.prod(shape))
    basis = np.eye(dim).reshape((dim,) + tuple(shape))
    return layer.jvp(basis, k).reshape(dim, dim).T


# -- suites -------------------------------------------------------------------

def suite_tensor(rng, **_) -> list[Check]:
    worst = 0.0
    for _ in range(200):
        p, q = rng.integers(1, 4, size=2)
        n = int(rng.integers(2, 6))
        W = rng.standard_normal((p, q, 3, 3))
        x = rng.standard_normal((q, n, n))
        y = rng.standard_normal((p, n, n))
        lhs = np.vdot(conv2d(W, x), y)
        rhs = np.vdot(x, conv2d_transpose(W, y))
        worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs)))
    out = [Check("conv adjoint identity", worst <= 1e-12, f"max rel gap {worst:.2e} over 200")]
    W = rng.standard_normal((2, 3, 3, 3))
    M = materialize_jacobian(W, 4)
    probe = max(float(np.max(np.abs(M[:, j] - conv2d(W, e.reshape(3, 4, 4)).ravel())))
                for j, e in enumerate(np.eye(48)))
    out.append(Check("jacobian basis probes", probe == 0.0, f"max gap {probe:.1e}"))
    A = rng.standard_normal((8, 8))
    res = spectral_norm_power_method(lambda v: A @ v, lambda v: A.T @ v, (8,), iters=500, tol=1e-15)
    sv = np.linalg.svd(A, compute_uv=False)[0]
    hist = np.asarray(res.history)
    mono = bool(np.all(np.diff(hist) >= -1e-12 * sv)) and hist.max() <= sv * (1 + 1e-12)
    out.append(Check("power method vs SVD", abs(res.sigma - sv) <= 1e-6 and mono,
                     f"estimate {res.sigma:.9f}, svd {sv:.9f}, monotone {mono}"))
    return out


def suite_soc(rng, corrupt_skew: bool = False, **_) -> list[Check]:
    out = []
    worst_ratio = 0.0
    for n in (2, 4, 8, 16):
        for norm in (0.25, 0.5, 1.0):
            layer = _dense_layer(rng, n, norm, 15, corrupt_skew)
            J = layer_jacobian(layer, 15, (n,))
            resid = np.linalg.norm(J.T @ J - np.eye(n))
            bound = orthogonality_residual_bound(norm, 15, n) + 1e-12
            worst_ratio = max(worst_ratio, resid / bound)
    out.append(Check("dense orthogonality (k=15)", worst_ratio <= 1.0,
                     f"max residual / bound {worst_ratio:.3g}"))
    worst = 0.0
    for _ in range(3):
        layer = _conv_layer(rng, 2, 1.0, 15, 6, corrupt_skew)
        J = layer_jacobian(layer, 15, (2, 6, 6))
        worst = max(worst, float(np.linalg.norm(J.T @ J - np.eye(72))))
    out.append(Check("conv orthogonality 2x6x6 (k=15)", worst <= 1e-5, f"max residual {worst:.2e}"))
    if not corrupt_skew:
        M = materialize_jacobian(_conv_layer(rng, 3, 1.0, 15, 5).operator, 5)
        skew = float(np.max(np.abs(M + M.T)))
        out.append(Check("skew filter jacobian", skew <= 1e-12, f"max |M + M^T| {skew:.1e}"))
    out.append(_gradient_check(rng))
    out.append(_fast_bound_check(rng))
    return out


def _gradient_check(rng) -> Check:
    worst = 0.0
    for conv in (False, True):
        layer = _conv_layer(rng, 2, 0.8, 6, 4) if conv else _dense_layer(rng, 5, 0.8, 6)
        shape = (2, 4, 4) if conv else (5,)
        x = rng.standard_normal(shape)
        g = rng.standard_normal(shape)
        analytic = layer.weight_grad_exact(x, g, 6)
        free = layer.free.copy()
        fd = np.zeros_like(free)
        for idx in np.ndindex(free.shape):
            for sgn in (1, -1):
                pert = free.copy()
                pert[idx] += sgn * 1e-6
                layer.set_free(pert)
                fd[idx] += sgn * np.vdot(g, layer.forward(x, 6))
        fd /= 2e-6
        layer.set_free(free)
        worst = max(worst, float(np.linalg.norm(fd - analytic) / np.linalg.norm(fd)))
    return Check("exact weight gradient vs finite differences", worst <= 1e-6, f"max rel error {worst:.2e}")


def _fast_bound_check(rng) -> Check:
    violations, worst = 0, 0.0
    for _ in range(20):
        layer = _dense_layer(rng, 6, float(rng.uniform(0.05, 1.0)), 15)
        x = rng.standard_normal(6)
        x /= np.linalg.norm(x)
        g = rng.standard_normal(6)
        g /= np.linalg.norm(g)
        layer.forward(x, 15, train=True)
        layer.input_grad(g, 15)
        fast = layer.weight_grad_fast()
        exact = layer.weight_grad_exact(x, g, 15)
        err = float(np.linalg.norm(fast - exact))
        violations += err > approximation_error_bound(layer.operator, 15, x, g) * (1 + 1e-9) + 1e-15
        worst = max(worst, err / np.linalg.norm(exact))
    return Check("fast gradient within error bound", violations == 0 and worst <= 5e-2,
                 f"{violations} violations, max rel error {worst:.3g}")


def lipschitz_violations(fn: Callable[[np.ndarray], np.ndarray], pairs: int, rng, scale=3.0) -> tuple[int, float]:
    p = rng.standard_normal((pairs, 2)) * scale
    # half the pairs are close together so local behaviour is probed too
    step = rng.standard_normal((pairs, 2)) * np.where(np.arange(pairs) % 2, scale, 1e-3)[:, None]
    q = p + step
    gap = np.abs(fn(p) - fn(q)) - np.linalg.norm(p - q, axis=1)
    return int(np.sum(gap > 1e-9)), float(gap.max())


def pooling_variants(theta: float = 0.6):
    tri = pooling.PiecewiseLinearManifold(
        [[0.0, 0.0], [2.0, 0.5], [0.5, 2.0]], closed=True)
    zig = pooling.PiecewiseLinearManifold([[-2.0, 1.0], [0.0, 0.0], [1.0, 2.0], [3.0, -1.0]])
    return {
        "angular (signed)": lambda P: pooling.angular_pool_array(P[:, 0], P[:, 1], theta)[0],
        "angular (unsigned)": lambda P: pooling.angular_pool_array(P[:, 0], P[:, 1], theta, signed=False)[0],
        "polyline": lambda P: pooling.polyline_distance_array(zig, P)[0],
        "signed polygon": lambda P: pooling.signed_polyline_distance_array(tri, P)[0],
        "half-max": lambda P: np.maximum(P[:, 0], P[:, 1]),
    }


def suite_pooling(rng, pairs: int = 100_000, **_) -> list[Check]:
    out = []
    for name, fn in pooling_variants().items():
        bad, gap = lipschitz_violations(fn, pairs, rng)
        out.append(Check(f"lipschitz {name}", bad == 0, f"{bad} violations over {pairs} pairs (max excess {gap:.1e})"))
    theta = 0.7
    r = 1e6
    wedge = pooling.PiecewiseLinearManifold(
        [[r * math.cos(theta), r * math.sin(theta)], [0.0, 0.0], [r * math.cos(theta), -r * math.sin(theta)]])
    P = rng.standard_normal((10_000, 2)) * 3
    unsigned = np.abs(pooling.angular_pool_array(P[:, 0], P[:, 1], theta)[0])
    oracle = pooling.polyline_distance_array(wedge, P)[0]
    gap = float(np.max(np.abs(unsigned - oracle)))
    out.append(Check("angular pooling vs polyline oracle", gap <= 1e-6, f"max gap {gap:.1e} over 10^4"))
    z = rng.standard_normal((4, 8, 6, 6))
    norm_gap = max(abs(np.linalg.norm(pooling.rearrange(z)) - np.linalg.norm(z)),
                   abs(np.linalg.norm(pooling.maxmin(z)) - np.linalg.norm(z)))
    inverse = bool(np.array_equal(pooling.rearrange_inverse(pooling.rearrange(z)), z))
    out.append(Check("rearrange / maxmin isometry", norm_gap <= 1e-12 and inverse,
                     f"norm gap {norm_gap:.1e}, exact inverse {inverse}"))
    return out


def random_head(rng, in_dim=2, hidden=4, classes=2) -> MlpHead:
    return MlpHead(rng.standard_normal((hidden, in_dim)), rng.standard_normal(hidden),
                   rng.standard_normal((classes, hidden)), rng.standard_normal(classes))


def suite_certify(rng, **_) -> list[Check]:
    out = []
    excess = 0.0
    for _ in range(20):
        head = random_head(rng, 3, 5, 2)
        bound = curvature_bound(head, 0, 1)
        for y in rng.standard_normal((50, 3)) * 3:
            eig = np.linalg.eigvalsh(head.margin_hessian(y, 0, 1))
            excess = max(excess, eig[-1] - bound.M_high, bound.m_low - eig[0])
    out.append(Check("curvature bounds contain hessian spectrum", excess <= 1e-9, f"max excess {excess:.1e}"))
    flips, tight = 0, 0
    angles = np.linspace(0, 2 * math.pi, 2048, endpoint=False)
    ring = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    for _ in range(30):
        head = random_head(rng)
        y0 = rng.standard_normal(2)
        l = int(np.argmax(head(y0)))
        cert = crc_binary_certificate(head, y0, l, 1 - l)
        if not cert.tight or not math.isfinite(cert.distance):
            continue
        tight += 1
        a, c = head.pair(l, 1 - l)
        for frac in np.linspace(0.05, 0.999, 20):
            pts = y0 + frac * cert.distance * ring
            flips += int(np.sum(softplus(pts @ head.W1.T + head.b1) @ a + c <= 0))
    out.append(Check("CRC certificate soundness (2-D scan)", flips == 0,
                     f"{flips} flips inside {tight} tight certificates"))
    return out


_SUITE_FNS = {"tensor": suite_tensor, "soc": suite_soc, "pooling": suite_pooling, "certify": suite_certify}


def run_suites(names, seed: int = 0, pairs: int = 100_000, corrupt_skew: bool = False) -> list[Check]:
    if isinstance(names, str):
        names = [names]
    expanded = []
    for name in names:
        if name == "all":
            expanded.extend(SUITES)
        elif name in _SUITE_FNS:
            expanded.append(name)
        else:
            raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES + ('all',))}")
    checks = []
    for name in expanded:
        rng = np.random.default_rng(seed)
        for check in _SUITE_FNS[name](rng, pairs=pairs, corrupt_skew=corrupt_skew):
            check.name = f"{name}: {check.name}"
            checks.append(check)
    return checks
