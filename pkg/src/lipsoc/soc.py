"""Skew orthogonal layers: ``z = sum_{i<k} A^i x / i! + b`` with ``A`` skew.

``A`` is either a dense skew matrix (fully connected variant) or the Jacobian
of a convolution whose filter is built so that the Jacobian is skew.  The
series is evaluated with the backward recurrence

    u(k-1) = x,   u(i) = x + A u(i+1) / (i+1),   z = u(0) + b

and the input gradient with the same recurrence on ``-A``.  Two weight
gradients are available: the exact one (k - 1 patch-wise outer-product
accumulations) and the fast one, which reuses ``u(1)`` and ``v(1)`` and needs
exactly one accumulation regardless of ``k``.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    check_finite,
    conv2d,
    conv2d_weight_grad,
    transpose_filter,
    validate_filter,
)

DEFAULT_K_TRAIN = 5
DEFAULT_K_EVAL = 15


class MissingCacheError(RuntimeError):
    pass


def make_skew_matrix(free: np.ndarray) -> np.ndarray:
    free = np.asarray(free, dtype=np.float64)
    if free.ndim != 2 or free.shape[0] != free.shape[1]:
        raise ShapeError(f"skew parameterization needs a square matrix, got {free.shape}")
    return free - free.T


@dataclass(frozen=True)
class SkewConvFilter:
    free: np.ndarray
    effective: np.ndarray

    @property
    def channels(self) -> int:
        return self.free.shape[0]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.free.shape[2], self.free.shape[3]


def make_skew_filter(free: np.ndarray) -> SkewConvFilter:
    """Filter whose same-padded convolution Jacobian ``J`` satisfies ``J = -J^T``.

    ``effective[a, b] = free[a, b] - flip(free[b, a])``.
    """
    free = validate_filter(np.asarray(free, dtype=np.float64))
    if free.shape[0] != free.shape[1]:
        raise ShapeError(f"skew filter needs equal in/out channels, got {free.shape}")
    return SkewConvFilter(free.copy(), free - transpose_filter(free))


def skew_filter_grad(grad_effective: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. the effective filter back to the free filter."""
    return grad_effective - transpose_filter(grad_effective)


@dataclass
class SocCache:
    u1: np.ndarray | None = None
    v1: np.ndarray | None = None
    us: list[np.ndarray] | None = None


class SocLayer:
    """Skew orthogonal layer, dense (``free`` is n x n) or convolutional
    (``free`` is p x p x r x s).

    Inputs are ``(n,)`` / ``(B, n)`` for the dense variant and ``(C, H, W)`` /
    ``(B, C, H, W)`` for the convolutional one.  The bias is per feature
    (dense) or per channel (conv).
    """

    def __init__(self, free: np.ndarray, bias: np.ndarray | None = None,
                 k_train: int = DEFAULT_K_TRAIN, k_eval: int = DEFAULT_K_EVAL):
        if k_train < 2 or k_eval < k_train:
            raise ValueError(f"need 2 <= k_train <= k_eval, got {k_train}, {k_eval}")
        self.k_train = k_train
        self.k_eval = k_eval
        self.cache = SocCache()
        self.accumulate_seconds = 0.0
        free = np.asarray(free, dtype=np.float64)
        self.conv = free.ndim == 4
        self.set_free(free)
        width = free.shape[0]
        self.bias = np.zeros(width) if bias is None else np.asarray(bias, dtype=np.float64).copy()
        if self.bias.shape != (width,):
            raise ShapeError(f"bias must have shape ({width},), got {self.bias.shape}")

    # -- parameters -------------------------------------------------------
    def set_free(self, free: np.ndarray) -> None:
        if self.conv:
            self.filter = make_skew_filter(free)
            self.operator = self.filter.effective
        else:
            self.filter = None
            self.operator = make_skew_matrix(free)
        self.free = np.asarray(free, dtype=np.float64).copy()
        self.cache = SocCache()

    @property
    def width(self) -> int:
        return self.free.shape[0]

    def apply_operator(self, u: np.ndarray) -> np.ndarray:
        if self.conv:
            return conv2d(self.operator, u)
        return u @ self.operator.T

    def _accumulate(self, inp: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
        """Unconstrained gradient contribution ``grad_out inp^T`` (summed)."""
        start = time.perf_counter()
        if self.conv:
            out = conv2d_weight_grad(inp, grad_out, self.filter.kernel)
        else:
            out = np.atleast_2d(grad_out).T @ np.atleast_2d(inp)
        self.accumulate_seconds += time.perf_counter() - start
        return out

    def _to_free(self, grad_operator: np.ndarray) -> np.ndarray:
        if self.conv:
            return skew_filter_grad(grad_operator)
        return grad_operator - grad_operator.T

    def _bias_term(self, z: np.ndarray) -> np.ndarray:
        if self.conv:
            return z + self.bias[:, None, None]
        return z + self.bias

    def bias_grad(self, grad_z: np.ndarray) -> np.ndarray:
        if self.conv:
            axes = tuple(i for i in range(grad_z.ndim) if i != grad_z.ndim - 3)
            return grad_z.sum(axis=axes)
        return np.atleast_2d(grad_z).sum(axis=0)

    def _check_input(self, x: np.ndarray) -> None:
        if self.conv:
            if x.ndim not in (3, 4) or x.shape[-3] != self.width:
                raise ShapeError(f"layer has {self.width} channels, input has shape {x.shape}")
        elif x.ndim not in (1, 2) or x.shape[-1] != self.width:
            raise ShapeError(f"layer has width {self.width}, input has shape {x.shape}")

    # -- recurrences ------------------------------------------------------
    def forward(self, x: np.ndarray, k: int | None = None, train: bool = False,
                keep_all: bool = False) -> np.ndarray:
        """Series output ``u(0) + b``.

        ``train`` stores ``u(1)`` for the fast gradient; ``keep_all`` also
        stores every ``u(i)``, which the exact backward path needs.
        """
        k = (self.k_train if train else self.k_eval) if k is None else k
        if k < 1:
            raise ValueError("k must be >= 1")
        self._check_input(x)
        u = x
        us = [None] * k
        us[k - 1] = x
        for i in range(k - 2, -1, -1):
            u = x + self.apply_operator(u) / (i + 1)
            us[i] = u
        check_finite(u, "SOC forward")
        if train or keep_all:
            self.cache = SocCache(u1=us[1] if k > 1 else None)
            if keep_all:
                self.cache.us = us
        return self._bias_term(u)

    def input_grad(self, grad_z: np.ndarray, k: int | None = None, keep_all: bool = False):
        """``v(0)`` from ``v(k-1) = g, v(i) = g - A v(i+1) / (i+1)``; stores ``v(1)``.

        With ``keep_all`` returns ``(v(0), [v(0), ..., v(k-1)])``.
        """
        k = self.k_train if k is None else k
        self._check_input(grad_z)
        v = grad_z
        vs = [None] * k
        vs[k - 1] = grad_z
        for i in range(k - 2, -1, -1):
            v = grad_z - self.apply_operator(v) / (i + 1)
            vs[i] = v
        check_finite(v, "SOC input gradient")
        self.cache.v1 = vs[1] if k > 1 else None
        return (v, vs) if keep_all else v

    def weight_grad_exact(self, x: np.ndarray, grad_z: np.ndarray, k: int | None = None) -> np.ndarray:
        """Exact gradient of ``<grad_z, layer(x)>`` w.r.t. the free parameters.

        ``-sum_m [(A^{m-1} x) w(m)^T - w(m) (A^{m-1} x)^T]`` where
        ``w(m) = v(m) / m!`` is the tail sum ``sum_l (-A)^l g / (m + l)!`` of the
        truncated series (``w(k) = 0``).
        """
        k = self.k_train if k is None else k
        if np.shape(x) != np.shape(grad_z):
            raise ShapeError(f"x {np.shape(x)} and grad_z {np.shape(grad_z)} differ")
        _, vs = self.input_grad(grad_z, k, keep_all=True)
        grad = np.zeros_like(self.operator)
        power = x
        for m in range(1, k):
            grad += self._accumulate(power, vs[m] / math.factorial(m))
            if m < k - 1:
                power = self.apply_operator(power)
        return self._to_free(grad)

    def weight_grad_fast(self) -> np.ndarray:
        """``-(u(1) v(1)^T - v(1) u(1)^T)`` from the cached recurrence terms."""
        if self.cache.u1 is None or self.cache.v1 is None:
            raise MissingCacheError(
                "fast gradient needs u(1) and v(1): run forward(train=True) and "
                "input_grad on the same sample first"
            )
        return self._to_free(self._accumulate(self.cache.u1, self.cache.v1))

    def backward(self, grad_z: np.ndarray, exact: bool = False, k: int | None = None):
        """Training backward pass after ``forward(train=True, keep_all=exact)``.

        Returns ``(grad_x, grad_free, grad_bias)``.  The exact path backpropagates
        through every term of the series (k - 1 accumulations); the fast path
        runs the input recurrence and a single accumulation.
        """
        k = self.k_train if k is None else k
        grad_b = self.bias_grad(grad_z)
        if not exact:
            grad_x = self.input_grad(grad_z, k)
            if k == 1:
                return grad_x, np.zeros_like(self.free), grad_b
            return grad_x, self.weight_grad_fast(), grad_b
        us = self.cache.us
        if us is None or len(us) != k:
            raise MissingCacheError("exact backward needs forward(train=True, keep_all=True)")
        grad = np.zeros_like(self.operator)
        w = grad_z
        grad_x = grad_z.copy()
        for l in range(1, k):
            grad += self._accumulate(us[l] / math.factorial(l), w)
            w = -self.apply_operator(w)
            grad_x += w / math.factorial(l)
        check_finite(grad_x, "SOC input gradient")
        return grad_x, self._to_free(grad), grad_b

    # -- linear-map handles ----------------------------------------------
    def jvp(self, x: np.ndarray, k: int | None = None) -> np.ndarray:
        """Action of the (bias-free) k-term series on ``x``."""
        k = self.k_eval if k is None else k
        u = x
        for i in range(k - 2, -1, -1):
            u = x + self.apply_operator(u) / (i + 1)
        return u

    def vjp(self, g: np.ndarray, k: int | None = None) -> np.ndarray:
        k = self.k_eval if k is None else k
        v = g
        for i in range(k - 2, -1, -1):
            v = g - self.apply_operator(v) / (i + 1)
        return v


def soc_forward(layer: SocLayer, x: np.ndarray, k: int, train: bool = False) -> np.ndarray:
    return layer.forward(x, k, train=train)


def soc_input_grad(layer: SocLayer, grad_z: np.ndarray, k: int) -> np.ndarray:
    return layer.input_grad(grad_z, k)


def soc_weight_grad_exact(layer: SocLayer, x: np.ndarray, grad_z: np.ndarray, k: int) -> np.ndarray:
    return layer.weight_grad_exact(x, grad_z, k)


def soc_weight_grad_fast(layer: SocLayer) -> np.ndarray:
    return layer.weight_grad_fast()


def approximation_error_series(norm: float, k: int | None = None, cutoff: float = 1e-16) -> float:
    """``sum_{l,m>=1} norm^{l+m} |c_fast(l,m) - c_exact(l,m)|``.

    ``c_fast = 1/((l+1)!(m+1)!)`` and ``c_exact = 1/(l+m+1)!``; with a finite
    ``k`` each coefficient is zeroed where the truncated series lacks the
    term (fast: ``l, m <= k-2``; exact: ``l + m <= k-2``).
    """
    if norm == 0.0:
        return 0.0
    total = 0.0
    degree = 2
    while True:
        level = 0.0
        for l in range(1, degree):
            m = degree - l
            c_fast = 1.0 / (math.factorial(l + 1) * math.factorial(m + 1))
            c_exact = 1.0 / math.factorial(l + m + 1)
            if k is not None:
                c_fast = c_fast if (l <= k - 2 and m <= k - 2) else 0.0
                c_exact = c_exact if l + m <= k - 2 else 0.0
            level += abs(c_fast - c_exact)
        term = level * norm**degree
        total += term
        if k is not None and degree >= 2 * k - 4:
            break
        if term < cutoff and degree > 4:
            break
        degree += 1
    return total


def approximation_error_bound(A: np.ndarray, k: int | None = None,
                              x: np.ndarray | None = None, grad_z: np.ndarray | None = None) -> float:
    """Upper bound on ``||fast - exact||_F`` for a dense skew ``A``.

    Twice the coefficient series (skew-symmetrizing at most doubles a
    Frobenius norm) scaled by ``||x|| ||grad_z||`` (1 when omitted).
    """
    norm = float(np.linalg.norm(A, 2)) if A.size else 0.0
    scale = (1.0 if x is None else float(np.linalg.norm(x))) * (
        1.0 if grad_z is None else float(np.linalg.norm(grad_z)))
    return 2.0 * approximation_error_series(norm, k) * scale


def orthogonality_residual_bound(norm: float, k: int, n: int) -> float:
    """Rigorous bound on ``||J^T J - I||_F`` for the k-term series of a skew
    ``A`` of spectral norm ``norm`` acting on ``n`` features.

    ``J^T J = p(-A) p(A)`` with ``p`` the degree-(k-1) Taylor polynomial; all
    degrees below ``k`` cancel, the rest are bounded coefficient-wise.
    """
    total = 0.0
    for d in range(k, 2 * k - 1):
        c = sum((-1) ** i / (math.factorial(i) * math.factorial(d - i))
                for i in range(max(0, d - k + 1), min(d, k - 1) + 1))
        total += abs(c) * norm**d
    return math.sqrt(n) * total


def series_remainder_bound(norm: float, k: int, n: int) -> float:
    """``n * norm^{k+1} / (k+1)!``."""
    return n * norm ** (k + 1) / math.factorial(k + 1)
