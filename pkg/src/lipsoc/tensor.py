"""Dense float64 tensor kernels: same-padded 2-D convolution, its adjoint,
the patch-wise weight gradient, Jacobian materialization and power iteration.

Tensors are plain ``numpy.ndarray`` objects in float64, row-major.  A single
sample is ``(channels, height, width)``; every kernel also accepts a leading
batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_JACOBIAN_BUDGET = 64 * 2**20


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def check_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return arr


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Copy ``data`` into a contiguous float64 array, optionally reshaped."""
    arr = np.array(data, dtype=np.float64, copy=True)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != arr.size:
            raise ShapeError(f"cannot view {arr.size} elements as shape {shape}")
        arr = arr.reshape(shape)
    return check_finite(np.ascontiguousarray(arr))


def validate_filter(weights: np.ndarray) -> np.ndarray:
    if weights.ndim != 4:
        raise ShapeError(f"filter must be 4-D (out, in, kh, kw), got shape {weights.shape}")
    _, _, r, s = weights.shape
    if r % 2 == 0 or s % 2 == 0:
        raise ShapeError(f"kernel extents must be odd for same padding, got {r}x{s}")
    return weights


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (C, H, W) or (B, C, H, W) input, got shape {x.shape}")


def _patches(x: np.ndarray, r: int, s: int) -> np.ndarray:
    """im2col: (B, C, H, W) -> (B*H*W, C*r*s) with zero same-padding."""
    b, c, h, w = x.shape
    pr, ps = (r - 1) // 2, (s - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pr, pr), (ps, ps)))
    win = sliding_window_view(xp, (r, s), axis=(2, 3))  # (B, C, H, W, r, s)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * r * s)


def _check_kernel_fits(weights: np.ndarray, x: np.ndarray) -> None:
    _, _, r, s = weights.shape
    h, w = x.shape[-2:]
    if r > 2 * h - 1 or s > 2 * w - 1:
        raise ShapeError(f"kernel {r}x{s} does not fit spatial extent {h}x{w}")


def conv2d(weights: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Stride-1 cross-correlation with symmetric zero padding.

    ``out[o, i, j] = sum_{c, u, v} W[o, c, u, v] * x[c, i + u - pr, j + v - ps]``
    """
    validate_filter(weights)
    xb, squeeze = _batched(x)
    p, q, r, s = weights.shape
    if xb.shape[1] != q:
        raise ShapeError(
            f"filter {weights.shape} expects {q} input channels, input has shape {x.shape}"
        )
    _check_kernel_fits(weights, xb)
    b, _, h, w = xb.shape
    out = _patches(xb, r, s) @ weights.reshape(p, q * r * s).T
    out = out.reshape(b, h, w, p).transpose(0, 3, 1, 2)
    out = check_finite(np.ascontiguousarray(out), "conv2d output")
    return out[0] if squeeze else out


def transpose_filter(weights: np.ndarray) -> np.ndarray:
    """Filter whose same-padded convolution is the adjoint of ``weights``."""
    return np.ascontiguousarray(weights.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])


def conv2d_transpose(weights: np.ndarray, grad_output: np.ndarray) -> np.ndarray:
    validate_filter(weights)
    gb, _ = _batched(grad_output)
    if gb.shape[1] != weights.shape[0]:
        raise ShapeError(
            f"filter {weights.shape} produces {weights.shape[0]} channels, "
            f"grad_output has shape {grad_output.shape}"
        )
    return conv2d(transpose_filter(weights), grad_output)


def conv2d_weight_grad(x: np.ndarray, grad_output: np.ndarray, kernel: tuple[int, int]) -> np.ndarray:
    """Gradient of ``<grad_output, conv2d(W, x)>`` w.r.t. ``W``.

    Sums the per-patch outer products (output-channel vector times input
    patch) over every spatial position and batch element.
    """
    xb, _ = _batched(x)
    gb, _ = _batched(grad_output)
    if xb.shape[0] != gb.shape[0] or xb.shape[2:] != gb.shape[2:]:
        raise ShapeError(f"input {x.shape} and grad_output {grad_output.shape} disagree")
    r, s = kernel
    b, q, h, w = xb.shape
    p = gb.shape[1]
    g2 = gb.transpose(0, 2, 3, 1).reshape(b * h * w, p)
    dw = g2.T @ _patches(xb, r, s)
    return check_finite(dw.reshape(p, q, r, s), "weight gradient")


def materialize_jacobian(
    weights: np.ndarray, spatial: int, budget_bytes: int = DEFAULT_JACOBIAN_BUDGET
) -> np.ndarray:
    """Dense matrix ``M`` with ``M @ x.ravel() == conv2d(weights, x).ravel()``."""
    validate_filter(weights)
    p, q, _, _ = weights.shape
    rows, cols = p * spatial * spatial, q * spatial * spatial
    need = rows * cols * 8
    if need > budget_bytes:
        raise MemoryError(
            f"Jacobian of {rows}x{cols} needs {need} bytes (budget {budget_bytes}); "
            "use a smaller spatial extent"
        )
    basis = np.eye(cols).reshape(cols, q, spatial, spatial)
    return conv2d(weights, basis).reshape(cols, rows).T.copy()


@dataclass
class PowerResult:
    sigma: float
    converged: bool
    zero: bool = False
    iterations: int = 0
    history: list[float] = field(default_factory=list)


def spectral_norm_power_method(
    apply: Callable[[np.ndarray], np.ndarray],
    apply_adjoint: Callable[[np.ndarray], np.ndarray],
    input_shape: Sequence[int],
    iters: int = 100,
    tol: float = 1e-10,
    seed: int = 0,
) -> PowerResult:
    """Largest singular value of a linear map given as an adjoint pair.

    Iterates ``x <- A^T A x / ||A^T A x||`` from a seeded Gaussian start.  The
    estimate ``||A x||`` never decreases between iterations and never exceeds
    the true norm.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    x = np.random.default_rng(seed).standard_normal(tuple(input_shape))
    x /= np.linalg.norm(x)
    history: list[float] = []
    sigma = 0.0
    for it in range(1, iters + 1):
        ax = apply(x)
        sigma = float(np.linalg.norm(ax))
        history.append(sigma)
        if sigma == 0.0:
            return PowerResult(0.0, True, zero=True, iterations=it, history=history)
        if it > 1 and sigma - history[-2] <= tol * sigma:
            return PowerResult(sigma, True, iterations=it, history=history)
        y = apply_adjoint(ax)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return PowerResult(sigma, True, iterations=it, history=history)
        x = y / ny
    return PowerResult(sigma, False, iterations=iters, history=history)
