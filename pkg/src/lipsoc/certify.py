"""Robustness certificates for 1-Lipschitz feature maps.

* ``linear_head_certificate``: closed-form margin over row-difference norm
  (optionally with unit-normalised rows).
* ``crc_binary_certificate``: curvature-based dual bound on the distance to
  the boundary ``h_l = h_i`` of a one-hidden-layer softplus head.
* ``crc_lip_certificate``: the head radius at ``g(x)`` certifies ``x`` when
  ``g`` is 1-Lipschitz; the radius is divided by the audited Lipschitz
  product to absorb series-truncation error.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .tensor import ShapeError, spectral_norm_power_method

TIGHT_TOL = 1e-6
INNER_GRAD_TOL = 1e-8
INNER_MAX_STEPS = 500
DUAL_ITERS = 60
RADII = (36 / 255, 72 / 255, 108 / 255)


def softplus(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    big = t > 30
    safe = np.where(big, 0.0, t)
    return np.where(big, t + np.log1p(np.exp(-np.abs(t))), np.log1p(np.exp(safe)))


def sigmoid(t: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(t, dtype=np.float64)))


@dataclass
class MlpHead:
    """``h(y) = W2 softplus(W1 y + b1) + b2``."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        self.W1 = np.asarray(self.W1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.W2 = np.asarray(self.W2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        h, _ = self.W1.shape
        c = self.W2.shape[0]
        if h < 1 or c < 2:
            raise ShapeError(f"need hidden width >= 1 and >= 2 classes, got h={h}, c={c}")
        if self.b1.shape != (h,) or self.W2.shape != (c, h) or self.b2.shape != (c,):
            raise ShapeError("inconsistent MLP head shapes")
        for arr in (self.W1, self.b1, self.W2, self.b2):
            if not np.all(np.isfinite(arr)):
                raise ValueError("MLP head parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def classes(self) -> int:
        return self.W2.shape[0]

    def __call__(self, y: np.ndarray) -> np.ndarray:
        return softplus(y @ self.W1.T + self.b1) @ self.W2.T + self.b2

    def pair(self, l: int, i: int) -> tuple[np.ndarray, float]:
        return self.W2[l] - self.W2[i], float(self.b2[l] - self.b2[i])

    def margin(self, y: np.ndarray, l: int, i: int) -> float:
        a, c = self.pair(l, i)
        return float(a @ softplus(self.W1 @ y + self.b1) + c)

    def margin_grad(self, y: np.ndarray, l: int, i: int) -> np.ndarray:
        a, _ = self.pair(l, i)
        return self.W1.T @ (a * sigmoid(self.W1 @ y + self.b1))

    def margin_hessian(self, y: np.ndarray, l: int, i: int) -> np.ndarray:
        a, _ = self.pair(l, i)
        s = sigmoid(self.W1 @ y + self.b1)
        return (self.W1.T * (a * s * (1 - s))) @ self.W1


@dataclass
class CurvatureBound:
    m_low: float
    M_high: float

    def __post_init__(self):
        if not self.m_low <= 0.0 <= self.M_high:
            raise ValueError(f"invalid curvature bound [{self.m_low}, {self.M_high}]")

    @property
    def magnitude(self) -> float:
        return max(-self.m_low, self.M_high)


def _lmax_psd(mat: np.ndarray) -> tuple[float, np.ndarray]:
    vals, vecs = np.linalg.eigh(mat)
    return max(float(vals[-1]), 0.0), vecs[:, -1]


def curvature_bound(head: MlpHead, l: int, i: int, with_vectors: bool = False):
    """Eigenvalue bounds on the Hessian of ``h_l - h_i``.

    With ``a = W2[l] - W2[i]`` the Hessian is ``W1^T diag(a * s'') W1`` and
    ``0 < s'' <= 1/4``, so splitting ``a`` into positive and negative parts
    gives ``m = -lmax(W1^T diag(a-) W1) / 4`` and ``M = lmax(W1^T diag(a+) W1) / 4``.
    """
    if l == i:
        raise ValueError("curvature bound needs two distinct classes")
    a, _ = head.pair(l, i)
    pos, neg = np.maximum(a, 0.0), np.maximum(-a, 0.0)
    W1 = head.W1
    hi, v_hi = _lmax_psd((W1.T * pos) @ W1)
    lo, v_lo = _lmax_psd((W1.T * neg) @ W1)
    bound = CurvatureBound(-0.25 * lo, 0.25 * hi)
    if with_vectors:
        return bound, v_lo, v_hi
    return bound


@dataclass
class BinaryCertificate:
    distance: float
    eta: float
    tight: bool
    converged: bool = True
    margin: float = 0.0
    boundary_value: float = float("nan")
    x_star: np.ndarray | None = None
    note: str = ""
    saturated: bool = False


class _Inner:
    """``min_x 0.5 ||x - y0||^2 + eta (h_l - h_i)(x)`` by damped Newton."""

    def __init__(self, head: MlpHead, y0: np.ndarray, l: int, i: int, bound: CurvatureBound):
        self.head, self.y0, self.l, self.i, self.bound = head, y0, l, i, bound
        self.a, self.c = head.pair(l, i)

    def objective(self, x, eta):
        z = self.head.W1 @ x + self.head.b1
        f = float(self.a @ softplus(z) + self.c)
        return 0.5 * float(np.sum((x - self.y0) ** 2)) + eta * f, f

    def gradient(self, x, eta):
        z = self.head.W1 @ x + self.head.b1
        s = sigmoid(z)
        return (x - self.y0) + eta * (self.head.W1.T @ (self.a * s)), s

    def solve(self, eta: float, x0: np.ndarray):
        W1 = self.head.W1
        x = x0.copy()
        val, f = self.objective(x, eta)
        grad, s = self.gradient(x, eta)
        gnorm = float(np.linalg.norm(grad))
        for _ in range(INNER_MAX_STEPS):
            if gnorm <= INNER_GRAD_TOL:
                break
            hess = np.eye(len(x)) + eta * ((W1.T * (self.a * s * (1 - s))) @ W1)
            try:
                step = -np.linalg.solve(hess, grad)
                if step @ grad >= 0:
                    step = -grad
            except np.linalg.LinAlgError:
                step = -grad
            t, accepted = 1.0, False
            for _ in range(40):
                cand = x + t * step
                cval, cf = self.objective(cand, eta)
                if cval <= val + 1e-4 * t * float(step @ grad):
                    accepted = True
                elif abs(cval - val) <= 1e-13 * max(1.0, abs(val)):
                    # objective flat to rounding: judge by the gradient instead
                    accepted = np.linalg.norm(self.gradient(cand, eta)[0]) < gnorm
                if accepted:
                    break
                t *= 0.5
            if not accepted:
                break
            x, val, f = cand, cval, cf
            grad, s = self.gradient(x, eta)
            gnorm = float(np.linalg.norm(grad))
        return x, val, f, gnorm

    def strong_convexity(self, eta: float) -> float:
        return 1.0 + min(eta * self.bound.m_low, eta * self.bound.M_high)


def crc_binary_certificate(head: MlpHead, y0: np.ndarray, l: int, i: int,
                           bound: CurvatureBound | None = None,
                           max_distance: float = 1e3) -> BinaryCertificate:
    """Lower bound on the l2 distance from ``y0`` to ``{h_l = h_i}``.

    Maximises the concave dual ``d(eta)`` over the convexity interval
    ``[-1/M, -1/m]``.  Since ``d'(eta) = (h_l - h_i)(x*(eta))`` and
    ``d'(0) > 0``, the maximiser lies in ``(0, -1/m]`` and is located by
    bisection on the sign of ``d'``.  Each ``d`` value is lowered by the
    inner suboptimality bound ``||grad||^2 / (2 mu)`` so the returned distance
    stays a valid lower bound when the inner solve is inexact.

    When ``h_l - h_i`` is convex the interval is unbounded above; it is
    doubled until the derivative turns negative or the certified distance
    exceeds ``max_distance`` (reported as ``saturated``).
    """
    y0 = np.asarray(y0, dtype=np.float64)
    margin = head.margin(y0, l, i)
    if not margin > 0.0:
        return BinaryCertificate(0.0, 0.0, False, True, margin, margin, y0.copy(), "non-positive margin")
    bound = curvature_bound(head, l, i) if bound is None else bound
    inner = _Inner(head, y0, l, i, bound)
    scale = max(1.0, abs(margin))

    if bound.m_low < 0.0:
        hi = -1.0 / bound.m_low
        hi -= 1e-8 * hi
        unbounded = False
    else:
        g0 = head.margin_grad(y0, l, i)
        hi = margin / max(float(g0 @ g0), 1e-300)
        unbounded = True

    x_warm = y0.copy()
    cache: dict[float, tuple] = {}

    def evaluate(eta):
        nonlocal x_warm
        if eta not in cache:
            x, val, f, gn = inner.solve(eta, x_warm)
            x_warm = x
            cache[eta] = (x, val, f, gn)
        return cache[eta]

    def certified(eta):
        _, val, _, gn = evaluate(eta)
        mu = inner.strong_convexity(eta)
        if not math.isfinite(val) or mu <= 0.0 or gn > 1e-4:
            return None
        dual = val - gn * gn / (2.0 * mu)
        return math.sqrt(2.0 * dual) if dual > 0.0 else 0.0

    if unbounded:
        while evaluate(hi)[2] > 0.0:
            d_hi = certified(hi)
            if d_hi is not None and d_hi >= max_distance:
                x, _, f, _ = evaluate(hi)
                return BinaryCertificate(d_hi, hi, False, True, margin, f, x,
                                         "boundary beyond search range", saturated=True)
            hi *= 2.0

    lo_eta, hi_eta = 0.0, hi
    if evaluate(hi)[2] > 0.0:
        # derivative still positive at the curvature limit: dual optimum sits there
        eta = hi
    else:
        for _ in range(DUAL_ITERS):
            mid = 0.5 * (lo_eta + hi_eta)
            if evaluate(mid)[2] > 0.0:
                lo_eta = mid
            else:
                hi_eta = mid
        cands = [e for e in (lo_eta, hi_eta) if e > 0.0] or [hi_eta]
        eta = max(cands, key=lambda e: evaluate(e)[1])
    x, val, f, gn = evaluate(eta)
    dist = certified(eta)
    if dist is None:
        return BinaryCertificate(0.0, eta, False, False, margin, f, x, "inner solve did not converge")
    tight = abs(f) <= TIGHT_TOL * scale and gn <= TIGHT_TOL
    return BinaryCertificate(dist, eta, tight, True, margin, f, x)


@dataclass
class ClassBound:
    cls: int
    distance: float
    eta: float = 0.0
    tight: bool = True


@dataclass
class Certificate:
    label: int
    radius: float
    per_class: list[ClassBound] = field(default_factory=list)
    lip_correction: float = 1.0
    valid: bool = True
    prediction: int | None = None

    def with_correction(self, lip_correction: float) -> "Certificate":
        raw = min((c.distance for c in self.per_class), default=math.inf)
        radius = 0.0 if not self.valid else raw / lip_correction
        return Certificate(self.label, radius, self.per_class, lip_correction, self.valid, self.prediction)


def default_top_j(classes: int) -> int:
    return 10 if classes >= 20 else classes - 1


def crc_lip_certificate(feature_map: Callable[[np.ndarray], np.ndarray], head: MlpHead,
                        x: np.ndarray, top_j: int | None = None, lip_correction: float = 1.0,
                        label: int | None = None, require_tight: bool = True) -> Certificate:
    """Certificate at ``x`` for ``head(feature_map(x))``.

    Only the ``top_j`` runner-up classes by logit are checked.  A per-class
    solve that is not tight makes the certificate invalid (radius 0).
    """
    if lip_correction < 1.0:
        raise ValueError("lip_correction must be >= 1")
    y0 = np.asarray(feature_map(x), dtype=np.float64).ravel()
    logits = head(y0)
    pred = int(np.argmax(logits))
    top_j = default_top_j(head.classes) if top_j is None else min(top_j, head.classes - 1)
    order = [int(c) for c in np.argsort(-logits, kind="stable") if c != pred][:top_j]
    per_class = []
    for i in order:
        bc = crc_binary_certificate(head, y0, pred, i)
        per_class.append(ClassBound(i, bc.distance, bc.eta,
                                    (bc.tight or bc.saturated) and bc.converged))
    valid = all(c.tight for c in per_class) if require_tight else True
    if label is not None and label != pred:
        valid = False
    cert = Certificate(pred if label is None else label, 0.0, per_class, lip_correction, valid, pred)
    return cert.with_correction(lip_correction)


def normalize_rows(V: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(V, axis=1, keepdims=True)
    return V / np.where(norms > 0, norms, 1.0)


def linear_head_certificate(V: np.ndarray, bias: np.ndarray, y0: np.ndarray, l: int | None = None,
                            lln: bool = False, lip_correction: float = 1.0,
                            label: int | None = None) -> Certificate:
    """Certified radius of ``V y + bias`` at ``y0``: ``min_i margin_i / ||V_l - V_i||``.

    With ``lln`` the rows of ``V`` are scaled to unit norm first.
    """
    V = np.asarray(V, dtype=np.float64)
    W = normalize_rows(V) if lln else V
    logits = W @ np.asarray(y0, dtype=np.float64).ravel() + bias
    pred = int(np.argmax(logits))
    l = pred if l is None else l
    if logits[l] < logits[pred]:
        raise ValueError(f"class {l} is not the argmax of the logits")
    per_class = []
    for i in range(len(logits)):
        if i == l:
            continue
        gap = float(logits[l] - logits[i])
        norm = float(np.linalg.norm(W[l] - W[i]))
        if norm == 0.0:
            dist = math.inf  # identical score functions never cross
        else:
            dist = max(gap, 0.0) / norm
        per_class.append(ClassBound(i, dist))
    valid = label is None or label == pred
    cert = Certificate(l if label is None else label, 0.0, per_class, lip_correction, valid, pred)
    return cert.with_correction(lip_correction)


@dataclass
class LipschitzAudit:
    correction: float
    factors: list[float]
    converged: bool


def audit_lipschitz(handles: Iterable[tuple[Callable, Callable, Sequence[int]]],
                    iters: int = 200, tol: float = 1e-12, seed: int = 0) -> LipschitzAudit:
    """Product of power-method norm estimates over (apply, adjoint, shape) triples.

    Layers not listed are taken as 1-Lipschitz.  The result is at least 1.
    """
    factors, converged = [], True
    for n, (apply, adjoint, shape) in enumerate(handles):
        res = spectral_norm_power_method(apply, adjoint, shape, iters=iters, tol=tol, seed=seed + n)
        factors.append(res.sigma)
        converged &= res.converged
    return LipschitzAudit(max(float(np.prod(factors)) if factors else 1.0, 1.0), factors, converged)


def audit_network_lipschitz(net, iters: int = 200) -> LipschitzAudit:
    return audit_lipschitz(net.lipschitz_handles(), iters=iters)
