"""Training: penultimate-space PGD, the curvature-regularised robust loss and
an SGD loop with momentum.

The loss for a batch is the mean of ``CE(head(y*), label) + gamma * K_h``
where ``y*`` is the worst PGD iterate inside the ``rho``-ball around the
feature vector ``y0``.  The gradient reaches the feature map by treating the
perturbation step as the identity, i.e. ``dL/dy0 := dL/dy*``.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .certify import MlpHead, curvature_bound, sigmoid, softplus
from .data import Dataset
from .network import LinearHead, MlpHeadLayer, Network
from .tensor import NonFiniteError


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 25
    lr: float = 0.1
    lr_drop: float = 0.1
    drop_epochs: tuple[int, ...] = (15, 20)
    rho: float = 36 / 255
    gamma: float = 0.5
    pgd_steps: int = 5
    pgd_step_size: float | None = None
    k_train: int = 5
    k_eval: int = 15
    seed: int = 0
    batch_size: int = 32
    momentum: float = 0.9
    exact_grad: bool = False
    max_operator_norm: float | None = 1.0

    def __post_init__(self):
        self.drop_epochs = tuple(int(e) for e in self.drop_epochs)
        if self.rho < 0 or self.gamma < 0:
            raise ValueError("rho and gamma must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.pgd_steps < 0:
            raise ValueError("pgd_steps must be >= 0")
        if self.max_operator_norm is not None and self.max_operator_norm <= 0:
            raise ValueError("max_operator_norm must be positive")
        if self.k_train < 2 or self.k_eval < self.k_train:
            raise ValueError("need 2 <= k_train <= k_eval")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``."""
        return self.lr * self.lr_drop ** sum(epoch >= d for d in self.drop_epochs)

    def to_dict(self) -> dict:
        return asdict(self)


# -- head evaluation --------------------------------------------------------

def head_function(head):
    """``y -> (logits, vjp)`` for any supported head, without touching caches."""
    if isinstance(head, MlpHeadLayer):
        head = head.as_head()
    if isinstance(head, MlpHead):
        def run(y):
            z = y @ head.W1.T + head.b1
            logits = softplus(z) @ head.W2.T + head.b2
            return logits, lambda g: ((g @ head.W2) * sigmoid(z)) @ head.W1
        return run
    if isinstance(head, LinearHead):
        W, b = head.weight(), head.params["b"]
        return lambda y: (y @ W.T + b, lambda g: g @ W)
    raise TypeError(f"unsupported head {type(head).__name__}")


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample loss and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(labels)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(labels))
    loss = logz - shifted[rows, labels]
    grad = np.exp(shifted - logz[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad


def penultimate_pgd(head, y0: np.ndarray, label, rho: float, steps: int = 5,
                    step_size: float | None = None) -> np.ndarray:
    """l2 PGD on ``CE(head(y), label)`` over ``||y - y0|| <= rho``.

    Returns, per sample, the iterate with the largest loss seen (``y0``
    included), so the loss never drops below the starting loss.
    """
    if rho < 0:
        raise ValueError("rho must be >= 0")
    y0 = np.asarray(y0, dtype=np.float64)
    single = y0.ndim == 1
    y0b = np.atleast_2d(y0)
    labels = np.atleast_1d(np.asarray(label))
    if rho == 0 or steps == 0:
        return y0.copy()
    step = 0.5 * rho if step_size is None else step_size
    run = head_function(head)
    y = y0b.copy()
    best = y0b.copy()
    logits, vjp = run(y)
    loss, g = cross_entropy(logits, labels)
    best_loss = loss.copy()
    for _ in range(steps):
        grad = vjp(g)
        norm = np.linalg.norm(grad, axis=1, keepdims=True)
        y = y + step * np.divide(grad, norm, out=np.zeros_like(grad), where=norm > 0)
        delta = y - y0b
        dn = np.linalg.norm(delta, axis=1, keepdims=True)
        y = y0b + delta * np.minimum(1.0, rho / np.maximum(dn, 1e-300))
        logits, vjp = run(y)
        loss, g = cross_entropy(logits, labels)
        better = loss > best_loss
        best[better] = y[better]
        best_loss = np.where(better, loss, best_loss)
    return best[0] if single else best


# -- curvature regulariser --------------------------------------------------

def pair_curvature(head: MlpHead, l: int, i: int) -> tuple[float, np.ndarray, np.ndarray]:
    """``K = max(|m_low|, M_high)`` for the pair and its gradient w.r.t. W1 and W2.

    Differentiates through the top eigenvector (a subgradient when the
    eigenvalue is repeated).
    """
    bound, v_lo, v_hi = curvature_bound(head, l, i, with_vectors=True)
    a, _ = head.pair(l, i)
    use_high = bound.M_high >= -bound.m_low
    v = v_hi if use_high else v_lo
    mask = (a > 0) if use_high else (a < 0)
    sign = 1.0 if use_high else -1.0
    w1v = head.W1 @ v
    weight = np.where(mask, np.abs(a), 0.0)
    gW1 = 0.5 * np.outer(weight * w1v, v)
    ga = sign * 0.25 * w1v**2 * mask
    gW2 = np.zeros_like(head.W2)
    gW2[l] += ga
    gW2[i] -= ga
    return bound.magnitude, gW1, gW2


def curvature_regularizer(head: MlpHead, logits: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Batch mean of ``K_h`` over each sample's predicted-vs-runner-up pair."""
    order = np.argsort(-np.atleast_2d(logits), axis=1, kind="stable")
    pairs = [(int(r[0]), int(r[1])) for r in order]
    total, gW1, gW2 = 0.0, np.zeros_like(head.W1), np.zeros_like(head.W2)
    cache = {}
    for pair in pairs:
        if pair not in cache:
            cache[pair] = pair_curvature(head, *pair)
        k, a, b = cache[pair]
        total += k
        gW1 += a
        gW2 += b
    n = len(pairs)
    return total / n, gW1 / n, gW2 / n


# -- loss -------------------------------------------------------------------

@dataclass
class LossResult:
    total: float
    ce: float
    reg: float
    y0: np.ndarray
    y_star: np.ndarray


def robust_loss(net: Network, images: np.ndarray, labels: np.ndarray, rho: float, gamma: float,
             pgd_steps: int = 5, pgd_step_size: float | None = None,
             backward: bool = True) -> LossResult:
    """Robust loss of a batch; with ``backward`` parameter gradients are left
    in ``net.gradients()`` (zeroed first)."""
    labels = np.asarray(labels)
    if backward:
        net.zero_grad()
    y0 = net.features(images, train=backward)
    y_star = penultimate_pgd(net.head, y0, labels, rho, pgd_steps, pgd_step_size)
    head = net.head
    logits = head.forward(y_star, train=backward)
    per_sample, g = cross_entropy(logits, labels)
    ce = float(per_sample.mean())
    reg, gW1, gW2 = 0.0, None, None
    if gamma > 0 and isinstance(head, MlpHeadLayer):
        clean, _ = head_function(head)(y0)
        reg, gW1, gW2 = curvature_regularizer(head.as_head(), clean)
    total = ce + gamma * reg
    if not math.isfinite(total):
        raise NonFiniteError(f"non-finite loss (ce={ce}, reg={reg})")
    if backward:
        grad_y = head.backward(g / len(labels))
        if gW1 is not None:
            head.grads["W1"] = head.grads["W1"] + gamma * gW1
            head.grads["W2"] = head.grads["W2"] + gamma * gW2
        net.backward_features(grad_y)  # identity map: dL/dy0 := dL/dy*
    return LossResult(total, ce, gamma * reg, y0, y_star)


def evaluate_loss(net: Network, data: Dataset, cfg: TrainConfig, batch: int = 256) -> float:
    total = 0.0
    for start in range(0, len(data), batch):
        sl = slice(start, start + batch)
        res = robust_loss(net, data.images[sl], data.labels[sl], cfg.rho, cfg.gamma,
                       cfg.pgd_steps, cfg.pgd_step_size, backward=False)
        total += res.total * len(data.labels[sl])
    return total / len(data)


def accuracy(net: Network, data: Dataset, batch: int = 256) -> float:
    if len(data) == 0:
        return 0.0
    hits = 0
    for start in range(0, len(data), batch):
        logits = net.logits(data.images[start:start + batch])
        hits += int(np.sum(np.argmax(logits, axis=1) == data.labels[start:start + batch]))
    return hits / len(data)


# -- SGD --------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    ce: float
    reg: float
    seconds: float
    soc_grad_seconds: float
    grad_path: str


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    initial_loss: float = math.nan
    final_loss: float = math.nan
    diverged: bool = False
    message: str = ""


def configure_series(net: Network, cfg: TrainConfig) -> None:
    for layer in net.soc_layers():
        layer.soc.k_train = cfg.k_train
        layer.soc.k_eval = cfg.k_eval
    net.config.k_train, net.config.k_eval = cfg.k_train, cfg.k_eval
    net.set_exact_grad(cfg.exact_grad)


def sgd_train(net: Network, data: Dataset, cfg: TrainConfig, log=None) -> TrainResult:
    """SGD with momentum on the robust loss.  Parameters are updated in place.

    On a non-finite loss the parameters from the start of the failing step are
    restored and training stops with ``diverged`` set.
    """
    if data.shape != tuple(net.config.in_shape):
        raise ValueError(f"dataset shape {data.shape} does not match network input {net.config.in_shape}")
    if data.classes != net.config.classes:
        raise ValueError(f"dataset has {data.classes} classes, network has {net.config.classes}")
    configure_series(net, cfg)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(initial_loss=evaluate_loss(net, data, cfg))
    velocity = {k: np.zeros_like(v) for k, v in net.parameters().items()}
    socs = net.soc_layers()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        start = time.perf_counter()
        soc_before = sum(l.soc.accumulate_seconds for l in socs)
        order = rng.permutation(len(data))
        sums = np.zeros(3)
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            params = net.parameters()
            good = {k: v.copy() for k, v in params.items()}
            try:
                res = robust_loss(net, data.images[idx], data.labels[idx], cfg.rho, cfg.gamma,
                               cfg.pgd_steps, cfg.pgd_step_size)
                grads = net.gradients()
                for k, p in params.items():
                    velocity[k] *= cfg.momentum
                    velocity[k] += grads[k]
                    p -= lr * velocity[k]
                net.after_update()
                if cfg.max_operator_norm is not None:
                    net.cap_operator_norms(cfg.max_operator_norm)
                if not all(np.all(np.isfinite(p)) for p in params.values()):
                    raise NonFiniteError("non-finite parameters after update")
            except FloatingPointError as exc:
                net.load_parameters(good)
                result.diverged = True
                result.message = f"epoch {epoch + 1}: {exc}"
                return result
            sums += np.array([res.total, res.ce, res.reg]) * len(idx)
        sums /= len(data)
        rec = EpochRecord(epoch + 1, lr, float(sums[0]), float(sums[1]), float(sums[2]),
                          time.perf_counter() - start,
                          sum(l.soc.accumulate_seconds for l in socs) - soc_before,
                          "exact" if cfg.exact_grad else "fast")
        result.history.append(rec)
        if log is not None:
            log(rec)
    result.final_loss = evaluate_loss(net, data, cfg)
    return result
