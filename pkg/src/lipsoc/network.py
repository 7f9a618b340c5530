"""LipConvnet-n: stacked skew orthogonal convolutions, MaxMin activations,
rearrangement and 1-Lipschitz pooling, followed by a linear or MLP head.

Each layer exposes ``forward(x, train)`` and ``backward(grad)``; backward
returns the input gradient and leaves parameter gradients in ``grads``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import pooling
from .certify import MlpHead, normalize_rows, sigmoid, softplus
from .soc import DEFAULT_K_EVAL, DEFAULT_K_TRAIN, SocLayer
from .tensor import ShapeError, spectral_norm_power_method

POOL_KINDS = ("max", "angular", "polyline")
HEAD_KINDS = ("linear", "mlp")


@dataclass
class LipConvnetConfig:
    depth: int = 5
    base_channels: int = 32
    blocks: int = 5
    pool: str = "max"
    head: str = "linear"
    hidden: int = 64
    in_shape: tuple[int, int, int] = (3, 32, 32)
    classes: int = 10
    kernel: int = 3
    k_train: int = DEFAULT_K_TRAIN
    k_eval: int = DEFAULT_K_EVAL
    signed_pool: bool = True
    init_norm: float = 1.0

    def __post_init__(self):
        self.in_shape = tuple(int(v) for v in self.in_shape)
        if self.depth < 5 or self.depth % 5:
            raise ValueError(f"depth must be a positive multiple of 5, got {self.depth}")
        if self.pool not in POOL_KINDS:
            raise ValueError(f"pool must be one of {POOL_KINDS}, got {self.pool!r}")
        if self.head not in HEAD_KINDS:
            raise ValueError(f"head must be one of {HEAD_KINDS}, got {self.head!r}")
        c, h, w = self.in_shape
        if h != w or h % (2**self.blocks):
            raise ShapeError(
                f"input {h}x{w} must be square and divisible by 2^{self.blocks} for {self.blocks} blocks"
            )
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and positive, got {self.kernel}")
        if c > self.base_channels:
            raise ShapeError(f"base_channels {self.base_channels} < input channels {c}")

    @property
    def conv_layers(self) -> int:
        return 1 + self.blocks * (self.depth // 5)

    def to_dict(self) -> dict:
        return asdict(self)


class Layer:
    name = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def out_shape(self, shape):
        return shape

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def after_update(self):
        pass


class ChannelPad(Layer):
    """Zero-pad channels; an isometry."""

    name = "pad"

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels

    def forward(self, x, train=False):
        pad = [(0, 0)] * x.ndim
        pad[-3] = (0, self.out_channels - self.in_channels)
        return np.pad(x, pad)

    def backward(self, grad):
        return np.ascontiguousarray(grad[..., : self.in_channels, :, :])

    def out_shape(self, shape):
        return (self.out_channels,) + tuple(shape[1:])


class SocConv(Layer):
    name = "soc"

    def __init__(self, channels, spatial, kernel=3, k_train=DEFAULT_K_TRAIN, k_eval=DEFAULT_K_EVAL,
                 rng=None, init_norm=1.0):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        free = rng.standard_normal((channels, channels, kernel, kernel))
        self.soc = SocLayer(free, k_train=k_train, k_eval=k_eval)
        self.spatial = spatial
        self.exact = False
        if init_norm:
            sigma = self.operator_norm()
            free *= init_norm / sigma
            self.soc.set_free(free)
        self.params = {"free": self.soc.free.copy(), "bias": self.soc.bias}
        self._train_k = None
        self._power_vec = None

    @property
    def in_shape(self):
        return (self.soc.width, self.spatial, self.spatial)

    def operator_norm(self, iters=100) -> float:
        res = spectral_norm_power_method(self.soc.apply_operator, lambda v: -self.soc.apply_operator(v),
                                         self.in_shape, iters=iters, tol=1e-9)
        return res.sigma

    def cap_norm(self, max_norm: float, iters: int = 2) -> float:
        """Rescale ``free`` so the power estimate of ``||A||`` is at most ``max_norm``.

        The power vector persists between calls, so a few iterations per
        training step track the top singular vector as the filter drifts.
        """
        if self._power_vec is None:
            self._power_vec = np.random.default_rng(0).standard_normal(self.in_shape)
        v = self._power_vec
        sigma = 0.0
        for _ in range(iters):
            w = self.soc.apply_operator(v / np.linalg.norm(v))
            sigma = float(np.linalg.norm(w))
            if sigma == 0.0:
                return 0.0
            v = -self.soc.apply_operator(w)
        self._power_vec = v / np.linalg.norm(v)
        if sigma > max_norm:
            self.params["free"] *= max_norm / sigma
            self.sync()
        return sigma

    def sync(self):
        """Push ``params['free']`` (updated in place) into the skew operator."""
        self.soc.set_free(self.params["free"])
        self.soc.bias = self.params["bias"]

    def after_update(self):
        self.sync()

    def forward(self, x, train=False):
        if train:
            self._train_k = self.soc.k_train
            return self.soc.forward(x, train=True, keep_all=self.exact)
        return self.soc.forward(x, self.soc.k_eval)

    def backward(self, grad):
        gx, gfree, gb = self.soc.backward(grad, exact=self.exact, k=self._train_k)
        self.grads["free"] = self.grads.get("free", 0) + gfree
        self.grads["bias"] = self.grads.get("bias", 0) + gb
        return gx

    def input_grad(self, grad):
        """Eval-mode input gradient (k_eval terms), no parameter gradients."""
        return self.soc.vjp(grad, self.soc.k_eval)

    def lipschitz_handle(self):
        return (lambda v: self.soc.jvp(v, self.soc.k_eval),
                lambda v: self.soc.vjp(v, self.soc.k_eval),
                self.in_shape)


class MaxMin(Layer):
    name = "maxmin"

    def forward(self, x, train=False):
        self._x = x
        return pooling.maxmin(x)

    def backward(self, grad):
        return pooling.maxmin_backward(self._x, grad)


class Rearrange(Layer):
    name = "rearrange"

    def forward(self, x, train=False):
        return pooling.rearrange(x)

    def backward(self, grad):
        return pooling.rearrange_inverse(grad)

    def out_shape(self, shape):
        c, h, w = shape
        return (4 * c, h // 2, w // 2)


class _HalvingPool(Layer):
    def out_shape(self, shape):
        c, h, w = shape
        return (c // 2, h, w)


class MaxPool(_HalvingPool):
    name = "maxpool"

    def forward(self, x, train=False):
        self._x = x
        return pooling.half_max_pool(x)

    def backward(self, grad):
        return pooling.half_max_pool_backward(self._x, grad)


class AngularPool(_HalvingPool):
    """Distance to two rays at ``+-theta``; theta is one learnable scalar."""

    name = "angular"

    def __init__(self, theta=math.pi / 4, signed=True):
        super().__init__()
        self.signed = signed
        self.params = {"theta": np.array([theta], dtype=np.float64)}

    @property
    def theta(self) -> float:
        return float(self.params["theta"][0])

    def forward(self, x, train=False):
        self._x = x
        return pooling.projection_pool_layer(x, self.theta, self.signed)

    def backward(self, grad):
        gz, gt = pooling.projection_pool_backward(self._x, self.theta, grad, self.signed)
        self.grads["theta"] = self.grads.get("theta", 0) + np.array([gt])
        return gz

    def after_update(self):
        self.params["theta"][0] = pooling.clamp_theta(self.theta)


class PolylinePool(_HalvingPool):
    """Distance to a learnable open polyline (unsigned)."""

    name = "polyline"

    def __init__(self, vertices=None):
        super().__init__()
        if vertices is None:
            t, r = math.pi / 4, 4.0
            vertices = [[r * math.cos(t), r * math.sin(t)], [0.0, 0.0], [r * math.cos(t), -r * math.sin(t)]]
        self.params = {"vertices": np.asarray(vertices, dtype=np.float64)}

    def manifold(self):
        return pooling.PiecewiseLinearManifold(self.params["vertices"])

    def forward(self, x, train=False):
        self._x = x
        return pooling.polyline_pool_layer(x, self.manifold())

    def backward(self, grad):
        gz, gv = pooling.polyline_pool_backward(self._x, self.manifold(), grad)
        self.grads["vertices"] = self.grads.get("vertices", 0) + gv
        return gz


class Flatten(Layer):
    name = "flatten"

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)

    def out_shape(self, shape):
        return (int(np.prod(shape)),)


# -- heads ---------------------------------------------------------------

class LinearHead(Layer):
    """Logits ``normalize_rows(V) y + b`` (row normalisation when ``lln``)."""

    name = "linear"

    def __init__(self, in_dim, classes, rng, lln=True):
        super().__init__()
        self.lln = lln
        self.params = {"V": rng.standard_normal((classes, in_dim)) / math.sqrt(in_dim),
                       "b": np.zeros(classes)}

    def weight(self):
        return normalize_rows(self.params["V"]) if self.lln else self.params["V"]

    def forward(self, y, train=False):
        self._y = y
        return y @ self.weight().T + self.params["b"]

    def backward(self, grad):
        W = self.weight()
        gW = grad.T @ self._y
        V = self.params["V"]
        if self.lln:
            norms = np.linalg.norm(V, axis=1, keepdims=True)
            gV = (gW - np.sum(gW * W, axis=1, keepdims=True) * W) / norms
        else:
            gV = gW
        self.grads["V"] = self.grads.get("V", 0) + gV
        self.grads["b"] = self.grads.get("b", 0) + grad.sum(axis=0)
        return grad @ W

    def input_grad(self, grad):
        return grad @ self.weight()


class MlpHeadLayer(Layer):
    name = "mlp"

    def __init__(self, in_dim, hidden, classes, rng):
        super().__init__()
        self.params = {"W1": rng.standard_normal((hidden, in_dim)) / math.sqrt(in_dim),
                       "b1": np.zeros(hidden),
                       "W2": rng.standard_normal((classes, hidden)) / math.sqrt(hidden),
                       "b2": np.zeros(classes)}

    def as_head(self) -> MlpHead:
        p = self.params
        return MlpHead(p["W1"], p["b1"], p["W2"], p["b2"])

    def forward(self, y, train=False):
        p = self.params
        self._y = y
        self._z = y @ p["W1"].T + p["b1"]
        self._s = softplus(self._z)
        return self._s @ p["W2"].T + p["b2"]

    def backward(self, grad):
        p = self.params
        gs = grad @ p["W2"]
        gz = gs * sigmoid(self._z)
        for name, val in (("W2", grad.T @ self._s), ("b2", grad.sum(axis=0)),
                          ("W1", gz.T @ self._y), ("b1", gz.sum(axis=0))):
            self.grads[name] = self.grads.get(name, 0) + val
        return gz @ p["W1"]

    def input_grad(self, grad):
        p = self.params
        z = self._y @ p["W1"].T + p["b1"]
        return ((grad @ p["W2"]) * sigmoid(z)) @ p["W1"]


# -- network -------------------------------------------------------------

@dataclass
class Network:
    config: LipConvnetConfig
    layers: list[Layer]
    head: Layer
    shapes: list[tuple] = field(default_factory=list)

    @property
    def feature_dim(self) -> int:
        return int(np.prod(self.shapes[-1]))

    def set_exact_grad(self, exact: bool) -> None:
        for layer in self.soc_layers():
            layer.exact = exact

    def soc_layers(self) -> list[SocConv]:
        return [l for l in self.layers if isinstance(l, SocConv)]

    def features(self, x, train=False):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        for layer in self.layers:
            x = layer.forward(x, train)
        return x[0] if single else x

    def __call__(self, x):
        return self.logits(x)

    def logits(self, x, train=False):
        y = self.features(x, train)
        return self.head.forward(y[None] if y.ndim == 1 else y, train)

    def backward_features(self, grad_y):
        g = grad_y
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def input_gradient(self, x, grad_logits):
        """Eval-mode gradient of ``<grad_logits, logits(x)>`` w.r.t. ``x``."""
        y = self.features(x)
        self.head.forward(y)
        g = self.head.input_grad(grad_logits)
        for layer in reversed(self.layers):
            g = layer.input_grad(g) if isinstance(layer, SocConv) else layer.backward(g)
        return g

    def named_layers(self):
        for i, layer in enumerate(self.layers):
            yield f"layers.{i}.{layer.name}", layer
        yield f"head.{self.head.name}", self.head

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, layer in self.named_layers():
            for k, v in layer.params.items():
                out[f"{prefix}.{k}"] = v
        return out

    def gradients(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, layer in self.named_layers():
            for k, v in layer.params.items():
                out[f"{prefix}.{k}"] = np.asarray(layer.grads.get(k, np.zeros_like(v)), dtype=np.float64)
        return out

    def zero_grad(self):
        for _, layer in self.named_layers():
            layer.zero_grad()

    def after_update(self):
        for _, layer in self.named_layers():
            layer.after_update()

    def load_parameters(self, params: dict[str, np.ndarray]) -> None:
        own = self.parameters()
        missing = set(own) - set(params)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for prefix, layer in self.named_layers():
            for k in layer.params:
                val = np.asarray(params[f"{prefix}.{k}"], dtype=np.float64)
                if val.shape != layer.params[k].shape:
                    raise ShapeError(f"{prefix}.{k}: expected {layer.params[k].shape}, got {val.shape}")
                layer.params[k][...] = val
        self.after_update()

    def cap_operator_norms(self, max_norm: float, iters: int = 2) -> list[float]:
        return [layer.cap_norm(max_norm, iters) for layer in self.soc_layers()]

    def lipschitz_handles(self):
        return [layer.lipschitz_handle() for layer in self.soc_layers()]

    def mlp_head(self) -> MlpHead:
        if not isinstance(self.head, MlpHeadLayer):
            raise TypeError("network has a linear head")
        return self.head.as_head()


def build_lipconvnet(cfg: LipConvnetConfig, seed: int = 0) -> Network:
    """Initial SOC (input channels zero-padded to ``base_channels``) + MaxMin,
    then per block: ``depth/5 - 1`` x (SOC + MaxMin), Rearrange, SOC, Pool.
    """
    rng = np.random.default_rng(seed)
    c, h, _ = cfg.in_shape
    layers: list[Layer] = []
    shapes = [tuple(cfg.in_shape)]

    def add(layer):
        layers.append(layer)
        shapes.append(layer.out_shape(shapes[-1]))

    def soc(channels, spatial):
        # a kernel wider than 2n - 1 only sees padding, so shrink it at tiny extents
        kernel = min(cfg.kernel, 2 * spatial - 1)
        return SocConv(channels, spatial, kernel, cfg.k_train, cfg.k_eval, rng, cfg.init_norm)

    add(ChannelPad(c, cfg.base_channels))
    add(soc(cfg.base_channels, h))
    add(MaxMin())
    for _ in range(cfg.blocks):
        q, r, _ = shapes[-1]
        for _ in range(cfg.depth // 5 - 1):
            add(soc(q, r))
            add(MaxMin())
        add(Rearrange())
        add(soc(4 * q, r // 2))
        if cfg.pool == "max":
            add(MaxPool())
        elif cfg.pool == "angular":
            add(AngularPool(signed=cfg.signed_pool))
        else:
            add(PolylinePool())
    add(Flatten())
    dim = shapes[-1][0]
    if cfg.head == "linear":
        head = LinearHead(dim, cfg.classes, rng)
    else:
        head = MlpHeadLayer(dim, cfg.hidden, cfg.classes, rng)
    net = Network(cfg, layers, head, shapes)
    if len(net.soc_layers()) != cfg.conv_layers:
        raise AssertionError("layer count does not match depth")
    return net


def shape_trace(net: Network) -> list[tuple[str, tuple]]:
    return [(layer.name, shape) for layer, shape in zip(net.layers, net.shapes[1:])]
