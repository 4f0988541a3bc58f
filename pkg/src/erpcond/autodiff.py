"""Layer-tape reverse-mode differentiation over dense numpy arrays.

A :class:`Graph` is an ordered chain of layers. :func:`forward` records every
intermediate activation together with the per-layer cache needed to run the
chain backwards, and :func:`backward` walks the tape in reverse, emitting one
gradient array per trainable parameter.

Feature maps use the ``(batch, maps, height, width)`` convention where height
is the electrode axis and width is time.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, InternalError, NumericError

DTYPE = np.float32
GRAD_CHECK_FLOOR = 1e-6


class Layer:
    """Base class. Subclasses are stateless apart from their declared shapes."""

    kind = "layer"

    def __init__(self, name: str):
        self.name = name

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}

    def buffer_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return {}

    def init_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def spec(self) -> dict:
        return {"kind": self.kind, "name": self.name}

    def forward(self, x, params, buffers, train, rng):
        raise NotImplementedError

    def backward(self, dy, cache, params, need):
        """Return ``(dx, grads)``; ``need`` holds the local param names wanted."""
        raise NotImplementedError


def _fan_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Conv2d(Layer):
    """Grouped 2-D convolution, stride 1.

    ``padding`` is ``"same"`` along the time axis or ``"valid"``; the electrode
    axis is never padded, so a kernel with ``kh`` equal to the electrode count
    collapses it (a spatial filter).
    """

    kind = "conv2d"

    def __init__(self, name, in_maps, out_maps, kernel, groups=1, padding="same", bias=False):
        super().__init__(name)
        if in_maps % groups or out_maps % groups:
            raise ConfigurationError(f"{name}: maps not divisible by groups={groups}")
        self.in_maps = in_maps
        self.out_maps = out_maps
        self.kernel = tuple(kernel)
        self.groups = groups
        self.padding = padding
        self.bias = bias

    def spec(self):
        return {
            **super().spec(),
            "in_maps": self.in_maps,
            "out_maps": self.out_maps,
            "kernel": list(self.kernel),
            "groups": self.groups,
            "padding": self.padding,
            "bias": self.bias,
        }

    def param_shapes(self):
        kh, kw = self.kernel
        shapes = {"weight": (self.out_maps, self.in_maps // self.groups, kh, kw)}
        if self.bias:
            shapes["bias"] = (self.out_maps,)
        return shapes

    def init_params(self, rng):
        kh, kw = self.kernel
        fan_in = (self.in_maps // self.groups) * kh * kw
        params = {"weight": _fan_uniform(rng, self.param_shapes()["weight"], fan_in)}
        if self.bias:
            params["bias"] = np.zeros(self.out_maps, dtype=DTYPE)
        return params

    def _pads(self):
        kw = self.kernel[1]
        if self.padding == "same":
            left = (kw - 1) // 2
            return left, kw - 1 - left
        return 0, 0

    def output_shape(self, in_shape):
        maps, h, w = in_shape
        if maps != self.in_maps:
            raise ConfigurationError(f"{self.name}: expected {self.in_maps} input maps, got {maps}")
        kh, kw = self.kernel
        left, right = self._pads()
        ho, wo = h - kh + 1, w + left + right - kw + 1
        if ho < 1 or wo < 1:
            raise ConfigurationError(f"{self.name}: kernel {self.kernel} larger than input {in_shape[1:]}")
        return (self.out_maps, ho, wo)

    def _depthwise(self):
        return self.groups > 1 and self.groups == self.in_maps and (self.kernel[0] == 1 or self.kernel[1] == 1)

    def forward(self, x, params, buffers, train, rng):
        n, i, h, w = x.shape
        g = self.groups
        ig, og = i // g, self.out_maps // g
        kh, kw = self.kernel
        left, right = self._pads()
        xp = np.pad(x, ((0, 0), (0, 0), (0, 0), (left, right))) if left or right else x
        if self._depthwise():
            y, cols = self._dw_forward(xp, params["weight"], og)
            if self.bias:
                y = y + params["bias"][None, :, None, None]
            return y, (xp if cols is None else cols, x.shape, xp.shape)
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        ho, wo = win.shape[2], win.shape[3]
        cols = (
            win.reshape(n, g, ig, ho, wo, kh, kw)
            .transpose(1, 0, 3, 4, 2, 5, 6)
            .reshape(g, n * ho * wo, ig * kh * kw)
        )
        wm = params["weight"].reshape(g, og, ig * kh * kw).transpose(0, 2, 1)
        out = np.matmul(cols, wm)
        y = out.reshape(g, n, ho, wo, og).transpose(1, 0, 4, 2, 3).reshape(n, g * og, ho, wo)
        if self.bias:
            y = y + params["bias"][None, :, None, None]
        return np.ascontiguousarray(y), (cols, x.shape, xp.shape)

    def _dw_forward(self, xp, weight, og):
        n, i, h, _ = xp.shape
        kh, kw = self.kernel
        if kw == 1:
            # spatial filter: contract the electrode axis
            y = np.matmul(weight.reshape(1, i, og, kh), xp)
            return y.reshape(n, i * og, 1, -1), None
        win = sliding_window_view(xp, kw, axis=3)
        wo = win.shape[3]
        cols = win.transpose(1, 0, 2, 3, 4).reshape(i, n * h * wo, kw)
        y = np.matmul(cols, weight.reshape(i, og, kw).transpose(0, 2, 1))
        y = y.reshape(i, n, h, wo, og).transpose(1, 0, 4, 2, 3).reshape(n, i * og, h, wo)
        return np.ascontiguousarray(y), cols

    def _dw_backward(self, dy, xp, x_shape, weight, need):
        n, i, h, w = x_shape
        og = self.out_maps // i
        kh, kw = self.kernel
        grads = {}
        if kw == 1:
            t = dy.shape[3]
            dyr = dy.reshape(n, i, og, t)
            if "weight" in need:
                xt = xp.transpose(1, 2, 0, 3).reshape(i, kh, n * t)
                dt = dyr.transpose(1, 2, 0, 3).reshape(i, og, n * t)
                grads["weight"] = np.matmul(dt, xt.transpose(0, 2, 1)).reshape(self.out_maps, 1, kh, 1)
            dx = None
            if need.get("__input__", True):
                dx = np.matmul(weight.reshape(1, i, og, kh).transpose(0, 1, 3, 2), dyr)
            return dx, grads
        cols = xp
        wo = dy.shape[3]
        dyr = dy.reshape(n, i, og, h, wo)
        if "weight" in need:
            dt = dyr.transpose(1, 0, 3, 4, 2).reshape(i, n * h * wo, og)
            gw = np.matmul(cols.transpose(0, 2, 1), dt)
            grads["weight"] = gw.transpose(0, 2, 1).reshape(self.out_maps, 1, 1, kw)
        if not need.get("__input__", True):
            return None, grads
        left, right = self._pads()
        # transposed convolution: correlate padded dy with the flipped kernel
        dyp = np.pad(dyr, ((0, 0), (0, 0), (0, 0), (0, 0), (kw - 1 - left, left)))
        win = sliding_window_view(dyp, kw, axis=4)
        wlen = win.shape[4]
        dcols = win.transpose(1, 0, 3, 4, 2, 5).reshape(i, n * h * wlen, og * kw)
        wf = weight.reshape(i, og, kw)[:, :, ::-1].reshape(i, og * kw, 1)
        dx = np.matmul(dcols, wf).reshape(i, n, h, wlen).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(dx), grads

    def backward(self, dy, cache, params, need):
        if self._depthwise():
            xp, x_shape, _ = cache
            dx, grads = self._dw_backward(dy, xp, x_shape, params["weight"], need)
            if "bias" in need:
                grads["bias"] = dy.sum(axis=(0, 2, 3), dtype=np.float64).astype(dy.dtype)
            return dx, grads
        cols, x_shape, xp_shape = cache
        n, i, h, w = x_shape
        g = self.groups
        ig, og = i // g, self.out_maps // g
        kh, kw = self.kernel
        ho, wo = dy.shape[2], dy.shape[3]
        dyr = dy.reshape(n, g, og, ho, wo).transpose(1, 0, 3, 4, 2).reshape(g, n * ho * wo, og)
        grads = {}
        if "weight" in need:
            dwm = np.matmul(cols.transpose(0, 2, 1), dyr)
            grads["weight"] = dwm.transpose(0, 2, 1).reshape(self.out_maps, ig, kh, kw)
        if "bias" in need:
            grads["bias"] = dy.sum(axis=(0, 2, 3), dtype=np.float64).astype(dy.dtype)
        if not need.get("__input__", True):
            return None, grads
        wm = params["weight"].reshape(g, og, ig * kh * kw)
        dcols = np.matmul(dyr, wm).reshape(g, n, ho, wo, ig, kh, kw)
        dcols = dcols.transpose(1, 0, 4, 2, 3, 5, 6).reshape(n, i, ho, wo, kh, kw)
        dxp = np.zeros(xp_shape, dtype=dy.dtype)
        for a in range(kh):
            for b in range(kw):
                dxp[:, :, a:a + ho, b:b + wo] += dcols[..., a, b]
        left, _ = self._pads()
        dx = dxp[..., left:left + w] if xp_shape != x_shape else dxp
        return np.ascontiguousarray(dx), grads


class Dense(Layer):
    kind = "dense"

    def __init__(self, name, in_features, out_features, bias=True):
        super().__init__(name)
        self.in_features = in_features
        self.out_features = out_features
        self.bias = bias

    def spec(self):
        return {**super().spec(), "in_features": self.in_features,
                "out_features": self.out_features, "bias": self.bias}

    def param_shapes(self):
        shapes = {"weight": (self.in_features, self.out_features)}
        if self.bias:
            shapes["bias"] = (self.out_features,)
        return shapes

    def init_params(self, rng):
        params = {"weight": _fan_uniform(rng, (self.in_features, self.out_features), self.in_features)}
        if self.bias:
            params["bias"] = np.zeros(self.out_features, dtype=DTYPE)
        return params

    def output_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise ConfigurationError(f"{self.name}: expected ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def forward(self, x, params, buffers, train, rng):
        y = x @ params["weight"]
        if self.bias:
            y = y + params["bias"]
        return y, x

    def backward(self, dy, cache, params, need):
        x = cache
        grads = {}
        if "weight" in need:
            grads["weight"] = x.T @ dy
        if "bias" in need:
            grads["bias"] = dy.sum(axis=0, dtype=np.float64).astype(dy.dtype)
        dx = dy @ params["weight"].T if need.get("__input__", True) else None
        return dx, grads


class BatchNorm(Layer):
    """Per-map normalisation over batch, height and width.

    Train mode normalises with batch statistics and updates the running
    buffers in place; eval mode uses the buffers only.
    """

    kind = "batchnorm"

    def __init__(self, name, maps, momentum=0.1, eps=1e-5):
        super().__init__(name)
        self.maps = maps
        self.momentum = momentum
        self.eps = eps

    def spec(self):
        return {**super().spec(), "maps": self.maps, "momentum": self.momentum, "eps": self.eps}

    def param_shapes(self):
        return {"gamma": (self.maps,), "beta": (self.maps,)}

    def buffer_shapes(self):
        return {"running_mean": (self.maps,), "running_var": (self.maps,)}

    def init_params(self, rng):
        return {"gamma": np.ones(self.maps, dtype=DTYPE), "beta": np.zeros(self.maps, dtype=DTYPE)}

    def init_buffers(self):
        return {"running_mean": np.zeros(self.maps, dtype=DTYPE),
                "running_var": np.ones(self.maps, dtype=DTYPE)}

    def output_shape(self, in_shape):
        if in_shape[0] != self.maps:
            raise ConfigurationError(f"{self.name}: expected {self.maps} maps, got {in_shape[0]}")
        return in_shape

    @staticmethod
    def _stats(x):
        n, c = x.shape[:2]
        flat = x.reshape(n, c, -1)
        m = flat.shape[0] * flat.shape[2]
        # pairwise float32 sums along the contiguous axis, reduced in float64
        s1 = flat.sum(axis=2).astype(np.float64).sum(axis=0)
        s2 = np.einsum("nct,nct->nc", flat, flat).astype(np.float64).sum(axis=0)
        mean = s1 / m
        var = np.maximum(s2 / m - mean * mean, 0.0)
        return mean, var, m

    def forward(self, x, params, buffers, train, rng):
        if train:
            mean, var, m = self._stats(x)
            if buffers is not None:
                unbiased = var * m / max(m - 1, 1)
                rm, rv = buffers["running_mean"], buffers["running_var"]
                rm[...] = (1 - self.momentum) * rm + self.momentum * mean
                rv[...] = (1 - self.momentum) * rv + self.momentum * unbiased
        else:
            mean = buffers["running_mean"].astype(np.float64)
            var = buffers["running_var"].astype(np.float64)
        inv = 1.0 / np.sqrt(var + self.eps)
        scale = params["gamma"].astype(np.float64) * inv
        shift = params["beta"].astype(np.float64) - mean * scale
        y = x * scale.astype(x.dtype)[:, None, None] + shift.astype(x.dtype)[:, None, None]
        return y, (x, mean.astype(x.dtype), inv.astype(x.dtype), train)

    def backward(self, dy, cache, params, need):
        x, mean, inv, train = cache
        n, c = dy.shape[:2]
        xhat = (x - mean[:, None, None]) * inv[:, None, None]
        dflat = dy.reshape(n, c, -1)
        sum_dy = dflat.sum(axis=2).astype(np.float64).sum(axis=0)
        sum_dy_xhat = np.einsum("nct,nct->nc", dflat, xhat.reshape(n, c, -1)).astype(np.float64).sum(axis=0)
        grads = {}
        if "gamma" in need:
            grads["gamma"] = sum_dy_xhat.astype(dy.dtype)
        if "beta" in need:
            grads["beta"] = sum_dy.astype(dy.dtype)
        if not need.get("__input__", True):
            return None, grads
        k = (params["gamma"] * inv)[:, None, None]
        if not train:
            return dy * k, grads
        m = dflat.shape[0] * dflat.shape[2]
        mean_dy = (sum_dy / m).astype(dy.dtype)[:, None, None]
        mean_dy_xhat = (sum_dy_xhat / m).astype(dy.dtype)[:, None, None]
        dx = k * (dy - mean_dy - xhat * mean_dy_xhat)
        return dx, grads


class ELU(Layer):
    kind = "elu"

    def forward(self, x, params, buffers, train, rng):
        neg = np.expm1(np.minimum(x, 0))
        # neg is exactly 0 wherever x > 0, so both branches fold into sums
        return np.maximum(x, 0) + neg, neg + 1

    def backward(self, dy, cache, params, need):
        return dy * cache, {}


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, params, buffers, train, rng):
        y = sigmoid(x)
        return y, y

    def backward(self, dy, cache, params, need):
        return dy * cache * (1 - cache), {}


class AvgPool(Layer):
    """Non-overlapping average pooling along time; the remainder is dropped."""

    kind = "avgpool"

    def __init__(self, name, size):
        super().__init__(name)
        self.size = size

    def spec(self):
        return {**super().spec(), "size": self.size}

    def output_shape(self, in_shape):
        maps, h, w = in_shape
        if w // self.size < 1:
            raise ConfigurationError(f"{self.name}: pool {self.size} wider than input width {w}")
        return (maps, h, w // self.size)

    def forward(self, x, params, buffers, train, rng):
        w = x.shape[-1]
        p = self.size
        stop = (w // p) * p
        y = x[..., 0:stop:p].copy()
        for k in range(1, p):
            y += x[..., k:stop:p]
        y *= np.asarray(1.0 / p, dtype=x.dtype)
        return y, w

    def backward(self, dy, cache, params, need):
        w = cache
        n, c, h, wo = dy.shape
        dx = np.zeros((n, c, h, w), dtype=dy.dtype)
        dx[..., : wo * self.size] = np.repeat(dy / self.size, self.size, axis=-1)
        return dx, {}


class Dropout(Layer):
    """Inverted dropout; the mask comes from the generator passed to forward."""

    kind = "dropout"

    def __init__(self, name, rate):
        super().__init__(name)
        if not 0 <= rate < 1:
            raise ConfigurationError(f"{name}: dropout rate {rate} outside [0, 1)")
        self.rate = rate

    def spec(self):
        return {**super().spec(), "rate": self.rate}

    def forward(self, x, params, buffers, train, rng):
        if not train or self.rate == 0:
            return x, None
        if rng is None:
            raise ConfigurationError(f"{self.name}: train-mode dropout needs a seeded generator")
        keep = 1.0 - self.rate
        mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
        return x * mask, mask

    def backward(self, dy, cache, params, need):
        return (dy if cache is None else dy * cache), {}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, params, buffers, train, rng):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, params, need):
        return dy.reshape(cache), {}


class SqueezeExcite(Layer):
    """Global-average-pool side branch producing a per-map sigmoid gate.

    ``y = x * sigmoid(W2 @ elu(W1 @ mean_hw(x) + b1) + b2)``
    """

    kind = "squeeze_excite"

    def __init__(self, name, maps, reduction=4):
        super().__init__(name)
        self.maps = maps
        self.hidden = max(maps // reduction, 1)
        self.reduction = reduction

    def spec(self):
        return {**super().spec(), "maps": self.maps, "reduction": self.reduction}

    def param_shapes(self):
        return {"w1": (self.maps, self.hidden), "b1": (self.hidden,),
                "w2": (self.hidden, self.maps), "b2": (self.maps,)}

    def init_params(self, rng):
        return {"w1": _fan_uniform(rng, (self.maps, self.hidden), self.maps),
                "b1": np.zeros(self.hidden, dtype=DTYPE),
                "w2": _fan_uniform(rng, (self.hidden, self.maps), self.hidden),
                "b2": np.zeros(self.maps, dtype=DTYPE)}

    def output_shape(self, in_shape):
        if in_shape[0] != self.maps:
            raise ConfigurationError(f"{self.name}: expected {self.maps} maps, got {in_shape[0]}")
        return in_shape

    def forward(self, x, params, buffers, train, rng):
        s = x.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)
        z1 = s @ params["w1"] + params["b1"]
        neg = np.expm1(np.minimum(z1, 0))
        a1 = np.where(z1 > 0, z1, neg)
        gate = sigmoid(a1 @ params["w2"] + params["b2"])
        y = x * gate[:, :, None, None]
        return y, (x, s, z1 > 0, neg, a1, gate)

    def backward(self, dy, cache, params, need):
        x, s, pos, neg, a1, gate = cache
        dgate = (dy * x).sum(axis=(2, 3), dtype=np.float64).astype(dy.dtype)
        dz2 = dgate * gate * (1 - gate)
        grads = {}
        if "w2" in need:
            grads["w2"] = a1.T @ dz2
        if "b2" in need:
            grads["b2"] = dz2.sum(axis=0)
        da1 = dz2 @ params["w2"].T
        dz1 = da1 * np.where(pos, 1, neg + 1).astype(dy.dtype)
        if "w1" in need:
            grads["w1"] = s.T @ dz1
        if "b1" in need:
            grads["b1"] = dz1.sum(axis=0)
        if not need.get("__input__", True):
            return None, grads
        hw = x.shape[2] * x.shape[3]
        ds = dz1 @ params["w1"].T
        dx = dy * gate[:, :, None, None] + (ds / hw)[:, :, None, None]
        return dx, grads


LAYER_KINDS = {
    cls.kind: cls
    for cls in (Conv2d, Dense, BatchNorm, ELU, Sigmoid, AvgPool, Dropout, Flatten, SqueezeExcite)
}


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    cls = LAYER_KINDS.get(spec.pop("kind", None))
    if cls is None:
        raise ConfigurationError(f"unknown layer spec {spec}")
    if "kernel" in spec:
        spec["kernel"] = tuple(spec["kernel"])
    return cls(**spec)


def sigmoid(x):
    # branch-free stable form
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(np.asarray(x).dtype)


@dataclass
class Graph:
    """Feed-forward chain of layers with flat ``layer.param`` naming."""

    layers: list[Layer]
    input_shape: tuple[int, ...]
    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate layer names in {names}")
        self.shapes = [self.input_shape]
        for layer in self.layers:
            self.shapes.append(layer.output_shape(self.shapes[-1]))

    @property
    def output_shape(self):
        return self.shapes[-1]

    def initialize(self, rng: np.random.Generator) -> "Graph":
        for layer in self.layers:
            for k, v in layer.init_params(rng).items():
                self.params[f"{layer.name}.{k}"] = v
            for k, v in layer.init_buffers().items():
                self.buffers[f"{layer.name}.{k}"] = v
        return self

    def local(self, store, layer):
        prefix = layer.name + "."
        return {k[len(prefix):]: v for k, v in store.items() if k.startswith(prefix)}

    def param_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def copy(self) -> "Graph":
        g = Graph(self.layers, self.input_shape)
        g.params = {k: v.copy() for k, v in self.params.items()}
        g.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return g

    def astype(self, dtype) -> "Graph":
        g = self.copy()
        g.params = {k: v.astype(dtype) for k, v in g.params.items()}
        g.buffers = {k: v.astype(dtype) for k, v in g.buffers.items()}
        return g

    def spec(self) -> list[dict]:
        return [layer.spec() for layer in self.layers]


@dataclass
class Trace:
    """Activations (input first, output last) plus per-layer backward caches."""

    activations: list[np.ndarray]
    caches: list
    train: bool


def forward(graph: Graph, x: np.ndarray, train: bool = False, rng=None, update_buffers=True) -> Trace:
    """Run the chain. Train mode uses batch statistics and dropout.

    ``update_buffers=False`` keeps batch-norm running statistics untouched
    in train mode (used by gradient checks).
    """
    x = np.asarray(x)
    if tuple(x.shape[1:]) != graph.input_shape:
        first = graph.layers[0].name if graph.layers else "<input>"
        raise ConfigurationError(
            f"{first}: input shape {tuple(x.shape[1:])} does not match graph input {graph.input_shape}"
        )
    activations, caches = [x], []
    for layer, expected in zip(graph.layers, graph.shapes[1:]):
        buffers = graph.local(graph.buffers, layer) if (update_buffers or not train) else None
        try:
            y, cache = layer.forward(activations[-1], graph.local(graph.params, layer), buffers, train, rng)
        except ValueError as exc:
            raise ConfigurationError(f"layer {layer.name}: {exc}") from exc
        if tuple(y.shape[1:]) != expected:
            raise ConfigurationError(f"layer {layer.name}: produced {y.shape[1:]}, declared {expected}")
        activations.append(y)
        caches.append(cache)
    return Trace(activations, caches, train)


def backward(graph: Graph, trace: Trace, upstream: np.ndarray, frozen=frozenset(), need_input_grad=False):
    """Propagate ``upstream`` (d loss / d output) back through the chain.

    Returns ``(grads, dx)``; ``grads`` has exactly the unfrozen parameter names
    and ``dx`` is the input gradient when requested (else ``None``).
    """
    if len(trace.caches) != len(graph.layers):
        raise InternalError("trace does not belong to this graph")
    if upstream.shape != trace.activations[-1].shape:
        raise InternalError(
            f"upstream gradient {upstream.shape} does not match output {trace.activations[-1].shape}"
        )
    trainable = [k for k in graph.params if k not in frozen]
    # earliest layer that owns a trainable parameter: nothing below it needs dx
    first_needed = len(graph.layers)
    for idx, layer in enumerate(graph.layers):
        if any(k.startswith(layer.name + ".") for k in trainable):
            first_needed = idx
            break
    if need_input_grad:
        first_needed = 0
    grads = {}
    dy = upstream
    for idx in range(len(graph.layers) - 1, first_needed - 1, -1):
        layer = graph.layers[idx]
        act = trace.activations[idx + 1]
        if dy.shape != act.shape:
            raise InternalError(f"stale activations at {layer.name}: {dy.shape} vs {act.shape}")
        need = {k: True for k in layer.param_shapes() if f"{layer.name}.{k}" not in frozen}
        need["__input__"] = idx > first_needed or need_input_grad
        dy, local = layer.backward(dy, trace.caches[idx], graph.local(graph.params, layer), need)
        for k, v in local.items():
            grads[f"{layer.name}.{k}"] = v
    for k in trainable:
        if k not in grads:
            grads[k] = np.zeros_like(graph.params[k])
    dx = dy if need_input_grad else None
    if need_input_grad and not graph.layers:
        dx = upstream
    return {k: grads[k] for k in trainable}, dx


def grad_check(graph: Graph, x: np.ndarray, epsilon: float = 1e-3, seed: int = 0,
               train: bool = True, corrupt: dict | None = None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    The scalar loss is ``sum(r * output)`` with a fixed random ``r``. The check
    runs in float64; ``corrupt`` maps parameter names to factors applied to
    the analytic gradient (fault injection). Per parameter the error is
    ``max|analytic - numeric| / max(max|numeric|, GRAD_CHECK_FLOOR)``.
    """
    if not 0 < epsilon <= 1e-1:
        raise ConfigurationError(f"epsilon {epsilon} outside (0, 0.1]")
    g = graph.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    out_shape = (x.shape[0],) + g.output_shape
    r = rng.standard_normal(out_shape)

    def loss():
        trace = forward(g, x, train=train, rng=np.random.default_rng(seed + 1), update_buffers=False)
        val = float(np.sum(r * trace.activations[-1]))
        if not np.isfinite(val):
            raise NumericError("non-finite loss during gradient check")
        return val, trace

    _, trace = loss()
    analytic, _ = backward(g, trace, r)
    worst = 0.0
    for name, p in g.params.items():
        a = analytic[name] * (corrupt or {}).get(name, 1.0)
        num = np.zeros_like(p)
        flat, nflat = p.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp, _ = loss()
            flat[i] = orig - epsilon
            fm, _ = loss()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * epsilon)
        # absolute floor: parameters whose true gradient is zero (a bias in
        # front of batch norm) would otherwise divide noise by noise
        scale = max(float(np.max(np.abs(num))), GRAD_CHECK_FLOOR)
        err = np.max(np.abs(a - num)) / scale
        worst = max(worst, float(err))
    return worst


class Optimizer:
    """Adam (default) or plain SGD over a flat parameter dict, updated in place."""

    def __init__(self, mode="adam", beta1=0.9, beta2=0.999, eps=1e-8):
        if mode not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer mode {mode!r}")
        self.mode = mode
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        if lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {lr}")
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name}")
        self.t += 1
        for name, g in grads.items():
            p = params[name]
            if self.mode == "sgd":
                p -= (lr * g).astype(p.dtype)
                continue
            g64 = g.astype(np.float64)
            m = self.m.setdefault(name, np.zeros(p.shape))
            v = self.v.setdefault(name, np.zeros(p.shape))
            m *= self.beta1
            m += (1 - self.beta1) * g64
            v *= self.beta2
            v += (1 - self.beta2) * g64 * g64
            mhat = m / (1 - self.beta1 ** self.t)
            vhat = v / (1 - self.beta2 ** self.t)
            p -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)
        return params


def optimizer_step(params, grads, state: Optimizer | None, lr: float, mode: str = "adam"):
    """Functional wrapper: returns ``(params, state)`` after one update."""
    if state is None:
        state = Optimizer(mode)
    state.step(params, grads, lr)
    return params, state
