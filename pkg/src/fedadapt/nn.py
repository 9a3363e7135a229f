"""A small numpy neural-network engine.

Only the fixed layer set needed by the simulator is supported: dense, conv2d,
relu, maxpool2d, global-avg-pool and flatten.  Arrays are batch-first and
channel-major (N, C, H, W).  Every model owns a single flat parameter vector;
layers see reshaped views into it, which is what FedAvg averages.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DataError, FormatError, InternalError

DTYPE = np.float32


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    kind = "dense"

    def param_shapes(self):
        return [(self.out_features, self.in_features), (self.out_features,)]

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ValueError(f"expects input ({self.in_features},), got {tuple(in_shape)}")
        return (self.out_features,)

    def fan_in(self):
        return self.in_features

    def forward(self, x, params):
        w, b = params
        return x @ w.T + b, x

    def backward(self, dy, cache, params, need_dx=True):
        w, _ = params
        x = cache
        dw = dy.T @ x
        db = dy.sum(axis=0)
        dx = dy @ w if need_dx else None
        return dx, (dw, db)


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 0
    kind = "conv2d"

    def param_shapes(self):
        k = self.kernel_size
        return [(self.out_channels, self.in_channels, k, k), (self.out_channels,)]

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ValueError(f"expects ({self.in_channels}, H, W) input, got {tuple(in_shape)}")
        _, h, w = in_shape
        k, s, p = self.kernel_size, self.stride, self.padding
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        if ho <= 0 or wo <= 0:
            raise ValueError(f"kernel {k} does not fit input {h}x{w} with padding {p}")
        return (self.out_channels, ho, wo)

    def fan_in(self):
        return self.in_channels * self.kernel_size**2

    def forward(self, x, params):
        w, b = params
        k, s, p = self.kernel_size, self.stride, self.padding
        n = x.shape[0]
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        ho, wo = win.shape[2], win.shape[3]
        # (N, Ho, Wo, C, k, k) -> rows of receptive fields
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
        out = cols @ w.reshape(self.out_channels, -1).T + b
        y = out.reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(y), (cols, xp.shape, ho, wo)

    def backward(self, dy, cache, params, need_dx=True):
        w, _ = params
        cols, padded_shape, ho, wo = cache
        k, s, p = self.kernel_size, self.stride, self.padding
        n = dy.shape[0]
        dflat = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, self.out_channels)
        dw = (dflat.T @ cols).reshape(w.shape)
        db = dflat.sum(axis=0)
        if not need_dx:
            return None, (dw, db)
        dcols = (dflat @ w.reshape(self.out_channels, -1)).reshape(n, ho, wo, self.in_channels, k, k)
        dxp = np.zeros(padded_shape, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return dxp, (dw, db)


@dataclass(frozen=True)
class ReLU:
    kind = "relu"

    def param_shapes(self):
        return []

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x, params):
        return np.maximum(x, 0).astype(x.dtype, copy=False), x > 0

    def backward(self, dy, cache, params, need_dx=True):
        return dy * cache, ()


@dataclass(frozen=True)
class MaxPool2d:
    window: int = 2
    stride: int | None = None
    kind = "maxpool2d"

    @property
    def step(self):
        return self.stride or self.window

    def param_shapes(self):
        return []

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ValueError(f"expects (C, H, W) input, got {tuple(in_shape)}")
        c, h, w = in_shape
        ho = (h - self.window) // self.step + 1
        wo = (w - self.window) // self.step + 1
        if ho <= 0 or wo <= 0:
            raise ValueError(f"window {self.window} larger than input {h}x{w}")
        return (c, ho, wo)

    def forward(self, x, params):
        k, s = self.window, self.step
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        flat = win.reshape(*win.shape[:4], k * k)
        arg = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return np.ascontiguousarray(y), (arg, x.shape)

    def backward(self, dy, cache, params, need_dx=True):
        arg, in_shape = cache
        k, s = self.window, self.step
        ho, wo = dy.shape[2], dy.shape[3]
        dx = np.zeros(in_shape, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                hit = arg == i * k + j
                dx[:, :, i : i + s * ho : s, j : j + s * wo : s] += dy * hit
        return dx, ()


@dataclass(frozen=True)
class GlobalAvgPool:
    kind = "global-avg-pool"

    def param_shapes(self):
        return []

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ValueError(f"expects (C, H, W) input, got {tuple(in_shape)}")
        return (in_shape[0],)

    def forward(self, x, params):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, dy, cache, params, need_dx=True):
        n, c, h, w = cache
        dx = np.broadcast_to((dy / (h * w))[:, :, None, None], cache)
        return np.array(dx), ()


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"

    def param_shapes(self):
        return []

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, params):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, params, need_dx=True):
        return dy.reshape(cache), ()


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv2d, ReLU, MaxPool2d, GlobalAvgPool, Flatten)}


def layer_to_dict(layer):
    d = {"kind": layer.kind}
    d.update({k: v for k, v in vars(layer).items()})
    return d


def layer_from_dict(d):
    d = dict(d)
    kind = d.pop("kind")
    if kind not in LAYER_KINDS:
        raise ConfigurationError(f"unknown layer kind {kind!r}")
    return LAYER_KINDS[kind](**d)


# ---------------------------------------------------------------------------
# parameters and models
# ---------------------------------------------------------------------------


@dataclass
class ModelParams:
    """Flat parameter vector plus per-layer (start, length) slices."""

    flat: np.ndarray
    offsets: tuple

    def __post_init__(self):
        pos = 0
        for start, length in self.offsets:
            if start != pos or length < 0:
                raise InternalError(f"non-contiguous parameter offsets {self.offsets}")
            pos += length
        if pos != self.flat.size:
            raise InternalError(f"offsets cover {pos} values but flat has {self.flat.size}")

    def copy(self):
        return ModelParams(self.flat.copy(), self.offsets)

    def with_flat(self, flat):
        flat = np.asarray(flat)
        if flat.shape != self.flat.shape:
            raise InternalError(f"parameter length {flat.size} != {self.flat.size}")
        return ModelParams(flat, self.offsets)


@dataclass
class Model:
    layers: tuple
    input_shape: tuple
    params: ModelParams
    shapes: tuple = field(init=False, repr=False)

    def __post_init__(self):
        self.layers = tuple(self.layers)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.shapes = infer_shapes(self.layers, self.input_shape)
        expected = sum(int(np.prod(s)) for layer in self.layers for s in layer.param_shapes())
        if self.params.flat.size != expected:
            raise ConfigurationError(
                f"parameter vector has {self.params.flat.size} values, layers declare {expected}"
            )
        if len(self.params.offsets) != len(self.layers):
            raise ConfigurationError("one offset pair per layer is required")

    @property
    def num_classes(self):
        return self.shapes[-1][0]

    @property
    def relu_positions(self):
        return [i for i, layer in enumerate(self.layers) if layer.kind == "relu"]

    def relu_layer(self, relu_index):
        """Layer position of the ``relu_index``-th ReLU (1-based)."""
        positions = self.relu_positions
        if not 1 <= relu_index <= len(positions):
            raise ConfigurationError(
                f"ReLU index {relu_index} out of range; model has {len(positions)} ReLU layers"
            )
        return positions[relu_index - 1]

    def relu_channels(self, relu_index):
        return self.shapes[self.relu_layer(relu_index) + 1][0]

    def with_params(self, params):
        if isinstance(params, np.ndarray):
            params = self.params.with_flat(params)
        return Model(self.layers, self.input_shape, params)

    def copy(self):
        return self.with_params(self.params.copy())


def infer_shapes(layers, input_shape):
    """Shapes of the input and each layer output; raise naming the offending layer."""
    shapes = [tuple(input_shape)]
    for i, layer in enumerate(layers):
        try:
            shapes.append(tuple(layer.output_shape(shapes[-1])))
        except ValueError as exc:
            raise ConfigurationError(f"layer {i} ({layer.kind}): {exc}") from None
    return tuple(shapes)


def param_views(model):
    views = []
    flat = model.params.flat
    for layer, (start, _) in zip(model.layers, model.params.offsets):
        pos = start
        arrays = []
        for shape in layer.param_shapes():
            size = int(np.prod(shape))
            arrays.append(flat[pos : pos + size].reshape(shape))
            pos += size
        views.append(arrays)
    return views


def make_offsets(layers):
    offsets, pos = [], 0
    for layer in layers:
        size = sum(int(np.prod(s)) for s in layer.param_shapes())
        offsets.append((pos, size))
        pos += size
    return tuple(offsets), pos


def init_params(layers, input_shape, seed, dtype=DTYPE):
    """Kaiming-uniform weights, bias uniform in +-1/sqrt(fan_in)."""
    infer_shapes(layers, input_shape)
    offsets, total = make_offsets(layers)
    rng = np.random.default_rng(seed)
    flat = np.zeros(total, dtype=dtype)
    for layer, (start, _) in zip(layers, offsets):
        shapes = layer.param_shapes()
        if not shapes:
            continue
        fan_in = layer.fan_in()
        w_shape, b_shape = shapes
        w_size, b_size = int(np.prod(w_shape)), int(np.prod(b_shape))
        w_bound = np.sqrt(6.0 / fan_in)
        b_bound = 1.0 / np.sqrt(fan_in)
        flat[start : start + w_size] = rng.uniform(-w_bound, w_bound, w_size)
        flat[start + w_size : start + w_size + b_size] = rng.uniform(-b_bound, b_bound, b_size)
    return ModelParams(flat, offsets)


def build_model(layers, input_shape, seed=0, dtype=DTYPE):
    layers = tuple(layers)
    return Model(layers, input_shape, init_params(layers, input_shape, seed, dtype))


def zero_model(layers, input_shape, dtype=DTYPE):
    offsets, total = make_offsets(layers)
    return Model(tuple(layers), input_shape, ModelParams(np.zeros(total, dtype=dtype), offsets))


def architecture(name, input_shape=(1, 12, 12), num_classes=10):
    """Layer list of a built-in architecture.

    ``small-cnn`` has two ReLUs, ``deep-cnn`` four, ``mlp`` two dense ReLUs.
    """
    input_shape = tuple(input_shape)
    if name == "small-cnn":
        c = input_shape[0]
        return (
            Conv2d(c, 32, 3, 1, 1),
            ReLU(),
            MaxPool2d(2),
            Conv2d(32, 32, 3, 1, 1),
            ReLU(),
            GlobalAvgPool(),
            Dense(32, num_classes),
        )
    if name == "deep-cnn":
        c = input_shape[0]
        return (
            Conv2d(c, 32, 3, 1, 1),
            ReLU(),
            Conv2d(32, 32, 3, 1, 1),
            ReLU(),
            MaxPool2d(2),
            Conv2d(32, 32, 3, 1, 1),
            ReLU(),
            Conv2d(32, 32, 3, 1, 1),
            ReLU(),
            GlobalAvgPool(),
            Dense(32, num_classes),
        )
    if name == "mlp":
        d = int(np.prod(input_shape))
        return (
            Flatten(),
            Dense(d, 64),
            ReLU(),
            Dense(64, 32),
            ReLU(),
            Dense(32, num_classes),
        )
    raise ConfigurationError(f"unknown architecture {name!r}; choose small-cnn, deep-cnn or mlp")


ARCHITECTURES = ("small-cnn", "deep-cnn", "mlp")


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    """Per-layer outputs of one forward pass (batch-first)."""

    outputs: list
    relu_positions: list

    @property
    def relu_outputs(self):
        return [self.outputs[p] for p in self.relu_positions if p < len(self.outputs)]

    def relu_output(self, relu_index):
        """Output of the ``relu_index``-th ReLU, counted from 1."""
        if not 1 <= relu_index <= len(self.relu_positions):
            raise ConfigurationError(f"ReLU index {relu_index} not captured")
        return self.outputs[self.relu_positions[relu_index - 1]]


def _as_batch(model, x):
    x = np.asarray(x)
    if x.shape == model.input_shape:
        return x[None], True
    if x.ndim == len(model.input_shape) + 1 and x.shape[1:] == model.input_shape:
        return x, False
    raise ConfigurationError(
        f"layer 0 ({model.layers[0].kind}): expects input {model.input_shape}, got {x.shape}"
    )


def _run(model, x, stop, keep_cache=True):
    views = param_views(model)
    x = x.astype(model.params.flat.dtype, copy=False)
    outputs, caches = [], []
    for i in range(stop + 1):
        x, cache = model.layers[i].forward(x, views[i])
        outputs.append(x)
        caches.append(cache if keep_cache else None)
    return outputs, caches, views


def forward(model, x, capture=False, stop=None):
    """Run the network on one sample or a batch.

    Returns ``(logits, trace)``; ``trace`` is None unless ``capture``.  With
    ``stop`` the pass ends after that layer position and its output is returned
    in place of the logits.
    """
    batch, single = _as_batch(model, x)
    last = len(model.layers) - 1 if stop is None else stop
    if not 0 <= last < len(model.layers):
        raise ConfigurationError(f"layer index {last} out of range (0..{len(model.layers) - 1})")
    outputs, _, _ = _run(model, batch, last, keep_cache=False)
    out = outputs[-1][0] if single else outputs[-1]
    trace = None
    if capture:
        if single:
            outputs = [o[0] for o in outputs]
        trace = ForwardTrace(outputs, model.relu_positions)
    return out, trace


def _backward(model, caches, views, dout, start, need_param_grads=True):
    """Backpropagate ``dout`` from layer ``start`` down to the input."""
    grads = np.zeros_like(model.params.flat) if need_param_grads else None
    for i in range(start, -1, -1):
        layer = model.layers[i]
        dout, layer_grads = layer.backward(dout, caches[i], views[i], need_dx=i > 0 or not need_param_grads)
        if need_param_grads and layer_grads:
            pos = model.params.offsets[i][0]
            for g in layer_grads:
                grads[pos : pos + g.size] = g.ravel()
                pos += g.size
    return dout, grads


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels):
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return -logp[np.arange(len(labels)), labels].mean()


def loss_and_grad(model, inputs, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the flat params."""
    inputs = np.asarray(inputs)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or len(labels) == 0:
        raise DataError("loss_and_grad needs a non-empty batch")
    if len(inputs) != len(labels):
        raise DataError(f"{len(inputs)} inputs but {len(labels)} labels")
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise DataError(f"labels must lie in [0, {model.num_classes}), got range [{labels.min()}, {labels.max()}]")
    batch, _ = _as_batch(model, inputs)
    outputs, caches, views = _run(model, batch, len(model.layers) - 1)
    logits = outputs[-1]
    n = len(labels)
    probs = softmax(logits)
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1
    dlogits /= n
    _, grads = _backward(model, caches, views, dlogits.astype(logits.dtype), len(model.layers) - 1)
    return float(cross_entropy(logits, labels)), grads


def input_gradient(model, x, layer, objective: Callable):
    """Gradient of ``objective(output_of_layer)`` with respect to ``x``.

    ``objective`` receives the layer output (same batch-ness as ``x``) and
    returns ``(value, d value / d output)``.  Returns ``(value, grad)`` with
    ``grad`` shaped like ``x``.
    """
    if not 0 <= layer < len(model.layers):
        raise ConfigurationError(f"objective attached to layer {layer}, model has {len(model.layers)} layers")
    batch, single = _as_batch(model, x)
    outputs, caches, views = _run(model, batch, layer)
    out = outputs[-1][0] if single else outputs[-1]
    value, dout = objective(out)
    dout = np.asarray(dout, dtype=outputs[-1].dtype)
    if single:
        dout = dout[None]
    dx, _ = _backward(model, caches, views, dout, layer, need_param_grads=False)
    return float(value), (dx[0] if single else dx)


def predict(model, inputs, batch_size=512):
    """Argmax class per sample; ties resolve to the lowest class index."""
    inputs = np.asarray(inputs)
    preds = []
    for start in range(0, len(inputs), batch_size):
        logits, _ = forward(model, inputs[start : start + batch_size])
        preds.append(logits.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


def sgd_step(params, grads, velocity, lr, momentum):
    """Heavy-ball SGD: ``v = momentum*v + g``; ``p = p - lr*v``. Returns new arrays."""
    params, grads, velocity = np.asarray(params), np.asarray(grads), np.asarray(velocity)
    if not params.shape == grads.shape == velocity.shape:
        raise InternalError(f"sgd_step length mismatch: {params.shape}, {grads.shape}, {velocity.shape}")
    dt = params.dtype.type
    velocity = dt(momentum) * velocity + grads
    return params - dt(lr) * velocity, velocity


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"FADPCKPT"
_VERSION = 1


def save_model(model, path, metadata=None):
    """Write a self-describing checkpoint; save/load/save is byte-identical."""
    header = {
        "version": _VERSION,
        "input_shape": list(model.input_shape),
        "layers": [layer_to_dict(layer) for layer in model.layers],
        "offsets": [list(o) for o in model.params.offsets],
        "dtype": model.params.flat.dtype.str,
        "count": int(model.params.flat.size),
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    flat = model.params.flat.astype(model.params.flat.dtype.newbyteorder("<"), copy=False)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(flat.tobytes())


def load_model(path, with_metadata=False):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _MAGIC:
        raise FormatError(f"{path}: not a fedadapt checkpoint", offset=0)
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header", offset=8)
    (hlen,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12 : 12 + hlen])
    except ValueError:
        raise FormatError(f"{path}: corrupt header", offset=12) from None
    dtype = np.dtype(header["dtype"])
    body = data[12 + hlen :]
    if len(body) != header["count"] * dtype.itemsize:
        raise FormatError(f"{path}: expected {header['count']} parameters", offset=12 + hlen)
    flat = np.frombuffer(body, dtype=dtype).astype(dtype.newbyteorder("="))
    layers = tuple(layer_from_dict(d) for d in header["layers"])
    offsets = tuple(tuple(o) for o in header["offsets"])
    model = Model(layers, tuple(header["input_shape"]), ModelParams(flat, offsets))
    return (model, header["metadata"]) if with_metadata else model


def count_params(layers: Sequence) -> int:
    return make_offsets(layers)[1]
