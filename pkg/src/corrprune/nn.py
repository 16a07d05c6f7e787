"""Dense-tensor CNN layers with exact reverse-mode gradients.

Tensors are float64 numpy arrays in NCHW layout. Convolutions are valid
(unpadded) stride-1, pooling is 2x2/stride-2 with row-major tie breaking,
and flattening is channel-major: feature (c, r, col) lands at flat index
c*h*w + r*w + col. The structural surgery code relies on that ordering,
so it is fixed project-wide.

Forward passes are deterministic: the same network and input produce
bit-identical outputs across runs. Gradients are written for exactness
rather than speed and are validated against central finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Input geometry does not match a layer's declared shape."""


def _as_f64(a) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64))


@dataclass(eq=False)
class Conv2D:
    """Valid stride-1 convolution. weights: (c_out, c_in, k_h, k_w), bias: (c_out,)."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = _as_f64(self.weights)
        self.bias = _as_f64(self.bias)
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be 4-d (c_out, c_in, k_h, k_w), got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"conv bias must have shape ({self.weights.shape[0]},), got {self.bias.shape}")

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def k_h(self) -> int:
        return self.weights.shape[2]

    @property
    def k_w(self) -> int:
        return self.weights.shape[3]

    def copy(self) -> "Conv2D":
        return Conv2D(self.weights.copy(), self.bias.copy())


@dataclass(eq=False)
class Dense:
    """Affine map y = W x + b. weights: (n_out, n_in), bias: (n_out,)."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = _as_f64(self.weights)
        self.bias = _as_f64(self.bias)
        if self.weights.ndim != 2:
            raise ShapeError(f"dense weights must be 2-d (n_out, n_in), got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"dense bias must have shape ({self.weights.shape[0]},), got {self.bias.shape}")

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "Dense":
        return Dense(self.weights.copy(), self.bias.copy())


@dataclass(eq=False)
class MaxPool2:
    """2x2 max pooling with stride 2; spatial dims must be even."""

    def copy(self) -> "MaxPool2":
        return MaxPool2()


@dataclass(eq=False)
class ReLU:
    def copy(self) -> "ReLU":
        return ReLU()


@dataclass(eq=False)
class Flatten:
    """Channel-major flatten of (c, h, w) into c*h*w."""

    def copy(self) -> "Flatten":
        return Flatten()


LayerSpec = Conv2D | Dense | MaxPool2 | ReLU | Flatten

PARAM_NAMES = ("weights", "bias")


@dataclass(eq=False)
class Network:
    """Ordered layer list applied to inputs of shape input_shape = (c, h, w)."""

    layers: list
    input_shape: tuple[int, int, int]

    def copy(self) -> "Network":
        return Network([layer.copy() for layer in self.layers], tuple(self.input_shape))

    def conv_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, Conv2D)]

    def dense_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, Dense)]

    def param_items(self) -> Iterator[tuple[int, str, np.ndarray]]:
        """Yield (layer_index, param_name, array) for every parameter tensor."""
        for i, layer in enumerate(self.layers):
            if isinstance(layer, (Conv2D, Dense)):
                yield i, "weights", layer.weights
                yield i, "bias", layer.bias

    def num_classes(self) -> int:
        dense = self.dense_indices()
        if not dense:
            raise ShapeError("network has no dense layer; output width is undefined")
        return self.layers[dense[-1]].n_out


def layer_kind(layer: LayerSpec) -> str:
    return type(layer).__name__.lower()


def count_parameters(net: Network) -> int:
    return sum(arr.size for _, _, arr in net.param_items())


def check_finite(arr: np.ndarray, where: str = "tensor") -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {where}")


# ---------------------------------------------------------------------------
# shape inference

def output_shapes(net: Network) -> list[tuple[int, ...]]:
    """Per-layer output shapes (without the batch axis), validating compatibility.

    Raises ShapeError naming the offending layer and its producer on mismatch.
    """
    shape: tuple[int, ...] = tuple(net.input_shape)
    shapes = []
    for i, layer in enumerate(net.layers):
        src = f"layer {i - 1}" if i > 0 else "input"
        if isinstance(layer, Conv2D):
            if len(shape) != 3 or shape[0] != layer.c_in:
                raise ShapeError(
                    f"layer {i} (conv2d) expects (c={layer.c_in}, h, w), got {shape} from {src}")
            c, h, w = shape
            if h < layer.k_h or w < layer.k_w:
                raise ShapeError(
                    f"layer {i} (conv2d) kernel {layer.k_h}x{layer.k_w} does not fit input {h}x{w}")
            shape = (layer.c_out, h - layer.k_h + 1, w - layer.k_w + 1)
        elif isinstance(layer, MaxPool2):
            if len(shape) != 3:
                raise ShapeError(f"layer {i} (maxpool2) expects (c, h, w), got {shape} from {src}")
            c, h, w = shape
            if h % 2 or w % 2:
                raise ShapeError(f"layer {i} (maxpool2) needs even spatial dims, got {h}x{w}")
            shape = (c, h // 2, w // 2)
        elif isinstance(layer, ReLU):
            pass
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(layer, Dense):
            if len(shape) != 1 or shape[0] != layer.n_in:
                raise ShapeError(
                    f"layer {i} (dense) expects {layer.n_in} inputs, got {shape} from {src}")
            shape = (layer.n_out,)
        else:
            raise TypeError(f"unknown layer type {type(layer).__name__}")
        shapes.append(shape)
    return shapes


# ---------------------------------------------------------------------------
# forward ops

def conv2d_forward(x: np.ndarray, layer: Conv2D) -> np.ndarray:
    """Valid stride-1 convolution of x (c_in, h, w) or (B, c_in, h, w)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != layer.c_in:
        raise ShapeError(
            f"conv2d expects input channels {layer.c_in}, got shape {x.shape[1:] if x.ndim == 4 else x.shape}")
    if x.shape[2] < layer.k_h or x.shape[3] < layer.k_w:
        raise ShapeError(
            f"conv2d kernel {layer.k_h}x{layer.k_w} does not fit input {x.shape[2]}x{x.shape[3]}")
    win = sliding_window_view(x, (layer.k_h, layer.k_w), axis=(2, 3))
    out = np.einsum("bihwkl,oikl->bohw", win, layer.weights, optimize=True)
    out += layer.bias[:, None, None]
    return out[0] if single else out


def maxpool2_forward(x: np.ndarray) -> np.ndarray:
    out, _ = _maxpool2_with_argmax(np.asarray(x, dtype=np.float64))
    return out


def _maxpool2_with_argmax(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    single = x.ndim == 3
    if single:
        x = x[None]
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        b, c, h // 2, w // 2, 4)
    # argmax takes the first maximum, i.e. row-major order within the window
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return (out[0] if single else out), arg


def dense_forward(x: np.ndarray, layer: Dense) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.ndim != 2 or x.shape[1] != layer.n_in:
        raise ShapeError(f"dense expects {layer.n_in} inputs, got shape {x.shape}")
    out = x @ layer.weights.T + layer.bias
    return out[0] if single else out


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    """Run the full network on a batch (B, c, h, w); returns logits (B, n_classes)."""
    logits, _ = _forward_cached(net, x, keep_caches=False)
    return logits


def _forward_cached(net: Network, x: np.ndarray, keep_caches: bool = True):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != tuple(net.input_shape):
        raise ShapeError(f"network expects input {net.input_shape}, got {x.shape[1:]}")
    caches: list = []
    act = x
    for i, layer in enumerate(net.layers):
        try:
            if isinstance(layer, Conv2D):
                win = sliding_window_view(act, (layer.k_h, layer.k_w), axis=(2, 3))
                out = np.einsum("bihwkl,oikl->bohw", win, layer.weights, optimize=True)
                out += layer.bias[:, None, None]
                caches.append(win if keep_caches else None)
            elif isinstance(layer, MaxPool2):
                out, arg = _maxpool2_with_argmax(act)
                caches.append((arg, act.shape) if keep_caches else None)
            elif isinstance(layer, ReLU):
                out = np.maximum(act, 0.0)
                caches.append((act > 0) if keep_caches else None)
            elif isinstance(layer, Flatten):
                out = act.reshape(act.shape[0], -1)
                caches.append(act.shape if keep_caches else None)
            elif isinstance(layer, Dense):
                if act.ndim != 2 or act.shape[1] != layer.n_in:
                    raise ShapeError(
                        f"dense expects {layer.n_in} inputs, got shape {act.shape}")
                out = act @ layer.weights.T + layer.bias
                caches.append(act if keep_caches else None)
            else:
                raise TypeError(f"unknown layer type {type(layer).__name__}")
        except ShapeError as e:
            src = f"layer {i - 1}" if i > 0 else "the input"
            raise ShapeError(f"layer {i} ({layer_kind(layer)}): {e} (fed by {src})") from None
        act = out
    return act, caches


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits.

    Numerically stabilized by max subtraction; dlogits = (softmax - onehot) / B.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (B, n_classes), got {logits.shape}")
    b, n_classes = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels must be ({b},), got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        labels = labels.astype(np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes - 1}]")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(b), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b
    return loss, dlogits


def batch_loss(net: Network, batch: np.ndarray, labels: np.ndarray) -> float:
    loss, _ = softmax_xent(forward(net, batch), labels)
    return loss


# ---------------------------------------------------------------------------
# gradients

class Gradients:
    """Per-layer gradient tensors mirroring every parameter tensor of a Network."""

    def __init__(self, layers: list[Optional[dict[str, np.ndarray]]]):
        self.layers = layers

    @classmethod
    def zeros_for(cls, net: Network) -> "Gradients":
        out: list[Optional[dict[str, np.ndarray]]] = []
        for layer in net.layers:
            if isinstance(layer, (Conv2D, Dense)):
                out.append({"weights": np.zeros_like(layer.weights),
                            "bias": np.zeros_like(layer.bias)})
            else:
                out.append(None)
        return cls(out)

    def add_scaled(self, other: "Gradients", scale: float) -> "Gradients":
        """In-place self += scale * other; layers must align."""
        if len(self.layers) != len(other.layers):
            raise ShapeError("gradient layer counts differ")
        for mine, theirs in zip(self.layers, other.layers):
            if mine is None and theirs is None:
                continue
            if mine is None or theirs is None:
                raise ShapeError("gradient layer structure differs")
            for name in PARAM_NAMES:
                mine[name] += scale * theirs[name]
        return self


def backward_pass(net: Network, batch: np.ndarray, labels: np.ndarray) -> tuple[float, Gradients]:
    """Mean cross-entropy loss and its exact gradient w.r.t. every parameter."""
    logits, caches = _forward_cached(net, batch, keep_caches=True)
    loss, dy = softmax_xent(logits, labels)
    grads: list[Optional[dict[str, np.ndarray]]] = [None] * len(net.layers)
    for i in reversed(range(len(net.layers))):
        layer = net.layers[i]
        if isinstance(layer, Dense):
            x = caches[i]
            grads[i] = {"weights": dy.T @ x, "bias": dy.sum(axis=0)}
            dy = dy @ layer.weights
        elif isinstance(layer, Flatten):
            dy = dy.reshape(caches[i])
        elif isinstance(layer, ReLU):
            dy = dy * caches[i]
        elif isinstance(layer, MaxPool2):
            arg, in_shape = caches[i]
            b, c, h, w = in_shape
            scatter = np.zeros((b, c, h // 2, w // 2, 4), dtype=np.float64)
            np.put_along_axis(scatter, arg[..., None], dy[..., None], axis=-1)
            dy = scatter.reshape(b, c, h // 2, w // 2, 2, 2).transpose(
                0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        elif isinstance(layer, Conv2D):
            win = caches[i]
            dw = np.einsum("bihwkl,bohw->oikl", win, dy, optimize=True)
            db = dy.sum(axis=(0, 2, 3))
            kh, kw = layer.k_h, layer.k_w
            dy_pad = np.pad(dy, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            wnd = sliding_window_view(dy_pad, (kh, kw), axis=(2, 3))
            dy = np.einsum("bohwkl,oikl->bihw", wnd, layer.weights[:, :, ::-1, ::-1],
                           optimize=True)
            grads[i] = {"weights": dw, "bias": db}
    return loss, Gradients(grads)


# ---------------------------------------------------------------------------
# optimization

class MomentumState:
    """Velocity buffers for SGD with momentum, keyed by (layer_index, param_name)."""

    def __init__(self):
        self.velocity: dict[tuple[int, str], np.ndarray] = {}

    def reset(self) -> None:
        self.velocity.clear()


def sgd_update(net: Network, grads: Gradients, lr: float, momentum: float,
               state: MomentumState) -> Network:
    """v <- momentum*v + g; w <- w - lr*v for every parameter. Mutates net in place."""
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    for i, layer in enumerate(net.layers):
        g = grads.layers[i]
        if g is None:
            continue
        for name in PARAM_NAMES:
            param = getattr(net.layers[i], name)
            if g[name].shape != param.shape:
                raise ShapeError(
                    f"gradient shape {g[name].shape} does not match layer {i} "
                    f"{name} shape {param.shape}")
            key = (i, name)
            v = state.velocity.get(key)
            if v is None:
                v = np.zeros_like(param)
                state.velocity[key] = v
            v *= momentum
            v += g[name]
            param -= lr * v
    return net


def grad_check_param(net: Network, batch: np.ndarray, labels: np.ndarray,
                     param_coord: tuple[int, str, int], h: float = 1e-5) -> float:
    """Relative error between the analytic gradient and a central difference.

    param_coord is (layer_index, "weights"|"bias", flat_index). Returns
    |analytic - numeric| / max(1e-12, |analytic|, |numeric|).
    """
    if h <= 0:
        raise ValueError("finite-difference step h must be > 0")
    layer_idx, name, flat = param_coord
    _, grads = backward_pass(net, batch, labels)
    analytic = float(grads.layers[layer_idx][name].ravel()[flat])
    arr = getattr(net.layers[layer_idx], name)
    flat_view = arr.ravel()
    orig = float(flat_view[flat])
    flat_view[flat] = orig + h
    loss_plus = batch_loss(net, batch, labels)
    flat_view[flat] = orig - h
    loss_minus = batch_loss(net, batch, labels)
    flat_view[flat] = orig
    numeric = (loss_plus - loss_minus) / (2.0 * h)
    return abs(analytic - numeric) / max(1e-12, abs(analytic), abs(numeric))


# ---------------------------------------------------------------------------
# construction

def he_conv(rng: np.random.Generator, c_out: int, c_in: int, k_h: int, k_w: int) -> Conv2D:
    std = np.sqrt(2.0 / (c_in * k_h * k_w))
    return Conv2D(rng.normal(0.0, std, size=(c_out, c_in, k_h, k_w)), np.zeros(c_out))


def he_dense(rng: np.random.Generator, n_out: int, n_in: int) -> Dense:
    std = np.sqrt(2.0 / n_in)
    return Dense(rng.normal(0.0, std, size=(n_out, n_in)), np.zeros(n_out))


def lenet5(rng: np.random.Generator, conv_filters: tuple[int, int] = (20, 50),
           hidden: int = 500, input_shape: tuple[int, int, int] = (1, 28, 28),
           num_classes: int = 10, kernel: int = 5) -> Network:
    """Conv-pool-conv-pool-dense-dense stack; defaults give the 20-50-800-500 net."""
    c1, c2 = conv_filters
    c_in, h, w = input_shape
    layers = [
        he_conv(rng, c1, c_in, kernel, kernel),
        ReLU(),
        MaxPool2(),
        he_conv(rng, c2, c1, kernel, kernel),
        ReLU(),
        MaxPool2(),
        Flatten(),
    ]
    probe = Network(list(layers), input_shape)
    flat = output_shapes(probe)[-1][0]
    layers += [
        he_dense(rng, hidden, flat),
        ReLU(),
        he_dense(rng, num_classes, hidden),
    ]
    net = Network(layers, input_shape)
    output_shapes(net)  # validate the stack end to end
    return net


def predict(net: Network, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Argmax class predictions, evaluated batch-wise in deterministic order."""
    out = np.empty(len(images), dtype=np.int64)
    for start in range(0, len(images), batch_size):
        logits = forward(net, images[start:start + batch_size])
        out[start:start + batch_size] = logits.argmax(axis=1)
    return out
