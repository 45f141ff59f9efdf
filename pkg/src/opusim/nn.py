"""Minimal feedforward network engine with exact reverse-mode gradients.

Layers operate on numpy arrays, batch-first. Every layer exposes
``params`` (named arrays, possibly empty), ``forward_cache`` returning the
output plus whatever the backward pass needs, and ``backward`` mapping an
upstream gradient to (input gradient, parameter gradients). Gradients are
exact: they are checked against central finite differences in the test
suite, so any new layer must pass the same check.

A defense slot (see :mod:`opusim.opu`) may appear at most once in a model.
It is detected by duck typing (``is_defense_slot``) so that this module
stays independent of the defense implementation. Exact backprop through a
non-differentiable slot raises :class:`BlockedPathError`; training such a
model goes through :func:`opusim.dfa.hybrid_backward` instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BlockedPathError, InputError


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, shift-stabilized. Works on (C,) or (B, C)."""
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (num_classes,), dtype=dtype)
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


@dataclass
class LossValue:
    """Scalar loss plus the gradients produced alongside it.

    ``input_grad`` is the gradient w.r.t. the operation's own input
    (logits for :func:`cross_entropy`, the network input for
    :func:`backward_bp`). ``param_grads`` maps parameter names to
    gradient arrays and is empty when no parameters are involved.
    """

    value: float
    input_grad: np.ndarray
    param_grads: dict[str, np.ndarray] = field(default_factory=dict)


class Dense:
    """Fully-connected layer: y = x @ W + b, W of shape (in_dim, out_dim)."""

    differentiable = True

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        if rng is None:
            self.W = np.zeros((in_dim, out_dim), dtype=dtype)
        else:
            std = np.sqrt(2.0 / in_dim)
            self.W = (rng.standard_normal((in_dim, out_dim)) * std).astype(dtype)
        self.b = np.zeros(out_dim, dtype=dtype)

    @property
    def params(self):
        return {"W": self.W, "b": self.b}

    def forward_cache(self, x):
        if x.shape[-1] != self.in_dim:
            raise InputError(f"dense expects last dim {self.in_dim}, got {x.shape}")
        return x @ self.W + self.b, x

    def backward(self, grad, x):
        gW = x.T @ grad
        gb = grad.sum(axis=0)
        gx = grad @ self.W.T
        return gx, {"W": gW, "b": gb}


class Conv2d:
    """2D convolution on (B, C, H, W) input, direct computation.

    Stride and zero padding are fixed at construction. The forward and
    backward passes loop over the kernel offsets (cheap for small kernels)
    so the arithmetic is a plain sum of strided GEMMs.
    """

    differentiable = True

    def __init__(self, in_ch: int, out_ch: int, ksize: int = 3, stride: int = 1,
                 pad: int = 0, rng: np.random.Generator | None = None, dtype=np.float64):
        self.in_ch, self.out_ch = int(in_ch), int(out_ch)
        self.ksize, self.stride, self.pad = int(ksize), int(stride), int(pad)
        if rng is None:
            self.W = np.zeros((out_ch, in_ch, ksize, ksize), dtype=dtype)
        else:
            std = np.sqrt(2.0 / (in_ch * ksize * ksize))
            self.W = (rng.standard_normal((out_ch, in_ch, ksize, ksize)) * std).astype(dtype)
        self.b = np.zeros(out_ch, dtype=dtype)

    @property
    def params(self):
        return {"W": self.W, "b": self.b}

    def _out_hw(self, H, W):
        k, s, p = self.ksize, self.stride, self.pad
        ho = (H + 2 * p - k) // s + 1
        wo = (W + 2 * p - k) // s + 1
        if ho <= 0 or wo <= 0:
            raise InputError(f"conv output empty for input {(H, W)}")
        return ho, wo

    def forward_cache(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise InputError(f"conv expects (B,{self.in_ch},H,W), got {x.shape}")
        B, _, H, Wd = x.shape
        ho, wo = self._out_hw(H, Wd)
        k, s, p = self.ksize, self.stride, self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        y = np.zeros((B, self.out_ch, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                patch = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
                y += np.einsum("bchw,fc->bfhw", patch, self.W[:, :, i, j], optimize=True)
        y += self.b[None, :, None, None]
        return y, (xp, x.shape)

    def backward(self, grad, cache):
        xp, x_shape = cache
        B, _, H, Wd = x_shape
        ho, wo = grad.shape[2], grad.shape[3]
        k, s, p = self.ksize, self.stride, self.pad
        gW = np.zeros_like(self.W)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                patch = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
                gW[:, :, i, j] = np.einsum("bfhw,bchw->fc", grad, patch, optimize=True)
                gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += np.einsum(
                    "bfhw,fc->bchw", grad, self.W[:, :, i, j], optimize=True)
        gb = grad.sum(axis=(0, 2, 3))
        gx = gxp[:, :, p:p + H, p:p + Wd] if p else gxp
        return gx, {"W": gW, "b": gb}


class ReLU:
    differentiable = True
    params: dict = {}

    def forward_cache(self, x):
        return np.maximum(x, 0.0), x > 0

    def backward(self, grad, mask):
        return grad * mask, {}


class MaxPool2d:
    """Non-overlapping max pooling; input H and W must divide the pool size."""

    differentiable = True
    params: dict = {}

    def __init__(self, size: int = 2):
        self.size = int(size)

    def forward_cache(self, x):
        s = self.size
        B, C, H, Wd = x.shape
        if H % s or Wd % s:
            raise InputError(f"pool size {s} does not divide input {(H, Wd)}")
        ho, wo = H // s, Wd // s
        windows = x.reshape(B, C, ho, s, wo, s).transpose(0, 1, 2, 4, 3, 5).reshape(
            B, C, ho, wo, s * s)
        idx = np.argmax(windows, axis=-1)
        y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape)

    def backward(self, grad, cache):
        idx, x_shape = cache
        s = self.size
        B, C, H, Wd = x_shape
        ho, wo = H // s, Wd // s
        gwin = np.zeros((B, C, ho, wo, s * s), dtype=grad.dtype)
        np.put_along_axis(gwin, idx[..., None], grad[..., None], axis=-1)
        gx = gwin.reshape(B, C, ho, wo, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, Wd)
        return gx, {}


class Flatten:
    differentiable = True
    params: dict = {}

    def forward_cache(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad, x_shape):
        return grad.reshape(x_shape), {}


class LayerNorm:
    """Per-sample standardization over the feature axis, parameter-free.

    Uses no batch statistics, so a sample's output never depends on what
    it was batched with (attacks rely on that determinism).
    """

    differentiable = True
    params: dict = {}

    def __init__(self, eps: float = 1e-6):
        self.eps = float(eps)

    def forward_cache(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        s = np.sqrt(var + self.eps)
        y = (x - mu) / s
        return y, (y, s)

    def backward(self, grad, cache):
        y, s = cache
        g_mean = grad.mean(axis=-1, keepdims=True)
        gy_mean = (grad * y).mean(axis=-1, keepdims=True)
        gx = (grad - g_mean - y * gy_mean) / s
        return gx, {}


class Model:
    """Ordered layer stack with named parameters.

    Parameters are addressed as ``"{layer_index}.{name}"``. At most one
    defense slot may be present; when it is, the layer directly below it
    must be a :class:`Dense` (the synthetic-gradient injection point).

    ``training_method`` records how the model was trained (``"bp"`` or
    ``"hybrid-dfa"``); ``feedback`` holds the error-projection matrix used
    by hybrid training, when any. Both travel with checkpoints.
    """

    def __init__(self, layers, input_shape, dtype=np.float64):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.dtype = np.dtype(dtype)
        self.training_method: str | None = None
        self.feedback = None

        slots = [i for i, l in enumerate(self.layers)
                 if getattr(l, "is_defense_slot", False)]
        if len(slots) > 1:
            raise InputError("at most one defense slot per model")
        self.slot_index = slots[0] if slots else None
        if self.slot_index is not None:
            below = self.layers[self.slot_index - 1] if self.slot_index > 0 else None
            if not isinstance(below, Dense):
                raise InputError("the layer directly below the defense slot "
                                 "must be fully-connected")
        # Dry run validates shape compatibility and fixes the output width.
        probe = np.zeros((1,) + self.input_shape, dtype=self.dtype)
        out = self.forward(probe)
        self.num_classes = int(out.shape[-1])

    @property
    def injection_point(self) -> int | None:
        """Index of the dense layer feeding the defense slot, if any."""
        return None if self.slot_index is None else self.slot_index - 1

    @property
    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                out[f"{i}.{name}"] = arr
        return out

    def _as_batch(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape == self.input_shape:
            return x[None], True
        if x.shape[1:] == self.input_shape:
            return x, False
        raise InputError(f"input shape {x.shape} does not match model "
                         f"input {self.input_shape}")

    def forward(self, x) -> np.ndarray:
        """Logits for a batch (B, *input_shape) -> (B, C), or a single
        sample (*input_shape) -> (C,). Deterministic for fixed parameters."""
        xb, single = self._as_batch(x)
        h = xb
        for layer in self.layers:
            h, _ = layer.forward_cache(h)
        return h[0] if single else h

    def forward_cache(self, x):
        """Batched forward keeping per-layer caches for a backward pass."""
        xb, single = self._as_batch(x)
        caches = []
        h = xb
        for layer in self.layers:
            h, c = layer.forward_cache(h)
            caches.append(c)
        return h, caches, single

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.forward(x), axis=-1)

    def accuracy(self, images, labels, batch_size: int = 256) -> float:
        labels = np.asarray(labels)
        correct = 0
        for lo in range(0, len(labels), batch_size):
            pred = self.predict(images[lo:lo + batch_size])
            correct += int(np.sum(pred == labels[lo:lo + batch_size]))
        return correct / len(labels)


def cross_entropy(logits: np.ndarray, y) -> LossValue:
    """Cross-entropy of logits against integer label(s).

    For a batch the value is the mean loss and the gradient carries the
    1/B factor, so it is the exact gradient of the returned scalar. For a
    single sample the gradient is softmax(logits) - onehot(y).
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    lb = logits[None] if single else logits
    ya = np.atleast_1d(np.asarray(y, dtype=np.int64))
    C = lb.shape[-1]
    if lb.ndim != 2 or ya.shape != (lb.shape[0],):
        raise InputError(f"incompatible logits {logits.shape} / labels {np.shape(y)}")
    if np.any(ya < 0) or np.any(ya >= C):
        raise InputError(f"label out of range [0, {C})")
    ls = log_softmax(lb)
    value = float(-np.mean(ls[np.arange(len(ya)), ya]))
    grad = (np.exp(ls) - one_hot(ya, C)) / len(ya)
    if single:
        grad = grad[0]
    return LossValue(value=value, input_grad=grad)


def backward_bp(model: Model, x, y) -> LossValue:
    """Exact backpropagation of the cross-entropy loss.

    Returns the loss with the full set of parameter gradients plus the
    gradient w.r.t. the input. Raises :class:`BlockedPathError` when the
    model contains a non-differentiable defense slot: its matrix is not
    readable, so no exact gradient can cross it.
    """
    for layer in model.layers:
        if not getattr(layer, "differentiable", True):
            raise BlockedPathError(
                "exact backprop is blocked by the defense layer; use "
                "hybrid_backward or a surrogate gradient source")
    logits, caches, single = model.forward_cache(x)
    lv = cross_entropy(logits, y)
    grad = lv.input_grad
    param_grads: dict[str, np.ndarray] = {}
    for i in range(len(model.layers) - 1, -1, -1):
        grad, pg = model.layers[i].backward(grad, caches[i])
        for name, g in pg.items():
            param_grads[f"{i}.{name}"] = g
    input_grad = grad[0] if single else grad
    return LossValue(value=lv.value, input_grad=input_grad, param_grads=param_grads)


def sgd_step(model: Model, grads: dict[str, np.ndarray], lr: float) -> Model:
    """In-place SGD update: theta <- theta - lr * g for every named gradient.

    Gradient names must match existing parameters. Layers without
    parameters (including the defense slot, whose matrix is frozen by
    construction) are never touched.
    """
    params = model.params
    unknown = set(grads) - set(params)
    if unknown:
        raise InputError(f"gradients for unknown parameters: {sorted(unknown)}")
    for name, g in grads.items():
        p = params[name]
        if p.shape != np.shape(g):
            raise InputError(f"gradient shape {np.shape(g)} != parameter "
                             f"shape {p.shape} for {name}")
        p -= lr * np.asarray(g, dtype=p.dtype)
    return model
