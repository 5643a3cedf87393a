"""Dense layers with explicit forward/backward passes.

Everything here operates on float64 numpy arrays laid out channel-first
(C x H x W).  There is no autodiff graph: each op exposes a forward function
and a matching ``*_backward`` that returns gradients of
``sum(grad_out * output)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAGIC = b"KPRM1"


class ShapeError(ValueError):
    """Raised when an op receives arrays of incompatible shapes."""


@dataclass
class ConvLayer:
    """Stride-1, same-padded 2D cross-correlation layer."""

    weight: np.ndarray  # (C_out, C_in, k, k)
    bias: np.ndarray  # (C_out,)

    @classmethod
    def init(cls, c_in: int, c_out: int, k: int, rng: np.random.Generator) -> "ConvLayer":
        bound = np.sqrt(1.0 / (c_in * k * k))
        weight = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
        bias = rng.uniform(-bound, bound, size=c_out)
        return cls(weight, bias)

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class LinearLayer:
    weight: np.ndarray  # (D_out, D_in)
    bias: np.ndarray  # (D_out,)

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator) -> "LinearLayer":
        bound = np.sqrt(1.0 / d_in)
        return cls(rng.uniform(-bound, bound, size=(d_out, d_in)),
                   rng.uniform(-bound, bound, size=d_out))

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    worst_name: str = ""
    kinks: int = 0  # elements skipped because the step straddled a kink


def _windows(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    return sliding_window_view(xp, (k, k), axis=(1, 2))


def _check_conv(x: np.ndarray, layer: ConvLayer) -> None:
    if x.ndim != 3 or x.shape[0] != layer.c_in:
        raise ShapeError(f"conv2d expects ({layer.c_in}, H, W) input, got {x.shape}")
    if layer.k % 2 != 1:
        raise ShapeError("conv2d supports odd kernel sizes only")


def conv2d(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Zero-padded, stride-1 cross-correlation; output keeps the input's H x W."""
    _check_conv(x, layer)
    cols = _windows(x, layer.k, layer.k // 2)  # (C_in, H, W, k, k)
    out = np.tensordot(layer.weight, cols, axes=([1, 2, 3], [0, 3, 4]))
    return out + layer.bias[:, None, None]


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, layer: ConvLayer):
    """Return ``(grad_input, grad_weight, grad_bias)``."""
    _check_conv(x, layer)
    expected = (layer.c_out,) + x.shape[1:]
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {expected}")
    k, pad = layer.k, layer.k // 2
    cols = _windows(x, k, pad)
    grad_w = np.tensordot(grad_out, cols, axes=([1, 2], [1, 2]))
    grad_b = grad_out.sum(axis=(1, 2))
    # adjoint of cross-correlation is correlation with the flipped kernel
    gcols = _windows(grad_out, k, pad)
    flipped = layer.weight[:, :, ::-1, ::-1]
    grad_x = np.tensordot(flipped, gcols, axes=([0, 2, 3], [0, 3, 4]))
    return grad_x, grad_w, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, grad_out, 0.0)


def softmax_over_channels(logits: np.ndarray) -> np.ndarray:
    """Softmax along axis 0, independently at every spatial location."""
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def softmax_over_channels_backward(grad_out: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Backward through the softmax given its *output* ``probs``."""
    dot = (grad_out * probs).sum(axis=0, keepdims=True)
    return probs * (grad_out - dot)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(1, 2))


def global_avg_pool_backward(grad_out: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    c, h, w = shape
    return np.broadcast_to(grad_out[:, None, None] / (h * w), shape).copy()


def linear(x: np.ndarray, layer: LinearLayer) -> np.ndarray:
    if x.ndim != 1 or x.shape[0] != layer.weight.shape[1]:
        raise ShapeError(f"linear expects length {layer.weight.shape[1]}, got {x.shape}")
    return layer.weight @ x + layer.bias


def linear_backward(grad_out: np.ndarray, x: np.ndarray, layer: LinearLayer):
    """Return ``(grad_input, grad_weight, grad_bias)``."""
    if grad_out.shape != layer.bias.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != {layer.bias.shape}")
    return layer.weight.T @ grad_out, np.outer(grad_out, x), grad_out.copy()


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean pixel-wise cross-entropy and its gradient w.r.t. ``logits``.

    ``logits`` is (num_classes, H, W); ``labels`` is an integer (H, W) map.
    """
    if logits.shape[1:] != labels.shape:
        raise ShapeError(f"logits {logits.shape} do not match labels {labels.shape}")
    probs = softmax_over_channels(logits)
    n = labels.size
    rows, cols = np.indices(labels.shape)
    picked = probs[labels, rows, cols]
    loss = -np.log(np.maximum(picked, 1e-300)).mean()
    grad = probs.copy()
    grad[labels, rows, cols] -= 1.0
    return float(loss), grad / n


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
    """Plain gradient descent ``p - lr * g``; returns a new dict."""
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        out[name] = p - lr * g
    return out


class Momentum:
    """Heavy-ball wrapper around :func:`sgd_step`.

    With ``beta=0`` this is exactly plain SGD.
    """

    def __init__(self, beta: float = 0.9):
        self.beta = beta
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params, grads, lr):
        if self.beta == 0.0:
            return sgd_step(params, grads, lr)
        for name, g in grads.items():
            v = self.velocity.get(name)
            self.velocity[name] = g.copy() if v is None else self.beta * v + g
        return sgd_step(params, self.velocity, lr)


class Adam:
    """Adam update rule over a named parameter dict."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        direction = {}
        for name, g in grads.items():
            m = self.beta1 * self.m.get(name, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            direction[name] = (m / c1) / (np.sqrt(v / c2) + self.eps)
        return sgd_step(params, direction, lr)


def make_optimizer(name: str, momentum: float = 0.9):
    if name == "adam":
        return Adam()
    if name == "sgd":
        return Momentum(momentum)
    raise ValueError(f"unknown optimizer {name!r}")


def grad_check(fn, params: dict[str, np.ndarray], step: float = 1e-4,
               eps_abs: float = 1e-7, kink_tol: float = 1e-3) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``fn(params)`` must return ``(value, grads)`` where ``grads`` has the same
    keys and shapes as ``params``.  The relative error per element is
    ``|a - n| / max(|a|, |n|, eps_abs)``.

    ReLU makes the loss piecewise smooth.  When a central difference
    disagrees but the two one-sided differences disagree with each other
    and one of them matches the analytic value within ``kink_tol``, the
    step crossed a kink; such elements are counted in ``kinks`` instead of
    the error.  Pass ``kink_tol=0`` to disable this.
    """
    def rel(x, y):
        return abs(x - y) / max(abs(x), abs(y), eps_abs)

    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    f0, analytic = fn(params)
    worst, worst_idx, worst_name, offset, kinks = 0.0, 0, "", 0, 0
    for name, p in params.items():
        flat = p.reshape(-1)
        a_flat = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus, _ = fn(params)
            flat[i] = orig - step
            f_minus, _ = fn(params)
            flat[i] = orig
            a = a_flat[i]
            err = rel(a, (f_plus - f_minus) / (2 * step))
            if err > kink_tol > 0:
                fwd, bwd = (f_plus - f0) / step, (f0 - f_minus) / step
                if rel(fwd, bwd) > kink_tol and min(rel(a, fwd), rel(a, bwd)) < kink_tol:
                    kinks += 1
                    continue
            if err > worst:
                worst, worst_idx, worst_name = err, offset + i, name
        offset += flat.size
    return GradCheckReport(float(worst), worst_idx, worst_name, kinks)


def save_params(path, params: dict[str, np.ndarray]) -> None:
    """Write named float64 tensors in the KPRM1 checkpoint format."""
    chunks = [MAGIC]
    for name, value in params.items():
        arr = np.asarray(value, dtype="<f8")  # ascontiguousarray would promote rank 0
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<Q", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise ValueError(f"{path}: not a KPRM1 checkpoint")
    pos, out = len(MAGIC), {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(buf):
                raise ValueError("truncated tensor data")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
            pos += 8 * count
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return out
