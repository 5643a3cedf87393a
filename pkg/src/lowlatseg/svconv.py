"""Spatially variant, channel-shared convolution.

Each output location (i, j) has its own K x K kernel ``W_ij``, shared by all
feature channels::

    out[l, i, j] = sum_{u, v in [-D, D]} W_ij(u, v) * f[l, i - u, j - v]

with ``D = K // 2`` and zeros outside the map.  Kernels are stored
offset-major as a (K*K, H, W) array; flat channel ``c`` holds offset
``(u, v) = (c // K - D, c % K - D)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_nn import ShapeError, softmax_over_channels

NORM_TOL = 1e-4


@dataclass(frozen=True)
class KernelField:
    """Per-location normalized propagation kernels.

    Build with :meth:`from_logits` or :meth:`from_weights`; both validate
    that every location's weights are nonnegative and sum to one.
    """

    k: int
    weights: np.ndarray  # (k*k, H, W)

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"kernel size must be odd and positive, got {self.k}")
        if self.weights.ndim != 3 or self.weights.shape[0] != self.k * self.k:
            raise ShapeError(f"expected ({self.k * self.k}, H, W) weights, got {self.weights.shape}")
        if np.any(self.weights < 0):
            raise ValueError("kernel weights must be nonnegative")
        sums = self.weights.sum(axis=0)
        if np.max(np.abs(sums - 1.0)) > NORM_TOL:
            raise ValueError("kernel weights must sum to one at every location")

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "KernelField":
        k = int(round(np.sqrt(logits.shape[0])))
        if k * k != logits.shape[0]:
            raise ShapeError(f"{logits.shape[0]} channels is not a square kernel")
        return cls(k, softmax_over_channels(logits))

    @classmethod
    def from_weights(cls, weights: np.ndarray) -> "KernelField":
        weights = np.asarray(weights, dtype=np.float64)
        k = int(round(np.sqrt(weights.shape[0])))
        return cls(k, weights)

    @classmethod
    def one_hot(cls, k: int, shape: tuple[int, int], offset=(0, 0)) -> "KernelField":
        """Every location takes its whole weight from offset ``(u, v)``."""
        d = k // 2
        u, v = offset
        w = np.zeros((k * k,) + tuple(shape))
        w[(u + d) * k + (v + d)] = 1.0
        return cls(k, w)

    @classmethod
    def uniform(cls, k: int, shape: tuple[int, int]) -> "KernelField":
        return cls(k, np.full((k * k,) + tuple(shape), 1.0 / (k * k)))

    @property
    def half_width(self) -> int:
        return self.k // 2

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape[1:]


def _check(feature: np.ndarray, kernels: KernelField) -> None:
    if feature.ndim != 3:
        raise ShapeError(f"feature must be C x H x W, got {feature.shape}")
    if feature.shape[1:] != kernels.shape:
        raise ShapeError(f"kernel grid {kernels.shape} != feature grid {feature.shape[1:]}")


def _shifted_pairs(k: int, h: int, w: int):
    # yields (c, dst, src): out[dst] pairs with feature[src] for offset channel c
    d = k // 2
    for c in range(k * k):
        u, v = c // k - d, c % k - d
        if abs(u) >= h or abs(v) >= w:
            continue
        dst = (slice(max(u, 0), h + min(u, 0)), slice(max(v, 0), w + min(v, 0)))
        src = (slice(max(-u, 0), h - max(u, 0)), slice(max(-v, 0), w - max(v, 0)))
        yield c, dst, src


def svconv_forward(feature: np.ndarray, kernels: KernelField) -> np.ndarray:
    _check(feature, kernels)
    c, h, w = feature.shape
    out = np.zeros_like(feature, dtype=float)
    wts = kernels.weights
    for ch, (di, dj), (si, sj) in _shifted_pairs(kernels.k, h, w):
        out[:, di, dj] += wts[ch, di, dj] * feature[:, si, sj]
    return out


def svconv_backward(grad_out: np.ndarray, feature: np.ndarray, kernels: KernelField):
    """Return ``(grad_feature, grad_weights)``; weight gradients sum over channels."""
    _check(feature, kernels)
    if grad_out.shape != feature.shape:
        raise ShapeError(f"grad_out {grad_out.shape} != feature {feature.shape}")
    c, h, w = feature.shape
    wts = kernels.weights
    grad_feature = np.zeros_like(feature, dtype=float)
    grad_weights = np.zeros_like(wts, dtype=float)
    for ch, (di, dj), (si, sj) in _shifted_pairs(kernels.k, h, w):
        g = grad_out[:, di, dj]
        grad_weights[ch, di, dj] = np.einsum("lij,lij->ij", g, feature[:, si, sj])
        grad_feature[:, si, sj] += wts[ch, di, dj] * g
    return grad_feature, grad_weights


def correlation(cur: np.ndarray, key: np.ndarray, k: int) -> np.ndarray:
    """Cost volume: channel c holds mean_l cur[l, i, j] * key[l, i - u, j - v]."""
    if cur.shape != key.shape or cur.ndim != 3:
        raise ShapeError(f"correlation inputs differ: {cur.shape} vs {key.shape}")
    c, h, w = cur.shape
    out = np.zeros((k * k, h, w))
    for ch, (di, dj), (si, sj) in _shifted_pairs(k, h, w):
        out[ch, di, dj] = np.einsum("lij,lij->ij", cur[:, di, dj], key[:, si, sj]) / c
    return out


def correlation_backward(grad_out: np.ndarray, cur: np.ndarray, key: np.ndarray, k: int):
    """Return ``(grad_cur, grad_key)`` of :func:`correlation`."""
    c, h, w = cur.shape
    g_cur = np.zeros_like(cur, dtype=float)
    g_key = np.zeros_like(key, dtype=float)
    for ch, (di, dj), (si, sj) in _shifted_pairs(k, h, w):
        g = grad_out[ch, di, dj] / c
        g_cur[:, di, dj] += g * key[:, si, sj]
        g_key[:, si, sj] += g * cur[:, di, dj]
    return g_cur, g_key


def svconv_reference(feature: np.ndarray, kernels: KernelField) -> np.ndarray:
    """Literal loop transcription of the propagation sum, for testing."""
    _check(feature, kernels)
    k, d = kernels.k, kernels.half_width
    c, h, w = feature.shape
    out = np.zeros(feature.shape)
    for l in range(c):
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for u in range(-d, d + 1):
                    for v in range(-d, d + 1):
                        si, sj = i - u, j - v
                        if 0 <= si < h and 0 <= sj < w:
                            acc += kernels.weights[(u + d) * k + (v + d), i, j] * feature[l, si, sj]
                out[l, i, j] = acc
    return out
