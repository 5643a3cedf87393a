"""Adaptive feature propagation: kernel predictor, AdaptNet, fusion head.

The high-level features of the last key frame are carried to the current
frame by a spatially variant convolution whose kernels are predicted from
the low-level features of both frames.  Labels are then predicted from the
propagated high-level features fused with adapted current low-level
features.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .svconv import KernelField, correlation, svconv_backward, svconv_forward
from .tensor_nn import (ConvLayer, ShapeError, make_optimizer, conv2d, conv2d_backward,
                        cross_entropy, relu, relu_backward,
                        softmax_over_channels_backward)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PropagationConfig:
    k: int = 9
    c_l: int = 16
    c_h: int = 32
    c_r: int = 16
    num_classes: int = 4
    gap_range: tuple[int, int] = (2, 10)
    use_fusion: bool = True  # False: classifier sees propagated high features only
    shared_reduce: bool = False
    correlation: bool = True  # feed the trunk a low-feature cost volume too

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError("kernel size must be odd")
        if min(self.c_l, self.c_h, self.c_r, self.num_classes) < 1:
            raise ValueError("all widths must be >= 1")
        lo, hi = self.gap_range
        if not 1 <= lo <= hi:
            raise ValueError("invalid gap_range")


# A stack is a list of (ConvLayer, apply_relu) pairs; its cache holds the
# inputs and pre-activations needed for the backward pass.

def _stack_forward(x, stack):
    cache = []
    for layer, act in stack:
        z = conv2d(x, layer)
        cache.append((x, z))
        x = relu(z) if act else z
    return x, cache


def _stack_backward(g, stack, cache, grads, prefix):
    for idx in range(len(stack) - 1, -1, -1):
        layer, act = stack[idx]
        x, z = cache[idx]
        if act:
            g = relu_backward(g, z)
        g, gw, gb = conv2d_backward(g, x, layer)
        name = f"{prefix}.{idx}"
        grads[f"{name}.weight"] = grads.get(f"{name}.weight", 0) + gw
        grads[f"{name}.bias"] = grads.get(f"{name}.bias", 0) + gb
    return g


@dataclass
class KernelPredictor:
    reduce_k: ConvLayer
    reduce_t: ConvLayer
    trunk: list[ConvLayer]
    head: ConvLayer

    @classmethod
    def init(cls, cfg: PropagationConfig, rng: np.random.Generator) -> "KernelPredictor":
        reduce_k = ConvLayer.init(cfg.c_l, cfg.c_r, 3, rng)
        reduce_t = reduce_k if cfg.shared_reduce else ConvLayer.init(cfg.c_l, cfg.c_r, 3, rng)
        c_in = 2 * cfg.c_r + (cfg.k * cfg.k if cfg.correlation else 0)
        trunk = [ConvLayer.init(c_in, cfg.c_r, 3, rng),
                 ConvLayer.init(cfg.c_r, cfg.c_r, 3, rng),
                 ConvLayer.init(cfg.c_r, cfg.c_r, 3, rng)]
        # a zero head would starve the trunk of gradient and leave only a
        # global bias to learn, which collapses to the identity kernel
        head = ConvLayer.init(cfg.c_r, cfg.k * cfg.k, 1, rng)
        head.bias[:] = 0.0
        return cls(reduce_k, reduce_t, trunk, head)


@dataclass
class AdaptNet:
    layers: list[ConvLayer]

    @classmethod
    def init(cls, cfg: PropagationConfig, rng: np.random.Generator) -> "AdaptNet":
        return cls([ConvLayer.init(cfg.c_l, cfg.c_r, 3, rng),
                    ConvLayer.init(cfg.c_r, cfg.c_r, 3, rng),
                    ConvLayer.init(cfg.c_r, cfg.c_r, 3, rng)])


@dataclass
class FusionHead:
    fuse: ConvLayer
    classifier: ConvLayer

    @classmethod
    def init(cls, cfg: PropagationConfig, rng: np.random.Generator) -> "FusionHead":
        c_in = cfg.c_r + cfg.c_h if cfg.use_fusion else cfg.c_h
        return cls(ConvLayer.init(c_in, cfg.c_r, 3, rng),
                   ConvLayer.init(cfg.c_r, cfg.num_classes, 1, rng))


@dataclass
class PropagationNets:
    cfg: PropagationConfig
    predictor: KernelPredictor
    adapt: AdaptNet
    fusion: FusionHead

    @classmethod
    def init(cls, cfg: PropagationConfig = PropagationConfig(), seed: int = 0) -> "PropagationNets":
        rng = np.random.default_rng(seed)
        return cls(cfg, KernelPredictor.init(cfg, rng), AdaptNet.init(cfg, rng), FusionHead.init(cfg, rng))

    # parameter naming is shared by checkpoints and gradients
    def _layers(self) -> dict[str, ConvLayer]:
        p = self.predictor
        named = {"predictor.reduce_k": p.reduce_k}
        if not self.cfg.shared_reduce:
            named["predictor.reduce_t"] = p.reduce_t
        named.update({f"predictor.trunk.{i}": layer for i, layer in enumerate(p.trunk)})
        named["predictor.head"] = p.head
        if self.cfg.use_fusion:
            named.update({f"adapt.{i}": layer for i, layer in enumerate(self.adapt.layers)})
        named["fusion.fuse"] = self.fusion.fuse
        named["fusion.classifier"] = self.fusion.classifier
        return named

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self._layers().items():
            out[f"{name}.weight"] = layer.weight
            out[f"{name}.bias"] = layer.bias
        return out

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for name, layer in self._layers().items():
            w, b = params[f"{name}.weight"], params[f"{name}.bias"]
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise ShapeError(f"checkpoint tensor {name} has the wrong shape")
            layer.weight = np.array(w, dtype=np.float64)
            layer.bias = np.array(b, dtype=np.float64)

    def config_tensors(self) -> dict[str, np.ndarray]:
        c = self.cfg
        return {"config.propagation": np.array(
            [c.k, c.c_l, c.c_h, c.c_r, c.num_classes, c.gap_range[0], c.gap_range[1],
             float(c.use_fusion), float(c.shared_reduce), float(c.correlation)])}

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "PropagationNets":
        v = tensors["config.propagation"]
        cfg = PropagationConfig(int(v[0]), int(v[1]), int(v[2]), int(v[3]), int(v[4]),
                                (int(v[5]), int(v[6])), bool(v[7]), bool(v[8]),
                                len(v) > 9 and bool(v[9]))
        nets = cls.init(cfg)
        nets.set_params(tensors)
        return nets


def _check_low(f_l_key, f_l_cur, cfg):
    if f_l_key.shape != f_l_cur.shape:
        raise ShapeError(f"low-level maps differ: {f_l_key.shape} vs {f_l_cur.shape}")
    if f_l_key.ndim != 3 or f_l_key.shape[0] != cfg.c_l:
        raise ShapeError(f"expected ({cfg.c_l}, H, W) low-level features, got {f_l_key.shape}")


def _predictor_forward(f_l_key, f_l_cur, net: KernelPredictor):
    rk = conv2d(f_l_key, net.reduce_k)
    rt = conv2d(f_l_cur, net.reduce_t)
    parts = [rk, rt]
    if net.trunk[0].weight.shape[1] > 2 * rk.shape[0]:
        # fixed inputs, so the cost volume needs no gradient
        parts.append(correlation(f_l_cur, f_l_key, int(round(np.sqrt(net.head.bias.size)))))
    x = np.concatenate(parts, axis=0)
    trunk = [(layer, True) for layer in net.trunk] + [(net.head, False)]
    logits, cache = _stack_forward(x, trunk)
    return KernelField.from_logits(logits), (rk.shape[0], trunk, cache)


def predict_kernels(f_l_key, f_l_cur, net: KernelPredictor) -> KernelField:
    """Softmax-normalized per-location kernels from a pair of low-level maps."""
    if f_l_key.shape != f_l_cur.shape:
        raise ShapeError(f"low-level maps differ: {f_l_key.shape} vs {f_l_cur.shape}")
    field, _ = _predictor_forward(f_l_key, f_l_cur, net)
    return field


def _classify_forward(f_l_cur, f_h_hat, nets: PropagationNets):
    cache = {}
    if nets.cfg.use_fusion:
        adapted, cache["adapt"] = _stack_forward(
            f_l_cur, [(nets.adapt.layers[0], True), (nets.adapt.layers[1], True),
                      (nets.adapt.layers[2], False)])
        joint = np.concatenate([adapted, f_h_hat], axis=0)
    else:
        joint = f_h_hat
    head = [(nets.fusion.fuse, True), (nets.fusion.classifier, False)]
    logits, cache["head"] = _stack_forward(joint, head)
    return logits, cache


def _classify_backward(g_logits, f_l_cur, nets, cache, grads):
    """Backprop through fusion (and AdaptNet); returns grad w.r.t. f_h_hat."""
    head = [(nets.fusion.fuse, True), (nets.fusion.classifier, False)]
    names = {0: "fusion.fuse", 1: "fusion.classifier"}
    local = {}
    g_joint = _stack_backward(g_logits, head, cache["head"], local, "head")
    for key, value in local.items():
        _, idx, kind = key.split(".")
        grads[f"{names[int(idx)]}.{kind}"] = value
    if not nets.cfg.use_fusion:
        return g_joint
    c_r = nets.cfg.c_r
    adapt = [(nets.adapt.layers[0], True), (nets.adapt.layers[1], True), (nets.adapt.layers[2], False)]
    _stack_backward(g_joint[:c_r], adapt, cache["adapt"], grads, "adapt")
    return g_joint[c_r:]


def _check_high(f_h_key, f_l_cur, cfg):
    if f_h_key.ndim != 3 or f_h_key.shape[0] != cfg.c_h or f_h_key.shape[1:] != f_l_cur.shape[1:]:
        raise ShapeError(f"expected ({cfg.c_h}, {f_l_cur.shape[1]}, {f_l_cur.shape[2]}) "
                         f"high-level features, got {f_h_key.shape}")


def propagate(f_l_key, f_l_cur, f_h_key, nets: PropagationNets):
    """Return ``(f_h_hat, label_logits)`` for the current frame."""
    _check_low(f_l_key, f_l_cur, nets.cfg)
    _check_high(f_h_key, f_l_cur, nets.cfg)
    field, _ = _predictor_forward(f_l_key, f_l_cur, nets.predictor)
    f_h_hat = svconv_forward(f_h_key, field)
    logits, _ = _classify_forward(f_l_cur, f_h_hat, nets)
    return f_h_hat, logits


def classify(f_l_cur, f_h, nets: PropagationNets) -> np.ndarray:
    """Label logits from current low-level features and given high-level features."""
    _check_high(f_h, f_l_cur, nets.cfg)
    logits, _ = _classify_forward(f_l_cur, f_h, nets)
    return logits


def copy_baseline(f_l_cur, f_h_key, nets: PropagationNets) -> np.ndarray:
    """Label logits with the key frame's high-level features reused unchanged."""
    if f_l_cur.ndim != 3 or f_l_cur.shape[0] != nets.cfg.c_l:
        raise ShapeError(f"expected ({nets.cfg.c_l}, H, W) low-level features, got {f_l_cur.shape}")
    return classify(f_l_cur, f_h_key, nets)


def propagation_loss(f_l_key, f_l_cur, f_h_key, labels, nets: PropagationNets):
    """Training loss of one (key, current) pair and its parameter gradients.

    Mean pixel-wise cross-entropy of the propagated prediction.
    """
    field, (c_r, trunk, p_cache) = _predictor_forward(f_l_key, f_l_cur, nets.predictor)
    f_h_hat = svconv_forward(f_h_key, field)
    logits, c_cache = _classify_forward(f_l_cur, f_h_hat, nets)
    loss, g_logits = cross_entropy(logits, labels)

    grads: dict[str, np.ndarray] = {}
    g_hat = _classify_backward(g_logits, f_l_cur, nets, c_cache, grads)
    _, g_w = svconv_backward(g_hat, f_h_key, field)
    g_logits_k = softmax_over_channels_backward(g_w, field.weights)
    local = {}
    g_x = _stack_backward(g_logits_k, trunk, p_cache, local, "p")
    for key, value in local.items():
        _, idx, kind = key.split(".")
        idx = int(idx)
        name = "predictor.head" if idx == len(trunk) - 1 else f"predictor.trunk.{idx}"
        grads[f"{name}.{kind}"] = value
    p = nets.predictor
    _, gw, gb = conv2d_backward(g_x[:c_r], f_l_key, p.reduce_k)
    grads["predictor.reduce_k.weight"], grads["predictor.reduce_k.bias"] = gw, gb
    _, gw, gb = conv2d_backward(g_x[c_r:2 * c_r], f_l_cur, p.reduce_t)
    if nets.cfg.shared_reduce:
        grads["predictor.reduce_k.weight"] = grads["predictor.reduce_k.weight"] + gw
        grads["predictor.reduce_k.bias"] = grads["predictor.reduce_k.bias"] + gb
    else:
        grads["predictor.reduce_t.weight"], grads["predictor.reduce_t.bias"] = gw, gb
    return loss, grads


@dataclass
class FeatureBank:
    """Frozen-extractor features for one labeled sequence, on the feature grid."""

    low: list[np.ndarray]
    high: list[np.ndarray]
    labels: list[np.ndarray]  # grid-resolution label maps

    def __len__(self):
        return len(self.low)


def build_banks(sequences, extractors) -> list[FeatureBank]:
    from .synthvideo import downsample_labels, extract, extract_high

    low_ex, high_ex = extractors
    banks = []
    for frames, labels in sequences:
        low = [extract(f, low_ex) for f in frames]
        high = [extract_high(f, high_ex) for f in low]
        banks.append(FeatureBank(low, high, [downsample_labels(lab) for lab in labels]))
    return banks


def sample_pairs(banks: list[FeatureBank], gap_range, per_sequence: int, rng: np.random.Generator):
    """Training pairs ``(bank_index, key, current)`` with gap drawn from ``gap_range``."""
    lo, hi = gap_range
    pairs = []
    for b, bank in enumerate(banks):
        n = len(bank)
        if n < 2:
            continue
        for _ in range(per_sequence):
            gap = int(rng.integers(lo, hi + 1))
            gap = min(gap, n - 1)
            key = int(rng.integers(0, n - gap))
            pairs.append((b, key, key + gap))
    return pairs


class DivergenceError(RuntimeError):
    pass


def train_propagation(banks: list[FeatureBank], nets: PropagationNets, epochs: int = 50,
                      lr: float = 1e-3, seed: int = 0, pairs_per_sequence: int = 4,
                      optimizer: str = "adam", clip: float = 5.0) -> list[float]:
    """Jointly fit kernel predictor, AdaptNet and fusion head in place.

    Returns the mean loss of every epoch.  The extractors that produced
    ``banks`` stay frozen.
    """
    if not banks or all(len(b) < 2 for b in banks):
        raise ValueError("training needs at least one sequence with two frames")
    rng = np.random.default_rng(seed)
    opt = make_optimizer(optimizer)
    curve = []
    for epoch in range(epochs):
        pairs = sample_pairs(banks, nets.cfg.gap_range, pairs_per_sequence, rng)
        total = 0.0
        for b, key, cur in pairs:
            bank = banks[b]
            loss, grads = propagation_loss(bank.low[key], bank.low[cur], bank.high[key],
                                           bank.labels[cur], nets)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, pair {(b, key, cur)}")
            grads = _clip(grads, clip)
            nets.set_params(opt.step(nets.params(), grads, lr))
            total += loss
        curve.append(total / len(pairs))
        log.debug("propagation epoch %d loss %.4f", epoch, curve[-1])
    return curve


def _clip(grads, max_norm):
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if not np.isfinite(norm):
        raise DivergenceError("non-finite gradient norm")
    if max_norm and norm > max_norm:
        return {k: g * (max_norm / norm) for k, g in grads.items()}
    return grads
