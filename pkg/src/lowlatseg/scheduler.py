"""Key-frame selection: deviation metric, deviation regressor and policies."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Union

import numpy as np

from .propagation import DivergenceError, FeatureBank, PropagationNets, classify, _clip
from .tensor_nn import (ConvLayer, LinearLayer, ShapeError, conv2d, conv2d_backward,
                        global_avg_pool, global_avg_pool_backward, linear, linear_backward,
                        make_optimizer, relu, relu_backward)

log = logging.getLogger(__name__)


def segmentation_deviation(a: np.ndarray, b: np.ndarray) -> float:
    """Fraction of pixels whose labels differ."""
    if a.shape != b.shape:
        raise ShapeError(f"label maps differ in shape: {a.shape} vs {b.shape}")
    return np.count_nonzero(a != b) / a.size


def feature_difference(f_l_key: np.ndarray, f_l_cur: np.ndarray) -> float:
    if f_l_key.shape != f_l_cur.shape:
        raise ShapeError(f"feature maps differ in shape: {f_l_key.shape} vs {f_l_cur.shape}")
    return float(np.abs(f_l_key - f_l_cur).mean())


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


@dataclass
class DeviationPredictor:
    reduce: ConvLayer
    trunk: ConvLayer
    head: LinearLayer

    @classmethod
    def init(cls, c_l: int = 16, c_r: int = 16, seed: int = 0) -> "DeviationPredictor":
        rng = np.random.default_rng(seed)
        return cls(ConvLayer.init(c_l, c_r, 3, rng), ConvLayer.init(c_r, c_r, 3, rng),
                   LinearLayer(np.zeros((1, c_r)), np.zeros(1)))

    def _layers(self):
        return {"deviation.reduce": self.reduce, "deviation.trunk": self.trunk,
                "deviation.head": self.head}

    def params(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self._layers().items() for k, v in layer.params().items()}

    def set_params(self, params) -> None:
        for n, layer in self._layers().items():
            w, b = params[f"{n}.weight"], params[f"{n}.bias"]
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise ShapeError(f"checkpoint tensor {n} has the wrong shape")
            layer.weight = np.array(w, dtype=np.float64)
            layer.bias = np.array(b, dtype=np.float64)

    @classmethod
    def from_tensors(cls, tensors) -> "DeviationPredictor":
        c_r, c_l = tensors["deviation.reduce.weight"].shape[:2]
        net = cls.init(c_l, c_r)
        net.set_params(tensors)
        return net


def _deviation_forward(f_l_key, f_l_cur, net: DeviationPredictor):
    if f_l_key.shape != f_l_cur.shape:
        raise ShapeError(f"feature maps differ in shape: {f_l_key.shape} vs {f_l_cur.shape}")
    diff = conv2d(f_l_cur, net.reduce) - conv2d(f_l_key, net.reduce)
    z = conv2d(diff, net.trunk)
    pooled = global_avg_pool(relu(z))
    logit = float(linear(pooled, net.head)[0])
    return _sigmoid(logit), (diff, z, pooled)


def predict_deviation(f_l_key, f_l_cur, net: DeviationPredictor) -> float:
    """Predicted fraction of labels that changed since the key frame, in [0, 1]."""
    return _deviation_forward(f_l_key, f_l_cur, net)[0]


def deviation_loss(f_l_key, f_l_cur, target: float, net: DeviationPredictor):
    """Squared error of the predicted deviation, with parameter gradients."""
    pred, (diff, z, pooled) = _deviation_forward(f_l_key, f_l_cur, net)
    loss = (pred - target) ** 2
    g_logit = np.array([2.0 * (pred - target) * pred * (1.0 - pred)])
    g_pooled, gw_head, gb_head = linear_backward(g_logit, pooled, net.head)
    g_z = relu_backward(global_avg_pool_backward(g_pooled, z.shape), z)
    g_diff, gw_trunk, gb_trunk = conv2d_backward(g_z, diff, net.trunk)
    # the bias of the shared reduce layer cancels in the difference
    _, gw_cur, _ = conv2d_backward(g_diff, f_l_cur, net.reduce)
    _, gw_key, _ = conv2d_backward(g_diff, f_l_key, net.reduce)
    grads = {
        "deviation.reduce.weight": gw_cur - gw_key,
        "deviation.reduce.bias": np.zeros_like(net.reduce.bias),
        "deviation.trunk.weight": gw_trunk, "deviation.trunk.bias": gb_trunk,
        "deviation.head.weight": gw_head, "deviation.head.bias": gb_head,
    }
    return float(loss), grads


def auxiliary_labels(bank: FeatureBank, nets: PropagationNets) -> list[np.ndarray]:
    """Full-inference label maps of every frame (true high-level features)."""
    return [classify(lo, hi, nets).argmax(axis=0) for lo, hi in zip(bank.low, bank.high)]


def deviation_pairs(banks, aux, gap_range=(2, 10)):
    """Every ``(bank, key, current, target)`` with gap in ``gap_range``."""
    lo, hi = gap_range
    pairs = []
    for b, bank in enumerate(banks):
        for key in range(len(bank)):
            for cur in range(key + lo, min(key + hi, len(bank) - 1) + 1):
                pairs.append((b, key, cur, segmentation_deviation(aux[b][key], aux[b][cur])))
    return pairs


def train_scheduler(banks: list[FeatureBank], nets: PropagationNets, predictor: DeviationPredictor,
                    epochs: int = 50, lr: float = 1e-3, seed: int = 0, pairs_per_epoch: int = 64,
                    gap_range=(2, 10), optimizer: str = "adam") -> list[float]:
    """Regress auxiliary-label deviation from low-level feature pairs, in place."""
    if not banks:
        raise ValueError("training needs at least one sequence")
    aux = [auxiliary_labels(b, nets) for b in banks]
    pairs = deviation_pairs(banks, aux, gap_range)
    if not pairs:
        raise ValueError("no frame pairs within the gap range")
    if epochs > 0:
        # Start the head at the mean target. From 0.5 every target is too low, so the
        # head weights all turn negative and act as a second bias with the wrong sign.
        m = float(np.clip(np.mean([p[3] for p in pairs]), 1e-3, 1 - 1e-3))
        predictor.head.bias = np.array([np.log(m / (1.0 - m))])
    rng = np.random.default_rng(seed)
    opt = make_optimizer(optimizer)
    curve = []
    for epoch in range(epochs):
        chosen = rng.choice(len(pairs), size=min(pairs_per_epoch, len(pairs)), replace=False)
        total = 0.0
        for i in chosen:
            b, key, cur, target = pairs[i]
            loss, grads = deviation_loss(banks[b].low[key], banks[b].low[cur], target, predictor)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite deviation loss at epoch {epoch}")
            predictor.set_params(opt.step(predictor.params(), _clip(grads, 5.0), lr))
            total += loss
        curve.append(total / len(chosen))
        log.debug("scheduler epoch %d loss %.5f", epoch, curve[-1])
    return curve


# ------------------------------------------------------------------ policies

@dataclass(frozen=True)
class FixedRate:
    interval: int

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError("interval must be >= 1")

    def __str__(self):
        return f"fixed:{self.interval}"


@dataclass(frozen=True)
class FeatureDiffThreshold:
    tau: float

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be >= 0")

    def __str__(self):
        return f"featdiff:{self.tau:g}"


@dataclass(frozen=True)
class Adaptive:
    theta: float

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")

    def __str__(self):
        return f"adaptive:{self.theta:g}"


Policy = Union[FixedRate, FeatureDiffThreshold, Adaptive]


def parse_policy(spec: str) -> Policy:
    """Parse ``fixed:<n>``, ``featdiff:<tau>`` or ``adaptive:<theta>``."""
    kind, sep, value = spec.partition(":")
    if not sep or not value:
        raise ValueError(f"policy spec {spec!r} must look like kind:value")
    try:
        if kind == "fixed":
            return FixedRate(int(value))
        if kind == "featdiff":
            return FeatureDiffThreshold(float(value))
        if kind == "adaptive":
            return Adaptive(float(value))
    except ValueError as exc:
        raise ValueError(f"bad policy spec {spec!r}: {exc}") from None
    raise ValueError(f"unknown policy kind {kind!r}")


def decide(policy: Policy, frame_index: int, frames_since_key: int,
           predicted_dev: float, feature_diff: float) -> bool:
    """Whether frame ``frame_index`` (>= 1) becomes a key frame."""
    if isinstance(policy, FixedRate):
        return frames_since_key >= policy.interval
    if isinstance(policy, FeatureDiffThreshold):
        return feature_diff > policy.tau
    if isinstance(policy, Adaptive):
        return predicted_dev > policy.theta
    raise TypeError(f"not a policy: {policy!r}")


def with_threshold(family: str, value) -> Policy:
    return {"fixed": lambda v: FixedRate(int(v)),
            "featdiff": FeatureDiffThreshold,
            "adaptive": Adaptive}[family](value)


def sweep_thresholds(family: str, run, thresholds) -> list[tuple[float, float, float]]:
    """Evaluate a policy family over ``thresholds``.

    ``run(policy)`` must return ``(update_ratio, mean_miou)``.  Rows come
    back sorted by threshold.
    """
    thresholds = sorted(thresholds)
    if not thresholds:
        raise ValueError("threshold list is empty")
    rows = []
    for value in thresholds:
        ratio, score = run(with_threshold(family, value))
        rows.append((value, ratio, score))
    return rows


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["threshold", "update_ratio", "mean_miou"])
        for value, ratio, score in rows:
            writer.writerow([f"{value:g}", f"{ratio:.6f}", f"{score:.6f}"])
