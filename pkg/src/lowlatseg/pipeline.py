"""Frame loop with late key-frame feature replacement.

Two schedules share one frame loop:

* blocking: a frame chosen as key runs the high stage inline and its
  output comes from the accurate features;
* low latency: every frame t > 0 is answered through propagation (the fast
  track); a chosen key frame hands the high stage to a single background
  worker (the slow track) whose result later replaces the cached features.

Timing is either simulated, with exact rational arithmetic over configured
stage costs, or measured on the wall clock with a real background thread.
"""
from __future__ import annotations

import csv
import json
import math
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .propagation import FeatureBank, PropagationNets, classify, propagate
from .scheduler import DeviationPredictor, Policy, decide, feature_difference, predict_deviation
from .synthvideo import (ToyExtractor, class_accuracy, extract, extract_high, miou,
                         pixel_accuracy, upsample_labels)

FAST_TRACK = "fast-track"
SLOW_TRACK = "slow-track"


@dataclass(frozen=True)
class StageCosts:
    s_l_ms: float = 61.0
    s_h_ms: float = 299.0
    schedule_ms: float = 20.0
    propagate_ms: float = 38.0

    def __post_init__(self):
        for name in ("s_l_ms", "s_h_ms", "schedule_ms", "propagate_ms"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and nonnegative")

    @property
    def basic_ms(self) -> float:
        return self.s_l_ms + self.s_h_ms

    @property
    def non_key_ms(self) -> float:
        return self.s_l_ms + self.schedule_ms + self.propagate_ms

    @property
    def blocking_key_ms(self) -> float:
        return self.s_l_ms + self.schedule_ms + self.s_h_ms


@dataclass(frozen=True)
class KeyFrameCache:
    key_index: int
    f_l_key: np.ndarray = field(repr=False)
    f_h_key: np.ndarray = field(repr=False)
    provenance: str = SLOW_TRACK


class CacheSlot:
    """Holds the current :class:`KeyFrameCache`; swaps are atomic."""

    def __init__(self, initial: Optional[KeyFrameCache] = None):
        self._lock = threading.Lock()
        self._value = initial

    def read(self) -> KeyFrameCache:
        with self._lock:
            return self._value

    def replace(self, new: KeyFrameCache) -> KeyFrameCache:
        with self._lock:
            self._value = new
        return new


def replace_cache(slot: CacheSlot, new_pair: KeyFrameCache) -> CacheSlot:
    slot.replace(new_pair)
    return slot


@dataclass
class FrameRecord:
    frame_index: int
    is_keyframe: bool
    predicted_dev: float
    latency_ms: float
    key_index_used: int
    miou: float = float("nan")
    feature_diff: float = float("nan")
    key_provenance: str = SLOW_TRACK
    labels: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def same_outcome(self, other: "FrameRecord") -> bool:
        """Equality of everything except timing."""
        return (self.frame_index == other.frame_index and self.is_keyframe == other.is_keyframe
                and self.key_index_used == other.key_index_used
                and _same_float(self.predicted_dev, other.predicted_dev)
                and _same_float(self.miou, other.miou)
                and np.array_equal(self.labels, other.labels))


def _same_float(a, b):
    return (math.isnan(a) and math.isnan(b)) or a == b


@dataclass
class Models:
    """Everything the frame loop needs; immutable during a run."""

    low: ToyExtractor
    high: ToyExtractor
    prop: PropagationNets
    deviation: Optional[DeviationPredictor] = None

    @property
    def num_classes(self) -> int:
        return self.prop.cfg.num_classes


# ----------------------------------------------------------- simulated time

class SimWorker:
    """Single background worker on the simulated clock."""

    def __init__(self):
        self.done_at: Optional[Fraction] = None
        self.job = None

    def busy(self, now: Fraction) -> bool:
        return self.done_at is not None and now < self.done_at

    def dispatch(self, now: Fraction, cost: Fraction, job) -> bool:
        if self.busy(now) or self.job is not None:
            return False
        self.done_at, self.job = now + cost, job
        return True

    def collect(self, now: Fraction):
        """Return the finished job, if it completed at or before ``now``."""
        if self.job is not None and self.done_at <= now:
            job, self.job = self.job, None
            return job
        return None


def _ms(value) -> Fraction:
    return Fraction(str(value)) if isinstance(value, float) else Fraction(value)


@dataclass(frozen=True)
class FrameEvent:
    """One frame for :func:`simulated_clock`.

    ``stages`` lists the stage names run inline ("s_l", "schedule",
    "propagate", "s_h"); ``slow_track`` requests a background high stage
    once the schedule stage has finished.
    """

    frame_index: int
    stages: tuple[str, ...]
    slow_track: bool = False


@dataclass(frozen=True)
class FrameTiming:
    frame_index: int
    arrival: Fraction
    completion: Fraction
    slow_dispatched: bool
    slow_done_at: Optional[Fraction]

    @property
    def latency_ms(self) -> float:
        return float(self.completion - self.arrival)


_STAGE_FIELD = {"s_l": "s_l_ms", "s_h": "s_h_ms", "schedule": "schedule_ms", "propagate": "propagate_ms"}


def simulated_clock(frame_rate_fps: float, costs: StageCosts, events) -> list[FrameTiming]:
    """Deterministic timeline: frame t arrives at t / fps and runs its stages
    back to back; slow-track requests go to one background worker and are
    dropped while it is busy."""
    if frame_rate_fps <= 0:
        raise ValueError("frame rate must be positive")
    period = Fraction(1000) / _ms(frame_rate_fps)
    worker = SimWorker()
    out = []
    for ev in events:
        arrival = ev.frame_index * period
        now = arrival
        dispatched = False
        for stage in ev.stages:
            now += _ms(getattr(costs, _STAGE_FIELD[stage]))
            if stage == "schedule" and ev.slow_track:
                worker.collect(now)
                dispatched = worker.dispatch(now, _ms(costs.s_h_ms), ev.frame_index)
        out.append(FrameTiming(ev.frame_index, arrival, now, dispatched,
                               worker.done_at if dispatched else None))
    return out


# ------------------------------------------------------------------ frame loop

class _Features:
    """Stage outputs, computed on demand or looked up in a precomputed bank."""

    def __init__(self, frames, models: Models, bank: Optional[FeatureBank]):
        if bank is not None and frames is not None and len(frames) != len(bank):
            raise ValueError(f"{len(frames)} frames but {len(bank)} precomputed features")
        self.frames, self.models, self.bank = frames, models, bank

    def __len__(self):
        return len(self.bank) if self.bank is not None else len(self.frames)

    def low(self, t):
        if self.bank is not None:
            return self.bank.low[t]
        return extract(self.frames[t], self.models.low)

    def high(self, t, f_low):
        if self.bank is not None:
            return self.bank.high[t]
        return extract_high(f_low, self.models.high)


def _frame_miou(pred, gt, num_classes):
    if gt is None:
        return float("nan")
    if pred.shape != gt.shape:
        pred = upsample_labels(pred)
    return miou(pred, gt, num_classes)


def _run(frames, models: Models, policy: Policy, costs: StageCosts, low_latency: bool,
         labels=None, clock: str = "sim", fps: float = 17.0,
         bank: Optional[FeatureBank] = None) -> list[FrameRecord]:
    src = _Features(frames, models, bank)
    n = len(src)
    if n == 0:
        raise ValueError("empty frame sequence")
    if labels is not None and len(labels) != n:
        raise ValueError(f"{n} frames but {len(labels)} label maps")
    if clock not in ("sim", "wall"):
        raise ValueError(f"unknown clock {clock!r}")
    sim = clock == "sim"
    num_classes = models.num_classes
    period = Fraction(1000) / _ms(fps) if sim else None
    gt = (lambda t: labels[t]) if labels is not None else (lambda t: None)

    # frame 0: full pass, always blocking
    t0 = time.perf_counter()
    f_l = src.low(0)
    f_h = src.high(0, f_l)
    pred = classify(f_l, f_h, models.prop).argmax(axis=0)
    latency = costs.basic_ms if sim else (time.perf_counter() - t0) * 1e3
    slot = CacheSlot(KeyFrameCache(0, f_l, f_h, SLOW_TRACK))
    records = [FrameRecord(0, True, 0.0, float(latency), 0, _frame_miou(pred, gt(0), num_classes),
                           0.0, SLOW_TRACK, pred)]
    last_key = 0

    sim_worker = SimWorker()
    pool = ThreadPoolExecutor(max_workers=1) if (low_latency and not sim) else None
    pending: Optional[Future] = None

    def slow_track(index, f_low):
        f_high = src.high(index, f_low)
        replace_cache(slot, KeyFrameCache(index, f_low, f_high, SLOW_TRACK))

    try:
        for t in range(1, n):
            arrival = t * period if sim else None
            t0 = time.perf_counter()
            f_l = src.low(t)
            if sim:
                now = arrival + _ms(costs.s_l_ms)
                job = sim_worker.collect(now)
                if job is not None:
                    index, f_low = job
                    slow_track(index, f_low)
            snap = slot.read()
            fd = feature_difference(snap.f_l_key, f_l)
            pdev = (predict_deviation(snap.f_l_key, f_l, models.deviation)
                    if models.deviation is not None else float("nan"))
            if sim:
                now += _ms(costs.schedule_ms)
                job = sim_worker.collect(now)
                if job is not None:
                    slow_track(*job)
                busy = low_latency and sim_worker.busy(now)
            else:
                busy = pending is not None and not pending.done()
            is_key = decide(policy, t, t - last_key, pdev, fd) and not busy

            if is_key and not low_latency:
                f_h = src.high(t, f_l)
                pred = classify(f_l, f_h, models.prop).argmax(axis=0)
                slot.replace(KeyFrameCache(t, f_l, f_h, SLOW_TRACK))
                used, provenance = t, SLOW_TRACK
                latency = costs.blocking_key_ms if sim else None
            else:
                f_hat, logits = propagate(snap.f_l_key, f_l, snap.f_h_key, models.prop)
                pred = logits.argmax(axis=0)
                used, provenance = snap.key_index, snap.provenance
                latency = costs.non_key_ms if sim else None
                if is_key:
                    # fast-track features stand in until the slow track lands
                    slot.replace(KeyFrameCache(t, f_l, f_hat, FAST_TRACK))
                    if sim:
                        sim_worker.dispatch(now, _ms(costs.s_h_ms), (t, f_l))
                    else:
                        pending = pool.submit(slow_track, t, f_l)
            if is_key:
                last_key = t
            if not sim:
                latency = (time.perf_counter() - t0) * 1e3
            records.append(FrameRecord(t, is_key, float(pdev), float(latency), used,
                                       _frame_miou(pred, gt(t), num_classes), fd, provenance, pred))
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
    return records


def run_blocking(frames, models: Models, policy: Policy, costs: StageCosts = StageCosts(),
                 labels=None, clock: str = "sim", fps: float = 17.0,
                 bank: Optional[FeatureBank] = None) -> list[FrameRecord]:
    """Key frames run the high stage inline and emit its labels."""
    return _run(frames, models, policy, costs, False, labels, clock, fps, bank)


def run_low_latency(frames, models: Models, policy: Policy, costs: StageCosts = StageCosts(),
                    labels=None, clock: str = "sim", fps: float = 17.0,
                    bank: Optional[FeatureBank] = None) -> list[FrameRecord]:
    """Every frame after the first is answered by propagation; key frames
    refresh the cache through the background slow track."""
    return _run(frames, models, policy, costs, True, labels, clock, fps, bank)


# ------------------------------------------------------------------ summaries

def evaluate(records: list[FrameRecord], ground_truth=None, num_classes: int = 4) -> dict:
    if not records:
        raise ValueError("no records")
    if ground_truth is not None and len(ground_truth) != len(records):
        raise ValueError(f"{len(records)} records but {len(ground_truth)} label maps")
    lat = [r.latency_ms for r in records]
    summary = {
        "mean_latency_ms": float(np.mean(lat)),
        "max_latency_ms": float(np.max(lat)),
        "max_latency_after_first_ms": float(np.max(lat[1:])) if len(lat) > 1 else float("nan"),
        "update_ratio": sum(r.is_keyframe for r in records) / len(records),
    }
    if ground_truth is not None:
        mious, paccs, caccs = [], [], []
        for r, gt in zip(records, ground_truth):
            if r.frame_index >= len(ground_truth):
                raise ValueError("record index outside the ground-truth range")
            gt = ground_truth[r.frame_index]
            pred = r.labels if r.labels.shape == gt.shape else upsample_labels(r.labels)
            mious.append(miou(pred, gt, num_classes))
            paccs.append(pixel_accuracy(pred, gt))
            caccs.append(class_accuracy(pred, gt, num_classes))
        summary.update(mean_miou=float(np.mean(mious)), pixel_acc=float(np.mean(paccs)),
                       class_acc=float(np.mean(caccs)))
    else:
        summary.update(mean_miou=float("nan"), pixel_acc=float("nan"), class_acc=float("nan"))
    return summary


CSV_FIELDS = ["frame_index", "is_keyframe", "predicted_dev", "key_index_used", "latency_ms", "miou"]
SUMMARY_FIELDS = ["mean_miou", "pixel_acc", "class_acc", "mean_latency_ms", "max_latency_ms",
                  "update_ratio"]


def write_records_csv(path_or_file, records) -> None:
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for r in records:
            writer.writerow([r.frame_index, int(r.is_keyframe), f"{r.predicted_dev:.6f}",
                             r.key_index_used, f"{r.latency_ms:.3f}", f"{r.miou:.6f}"])
    finally:
        if own:
            fh.close()


def summary_json(summary: dict) -> str:
    """Flat JSON object; NaN values become null."""
    missing = [k for k in SUMMARY_FIELDS if k not in summary]
    if missing:
        raise KeyError(f"summary lacks {missing}")
    flat = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in summary.items()}
    return json.dumps(flat, sort_keys=True)
