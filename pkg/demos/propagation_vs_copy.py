"""Train a small propagation module and compare it with copying key features.

Takes about a minute on one core.
    python3 demos/propagation_vs_copy.py [epochs]
"""
import sys

import numpy as np

from lowlatseg.propagation import (PropagationConfig, PropagationNets, build_banks, classify,
                                   copy_baseline, propagate, train_propagation)
from lowlatseg.synthvideo import build_extractors, make_split, miou

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 50
extractors = build_extractors()
train = build_banks(make_split("translating", 8, seed=100), extractors)
test = build_banks(make_split("translating", 4, seed=999), extractors)

nets = PropagationNets.init(PropagationConfig(use_fusion=False), seed=0)
curve = train_propagation(train, nets, epochs=epochs, seed=0)
print(f"loss {curve[0]:.3f} -> {curve[-1]:.3f} over {epochs} epochs")

by_gap = {}
for bank in test:
    for t in range(1, len(bank)):
        gap = t % 5 or 5
        k = t - gap
        gt = bank.labels[t]
        prop = propagate(bank.low[k], bank.low[t], bank.high[k], nets)[1].argmax(0)
        copy = copy_baseline(bank.low[t], bank.high[k], nets).argmax(0)
        full = classify(bank.low[t], bank.high[t], nets).argmax(0)
        by_gap.setdefault(gap, []).append((miou(prop, gt, 4), miou(copy, gt, 4), miou(full, gt, 4)))

print("gap  propagate  copy   full inference")
for gap in sorted(by_gap):
    p, c, f = np.mean(by_gap[gap], axis=0)
    print(f"{gap:3d}  {p:9.3f}  {c:5.3f}  {f:6.3f}")
