"""Walk through the simulated clock for blocking and low-latency schedules.

No training needed: untrained networks are enough to see the timing.
    python3 demos/latency_walkthrough.py
"""
from lowlatseg.pipeline import Models, StageCosts, run_blocking, run_low_latency
from lowlatseg.propagation import PropagationNets
from lowlatseg.scheduler import DeviationPredictor, FixedRate
from lowlatseg.synthvideo import build_extractors, make_split

frames, labels = make_split("translating", 1, seed=0, length=16)[0]
low, high = build_extractors()
models = Models(low, high, PropagationNets.init(seed=0), DeviationPredictor.init(seed=0))
costs = StageCosts()
print(f"basic {costs.basic_ms:.0f} ms, non-key {costs.non_key_ms:.0f} ms, "
      f"blocking key {costs.blocking_key_ms:.0f} ms")

policy = FixedRate(5)
blocking = run_blocking(frames, models, policy, costs)
lls = run_low_latency(frames, models, policy, costs, fps=17)

print("\n t  | blocking: key  ms  used | low-latency: key  ms  used  provenance")
for b, s in zip(blocking, lls):
    print(f"{b.frame_index:3d} |           {'*' if b.is_keyframe else ' '}  {b.latency_ms:4.0f} "
          f"{b.key_index_used:4d} |              {'*' if s.is_keyframe else ' '}  "
          f"{s.latency_ms:4.0f} {s.key_index_used:4d}  {s.key_provenance}")

# the slow track needs 20 + 299 ms after dispatch, i.e. six frame periods at 17 fps
print("\nlow-latency worst case after frame 0:", max(r.latency_ms for r in lls[1:]), "ms")
