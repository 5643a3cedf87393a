import csv
import io
import json
import threading
from fractions import Fraction

import numpy as np
import pytest

from lowlatseg.pipeline import (FAST_TRACK, SLOW_TRACK, CacheSlot, FrameEvent, KeyFrameCache,
                                Models, StageCosts, evaluate, replace_cache, run_blocking,
                                run_low_latency, simulated_clock, summary_json,
                                write_records_csv)
from lowlatseg.propagation import PropagationNets, build_banks
from lowlatseg.scheduler import Adaptive, DeviationPredictor, FeatureDiffThreshold, FixedRate
from lowlatseg.synthvideo import SceneConfig, build_extractors, generate_sequence


@pytest.fixture(scope="module")
def setup():
    low, high = build_extractors()
    frames, labels = generate_sequence(SceneConfig(seed=8, max_speed=1.5), 30)
    models = Models(low, high, PropagationNets.init(seed=0), DeviationPredictor.init(seed=0))
    bank = build_banks([(frames, labels)], (low, high))[0]
    return frames, labels, models, bank


def keys(records):
    return [r.frame_index for r in records if r.is_keyframe]


def test_stage_costs():
    c = StageCosts()
    assert (c.basic_ms, c.non_key_ms, c.blocking_key_ms) == (360, 119, 380)
    for bad in (dict(s_l_ms=-1.0), dict(s_h_ms=float("nan")), dict(propagate_ms=float("inf"))):
        with pytest.raises(ValueError):
            StageCosts(**bad)


def test_simulated_clock_examples():
    one = simulated_clock(17, StageCosts(), [FrameEvent(0, ("s_l", "schedule", "propagate"))])
    assert one[0].completion - one[0].arrival == 119
    zero = simulated_clock(17, StageCosts(0, 0, 0, 0),
                           [FrameEvent(t, ("s_l", "schedule", "propagate")) for t in range(3)])
    assert all(ft.completion == ft.arrival for ft in zero)
    both = simulated_clock(17, StageCosts(), [FrameEvent(1, ("s_l", "schedule"), True),
                                              FrameEvent(2, ("s_l", "schedule"), True)])
    assert both[0].slow_dispatched and not both[1].slow_dispatched
    assert both[0].slow_done_at == Fraction(1000, 17) + 81 + 299
    with pytest.raises(ValueError):
        simulated_clock(0, StageCosts(), [])


def test_simulated_clock_worker_frees_up():
    period = Fraction(1000, 17)
    evs = [FrameEvent(t, ("s_l", "schedule", "propagate"), True) for t in range(0, 14)]
    out = simulated_clock(17, StageCosts(), evs)
    fired = [ft.frame_index for ft in out if ft.slow_dispatched]
    # done at 81 + 299 after arrival; frame t+6 schedules at 6 * 58.8 + 81 > 380
    assert fired == [0, 6, 12]
    assert out[0].slow_done_at == 380 and out[6].arrival == 6 * period


def test_blocking_latencies_and_keys(setup):
    frames, labels, models, _ = setup
    recs = run_blocking(frames[:11], models, FixedRate(5), labels=labels[:11])
    assert keys(recs) == [0, 5, 10]
    assert [r.latency_ms for r in recs] == [360, 119, 119, 119, 119, 380, 119, 119, 119, 119, 380]
    assert recs[5].key_index_used == 5 and recs[6].key_index_used == 5


def test_low_latency_latency_and_suppression(setup):
    frames, labels, models, bank = setup
    recs = run_low_latency(frames, models, FixedRate(2), labels=labels, bank=bank)
    assert recs[0].latency_ms == 360
    assert max(r.latency_ms for r in recs[1:]) == 119
    # the worker is busy until frame t+6 reads the cache
    assert keys(recs) == [0, 2, 8, 14, 20, 26]


def test_slow_track_lands_at_t_plus_6(setup):
    frames, _, models, bank = setup
    recs = run_low_latency(frames, models, FixedRate(5), bank=bank, fps=17)
    assert keys(recs)[:2] == [0, 5]
    for t in range(6, 11):
        assert recs[t].key_index_used == 5 and recs[t].key_provenance == FAST_TRACK
    assert recs[11].key_index_used == 5 and recs[11].key_provenance == SLOW_TRACK


def test_slow_track_faster_at_low_fps(setup):
    frames, _, models, bank = setup
    recs = run_low_latency(frames, models, FixedRate(5), bank=bank, fps=2)
    assert keys(recs) == [0, 5, 10, 15, 20, 25]
    assert all(r.key_provenance == SLOW_TRACK for r in recs)


def test_never_firing_policy_modes_agree(setup):
    frames, labels, models, bank = setup
    for policy in (Adaptive(1.0), FixedRate(1000)):
        a = run_blocking(frames, models, policy, labels=labels, bank=bank)
        b = run_low_latency(frames, models, policy, labels=labels, bank=bank)
        assert len(a) == len(b) == 30
        assert all(x.same_outcome(y) for x, y in zip(a, b))
        assert [x.latency_ms for x in a] == [y.latency_ms for y in b]
        assert keys(a) == [0]


def test_bank_and_frames_agree(setup):
    frames, labels, models, bank = setup
    a = run_blocking(frames[:8], models, FixedRate(3), labels=labels[:8])
    b = run_blocking(frames[:8], models, FixedRate(3), labels=labels[:8], bank=build_banks(
        [(frames[:8], labels[:8])], (models.low, models.high))[0])
    assert all(x.same_outcome(y) for x, y in zip(a, b))


@pytest.mark.parametrize("low_latency", [False, True])
def test_record_invariants(setup, low_latency):
    frames, labels, models, bank = setup
    run = run_low_latency if low_latency else run_blocking
    for policy in (FixedRate(3), FeatureDiffThreshold(0.05), Adaptive(0.0)):
        recs = run(frames, models, policy, labels=labels, bank=bank)
        assert [r.frame_index for r in recs] == list(range(30))
        used = [r.key_index_used for r in recs]
        assert used == sorted(used)
        assert all(r.key_index_used <= r.frame_index and r.latency_ms > 0 for r in recs)
        assert all(0.0 <= r.predicted_dev <= 1.0 for r in recs)


def test_zero_threshold_is_full_inference(setup):
    frames, labels, models, bank = setup
    recs = run_blocking(frames, models, Adaptive(0.0), labels=labels, bank=bank)
    assert evaluate(recs)["update_ratio"] == 1.0
    full = run_blocking(frames, models, FixedRate(1), labels=labels, bank=bank)
    np.testing.assert_array_equal([r.miou for r in recs], [r.miou for r in full])


def test_no_deviation_net_gives_nan(setup):
    frames, _, models, bank = setup
    plain = Models(models.low, models.high, models.prop)
    recs = run_blocking(frames[:4], plain, FixedRate(2))
    assert np.isnan(recs[1].predicted_dev) and np.isnan(recs[1].miou)
    assert not any(r.is_keyframe for r in run_blocking(frames[:4], plain, Adaptive(0.0))[1:])


def test_run_errors(setup):
    frames, labels, models, bank = setup
    with pytest.raises(ValueError):
        run_blocking([], models, FixedRate(5))
    with pytest.raises(ValueError):
        run_blocking(frames[:3], models, FixedRate(5), labels=labels[:2])
    with pytest.raises(ValueError):
        run_low_latency(frames[:3], models, FixedRate(5), clock="sundial")
    with pytest.raises(ValueError):
        run_blocking(frames[:3], models, FixedRate(5), bank=bank)


def test_wall_clock_reproduces_blocking_outcomes(setup):
    frames, labels, models, _ = setup
    sim = run_blocking(frames[:10], models, FixedRate(4), labels=labels[:10])
    wall = run_blocking(frames[:10], models, FixedRate(4), labels=labels[:10], clock="wall")
    assert all(x.same_outcome(y) for x, y in zip(sim, wall))
    assert all(r.latency_ms > 0 for r in wall)


def test_wall_clock_low_latency_runs(setup):
    frames, labels, models, _ = setup
    recs = run_low_latency(frames[:12], models, FixedRate(2), labels=labels[:12], clock="wall")
    assert recs[0].is_keyframe and len(recs) == 12
    used = [r.key_index_used for r in recs]
    assert used == sorted(used) and all(r.latency_ms > 0 for r in recs)


def test_cache_replace_and_idempotence():
    a = KeyFrameCache(1, np.ones(2), np.ones(3))
    b = KeyFrameCache(2, np.zeros(2), np.zeros(3), FAST_TRACK)
    slot = CacheSlot(a)
    assert replace_cache(slot, b).read() is b
    replace_cache(slot, b)
    assert slot.read() is b


def test_cache_stress_never_mixed():
    pairs = [KeyFrameCache(i, np.full(4, float(i)), np.full(8, float(i))) for i in range(64)]
    slot = CacheSlot(pairs[0])
    stop = threading.Event()
    bad = []

    def reader():
        while not stop.is_set():
            snap = slot.read()
            if not (snap.f_l_key[0] == snap.f_h_key[0] == snap.key_index):
                bad.append(snap.key_index)

    threads = [threading.Thread(target=reader) for _ in range(2)]
    for th in threads:
        th.start()
    for i in range(10_000):
        replace_cache(slot, pairs[i % 64])
    stop.set()
    for th in threads:
        th.join()
    assert not bad


def test_evaluate_examples(setup):
    frames, labels, models, bank = setup
    recs = run_blocking(frames, models, FixedRate(5), labels=labels, bank=bank)
    s = evaluate(recs, labels)
    assert s["update_ratio"] == pytest.approx(0.2)
    lat = [r.latency_ms for r in recs]
    assert abs(s["mean_latency_ms"] - np.mean(lat)) < 1e-9 and s["max_latency_ms"] == 380
    assert s["max_latency_after_first_ms"] == 380
    assert s["mean_miou"] == pytest.approx(np.mean([r.miou for r in recs]), abs=1e-12)
    assert 0 <= s["pixel_acc"] <= 1 and 0 <= s["class_acc"] <= 1
    all_key = evaluate(run_blocking(frames[:5], models, FixedRate(1)))
    assert all_key["update_ratio"] == 1.0 and np.isnan(all_key["mean_miou"])
    with pytest.raises(ValueError):
        evaluate(recs, labels[:5])
    with pytest.raises(ValueError):
        evaluate([])


def test_csv_and_summary_outputs(setup):
    frames, labels, models, bank = setup
    recs = run_low_latency(frames[:6], models, FixedRate(5), labels=labels[:6])
    buf = io.StringIO()
    write_records_csv(buf, recs)
    rows = list(csv.reader(io.StringIO(buf.getvalue())))
    assert rows[0] == ["frame_index", "is_keyframe", "predicted_dev", "key_index_used",
                       "latency_ms", "miou"]
    assert len(rows) == 7 and rows[1][1] == "1" and float(rows[2][4]) == 119
    summary = evaluate(recs)
    out = json.loads(summary_json(summary))
    assert out["mean_miou"] is None and out["update_ratio"] == pytest.approx(2 / 6)
    with pytest.raises(KeyError):
        summary_json({"mean_miou": 1.0})
