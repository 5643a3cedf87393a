import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lowlatseg.scheduler import segmentation_deviation
from lowlatseg.synthvideo import (SceneConfig, ShapeSpec, ToyExtractor, build_extractors,
                                  class_accuracy, downsample_labels, extract, extract_high,
                                  generate_sequence, load_sequence, make_split, miou,
                                  pixel_accuracy, save_sequence, split_configs, upsample_labels)


def test_static_scene_is_constant():
    frames, labels = generate_sequence(SceneConfig(seed=3, max_speed=0.0), 6)
    for f, lab in zip(frames[1:], labels[1:]):
        np.testing.assert_array_equal(f, frames[0])
        np.testing.assert_array_equal(lab, labels[0])


def test_translation_shifts_mask():
    shape = ShapeSpec(cls=2, kind="rect", position=(10.0, 20.0), velocity=(1.0, 0.0), size=(8, 6))
    _, labels = generate_sequence(SceneConfig(seed=0, shapes=[shape]), 12)
    for t in range(12):
        np.testing.assert_array_equal(labels[t], np.roll(labels[0], t, axis=0))


def test_reflection_keeps_shape_inside():
    shape = ShapeSpec(cls=1, kind="disc", position=(32.0, 58.0), velocity=(0.0, 3.0), size=(8, 8))
    _, labels = generate_sequence(SceneConfig(seed=0, shapes=[shape], max_speed=3.0), 40)
    counts = [np.count_nonzero(lab == 1) for lab in labels]
    assert min(counts) > 0.6 * max(counts)


def test_same_seed_bit_identical():
    a = generate_sequence(SceneConfig(seed=11, change_prob=0.2, noise_amplitude=0.05), 8)
    b = generate_sequence(SceneConfig(seed=11, change_prob=0.2, noise_amplitude=0.05), 8)
    for x, y in zip(a[0] + a[1], b[0] + b[1]):
        np.testing.assert_array_equal(x, y)


def test_frames_in_range_and_labels_valid():
    frames, labels = generate_sequence(SceneConfig(seed=5, noise_amplitude=0.1), 5)
    for f, lab in zip(frames, labels):
        assert f.shape == (64, 64, 3) and np.all((f >= 0) & (f <= 1))
        assert lab.min() >= 0 and lab.max() < 4


def test_scene_change_resamples():
    _, labels = generate_sequence(SceneConfig(seed=2, change_prob=1.0, max_speed=0.0), 3)
    assert not np.array_equal(labels[0], labels[1])


@pytest.mark.parametrize("bad", [dict(height=7), dict(num_classes=1), dict(change_prob=1.5),
                                 dict(max_speed=-1.0), dict(size_range=(5, 2))])
def test_invalid_config(bad):
    with pytest.raises(ValueError):
        generate_sequence(SceneConfig(**bad), 2)
    with pytest.raises(ValueError):
        generate_sequence(SceneConfig(), 0)


def test_split_seeds_differ_per_sequence():
    cfgs = split_configs("translating", 3, seed=0)
    assert len({c.seed for c in cfgs}) == 3
    seqs = make_split("mixed", 2, seed=1, length=3)
    assert len(seqs) == 2 and len(seqs[0][0]) == 3
    with pytest.raises(ValueError):
        split_configs("nope", 1, 0)


def test_extractor_shapes_and_determinism():
    low, high = build_extractors()
    frame = generate_sequence(SceneConfig(seed=1), 1)[0][0]
    f_l = extract(frame, low)
    f_h = extract_high(f_l, high)
    assert f_l.shape == (16, 32, 32) and f_h.shape == (32, 32, 32)
    np.testing.assert_array_equal(extract(frame, build_extractors()[0]), f_l)
    with pytest.raises(ValueError):
        low.layers[0].weight[0, 0, 0, 0] = 1.0


def test_extractor_stage_and_shape_checks():
    low, high = build_extractors()
    with pytest.raises(ValueError):
        extract(np.zeros((8, 8, 3)), high)
    with pytest.raises(ValueError):
        extract(np.zeros((7, 8, 3)), low)
    with pytest.raises(ValueError):
        ToyExtractor.build("low", 3, 5, seed=0)


def test_extractor_locality():
    low, high = build_extractors(high_k=3)
    frame = generate_sequence(SceneConfig(seed=4), 1)[0][0]
    y, x = 30, 17
    moved = frame.copy()
    moved[y, x] = 1.0 - moved[y, x]
    d_low = np.abs(extract(frame, low) - extract(moved, low)).sum(axis=0)
    rows, cols = np.nonzero(d_low)
    assert rows.min() >= (y - 1) // 2 - 1 and rows.max() <= (y + 1) // 2 + 1
    assert cols.min() >= (x - 1) // 2 - 1 and cols.max() <= (x + 1) // 2 + 1
    d_high = np.abs(extract_high(extract(frame, low), high)
                    - extract_high(extract(moved, low), high)).sum(axis=0)
    rows, cols = np.nonzero(d_high)
    assert rows.min() >= (y - 1) // 2 - 4 and rows.max() <= (y + 1) // 2 + 4


def test_label_grid_round_trip():
    lab = np.random.default_rng(0).integers(0, 4, size=(4, 6))
    np.testing.assert_array_equal(downsample_labels(upsample_labels(lab)), lab)


def test_save_load_round_trip(tmp_path):
    frames, labels = generate_sequence(SceneConfig(seed=9), 3)
    save_sequence(tmp_path / "s", frames, labels, {"seed": 9})
    back_f, back_l = load_sequence(tmp_path / "s")
    for a, b in zip(frames, back_f):
        assert np.abs(a - b).max() <= 0.5 / 255 + 1e-12
    for a, b in zip(labels, back_l):
        np.testing.assert_array_equal(a, b)
    assert (tmp_path / "s" / "frames" / "000000.ppm").read_bytes().startswith(b"P6")
    assert (tmp_path / "s" / "labels" / "000002.pgm").read_bytes().startswith(b"P5")
    assert (tmp_path / "s" / "meta.json").exists()


def test_load_errors(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(FileNotFoundError):
        load_sequence(tmp_path / "empty")
    frames, labels = generate_sequence(SceneConfig(seed=9), 2)
    save_sequence(tmp_path / "s", frames, labels)
    (tmp_path / "s" / "labels" / "000001.pgm").unlink()
    with pytest.raises(ValueError):
        load_sequence(tmp_path / "s")
    save_sequence(tmp_path / "t", frames[:1], labels[:1])
    (tmp_path / "t" / "frames" / "000000.ppm").write_bytes(b"P3 1 1 255 1 2 3")
    with pytest.raises(ValueError):
        load_sequence(tmp_path / "t")


def test_metric_hand_examples():
    gt = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 1], [1, 1]])
    assert miou(pred, gt, 2) == pytest.approx(7 / 12)
    assert pixel_accuracy(pred, gt) == 0.75
    assert class_accuracy(pred, gt, 2) == 0.75
    assert miou(gt, gt, 2) == 1.0 and pixel_accuracy(gt, gt) == 1.0
    assert miou(np.zeros((2, 2), int), np.ones((2, 2), int), 2) == 0.0
    with pytest.raises(ValueError):
        miou(gt, gt[:1], 2)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 12), st.integers(1, 12), st.integers(2, 5))
def test_metric_properties(seed, h, w, c):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, c, size=(h, w))
    pred = np.where(rng.random((h, w)) < 0.5, gt, rng.integers(0, c, size=(h, w)))
    assert pixel_accuracy(pred, gt) + segmentation_deviation(pred, gt) == 1.0
    m = miou(pred, gt, c)
    assert 0.0 <= m <= 1.0
    assert (m == 1.0) == bool(np.array_equal(pred, gt))
    assert 0.0 <= class_accuracy(pred, gt, c) <= 1.0
