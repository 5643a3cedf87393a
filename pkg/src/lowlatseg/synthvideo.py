"""Synthetic moving-shape videos, frozen toy feature extractors, sequence IO
and segmentation metrics.

Frames are float arrays of shape (H, W, 3) in [0, 1]; label maps are integer
arrays of shape (H, W) with class 0 as background.
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor_nn import ConvLayer, ShapeError, conv2d, relu

# class 0 is background; shape classes cycle through the rest
CLASS_COLORS = np.array([
    [0.45, 0.45, 0.45],
    [0.85, 0.25, 0.20],
    [0.20, 0.70, 0.30],
    [0.25, 0.35, 0.85],
    [0.85, 0.80, 0.25],
    [0.70, 0.30, 0.75],
    [0.30, 0.75, 0.80],
    [0.95, 0.60, 0.35],
])


@dataclass
class ShapeSpec:
    cls: int
    kind: str  # "rect" or "disc"
    position: tuple[float, float]  # top-left for rect, center for disc
    velocity: tuple[float, float]  # pixels per frame, (dy, dx)
    size: tuple[int, int]  # (h, w) for rect; (2r, 2r) for disc


@dataclass
class SceneConfig:
    seed: int = 0
    height: int = 64
    width: int = 64
    num_classes: int = 4
    num_shapes: int = 3
    size_range: tuple[int, int] = (12, 24)
    max_speed: float = 1.5
    texture_amplitude: float = 0.15
    noise_amplitude: float = 0.0
    change_prob: float = 0.0
    shapes: list[ShapeSpec] | None = None

    def validate(self) -> None:
        if self.height < 4 or self.width < 4 or self.height % 2 or self.width % 2:
            raise ValueError("canvas extents must be even and at least 4")
        if not 2 <= self.num_classes <= len(CLASS_COLORS):
            raise ValueError(f"num_classes must be in [2, {len(CLASS_COLORS)}]")
        if not 0.0 <= self.change_prob <= 1.0:
            raise ValueError("change_prob must be a probability")
        if self.max_speed < 0 or self.max_speed > min(self.height, self.width) / 4:
            raise ValueError("max_speed out of traceable range")
        lo, hi = self.size_range
        if not 1 <= lo <= hi <= min(self.height, self.width):
            raise ValueError("invalid size_range")
        for s in self.shapes or []:
            if not 1 <= s.cls < self.num_classes:
                raise ValueError(f"shape class {s.cls} out of range")
            if s.kind not in ("rect", "disc"):
                raise ValueError(f"unknown shape kind {s.kind!r}")


@dataclass
class _Shape:
    cls: int
    kind: str
    pos: np.ndarray
    vel: np.ndarray
    size: tuple[int, int]


def _random_shapes(cfg: SceneConfig, rng: np.random.Generator) -> list[_Shape]:
    shapes = []
    lo, hi = cfg.size_range
    for _ in range(cfg.num_shapes):
        cls = int(rng.integers(1, cfg.num_classes))
        kind = "rect" if rng.random() < 0.5 else "disc"
        h = int(rng.integers(lo, hi + 1))
        w = h if kind == "disc" else int(rng.integers(lo, hi + 1))
        if kind == "disc":
            pos = rng.uniform([h / 2, h / 2], [cfg.height - h / 2, cfg.width - h / 2])
        else:
            pos = rng.uniform([0, 0], [cfg.height - h, cfg.width - w])
        angle = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(0.25, 1.0) * cfg.max_speed
        vel = speed * np.array([np.sin(angle), np.cos(angle)])
        shapes.append(_Shape(cls, kind, pos, vel, (h, w)))
    return shapes


def _texture(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    # smooth static pattern: bilinear upsampling of coarse noise
    coarse = rng.uniform(-1, 1, size=(cfg.height // 8 + 2, cfg.width // 8 + 2, 3))
    ys = np.linspace(0, coarse.shape[0] - 1.001, cfg.height)
    xs = np.linspace(0, coarse.shape[1] - 1.001, cfg.width)
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None, None], (xs - x0)[None, :, None]
    c = coarse
    top = c[y0][:, x0] * (1 - fx) + c[y0][:, x0 + 1] * fx
    bot = c[y0 + 1][:, x0] * (1 - fx) + c[y0 + 1][:, x0 + 1] * fx
    return cfg.texture_amplitude * (top * (1 - fy) + bot * fy)


def _advance(s: _Shape, height: int, width: int) -> None:
    h, w = s.size
    if s.kind == "disc":
        bounds = [(h / 2, height - h / 2), (w / 2, width - w / 2)]
    else:
        bounds = [(0.0, float(height - h)), (0.0, float(width - w))]
    for axis, (lo, hi) in enumerate(bounds):
        p = s.pos[axis] + s.vel[axis]
        if p < lo:
            p, s.vel[axis] = 2 * lo - p, -s.vel[axis]
        elif p > hi:
            p, s.vel[axis] = 2 * hi - p, -s.vel[axis]
        s.pos[axis] = p


def rasterize(shapes: list[_Shape], height: int, width: int) -> np.ndarray:
    labels = np.zeros((height, width), dtype=np.int64)
    yy, xx = np.mgrid[0:height, 0:width]
    for s in shapes:
        if s.kind == "disc":
            cy, cx = s.pos
            r = s.size[0] / 2
            mask = (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r
        else:
            y0, x0 = int(np.floor(s.pos[0])), int(np.floor(s.pos[1]))
            mask = (yy >= y0) & (yy < y0 + s.size[0]) & (xx >= x0) & (xx < x0 + s.size[1])
        labels[mask] = s.cls
    return labels


def _render(labels: np.ndarray, texture: np.ndarray, cfg: SceneConfig,
            rng: np.random.Generator) -> np.ndarray:
    img = CLASS_COLORS[labels] + texture
    if cfg.noise_amplitude > 0:
        img = img + rng.normal(0, cfg.noise_amplitude, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_sequence(cfg: SceneConfig, length: int = 30):
    """Return ``(frames, labels)`` lists of equal length.

    Shapes move by their velocity each frame and reflect off the canvas
    borders.  With probability ``cfg.change_prob`` per frame (t >= 1) the
    whole scene, shapes and background, is resampled.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    if cfg.shapes is not None:
        shapes = [_Shape(s.cls, s.kind, np.array(s.position, float), np.array(s.velocity, float),
                         tuple(s.size)) for s in cfg.shapes]
    else:
        shapes = _random_shapes(cfg, rng)
    texture = _texture(cfg, rng)
    frames, labels = [], []
    for t in range(length):
        if t > 0:
            if cfg.change_prob > 0 and rng.random() < cfg.change_prob:
                shapes = _random_shapes(cfg, rng)
                texture = _texture(cfg, rng)
            else:
                for s in shapes:
                    _advance(s, cfg.height, cfg.width)
        lab = rasterize(shapes, cfg.height, cfg.width)
        labels.append(lab)
        frames.append(_render(lab, texture, cfg, rng))
    return frames, labels


SPLITS = {
    "static": dict(max_speed=0.0, change_prob=0.0),
    "translating": dict(max_speed=2.0, change_prob=0.0),
    "scene_change": dict(max_speed=1.0, change_prob=0.1),
}


def split_configs(split: str, count: int, seed: int, **overrides) -> list[SceneConfig]:
    """Per-sequence scene configs of a named split.

    ``"mixed"`` draws per-sequence speed, change probability and sensor
    noise so that motion and feature noise vary independently.
    """
    if split != "mixed" and split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    cfgs = []
    for n in range(count):
        seq_seed = int(np.random.SeedSequence([seed, n]).generate_state(1)[0])
        if split == "mixed":
            r = np.random.default_rng(seq_seed)
            params = dict(max_speed=float(r.choice([0.0, 0.5, 1.5, 2.5])),
                          change_prob=float(r.choice([0.0, 0.0, 0.15])),
                          noise_amplitude=float(r.choice([0.0, 0.06])))
        else:
            params = dict(SPLITS[split])
        params.update(overrides)
        cfgs.append(SceneConfig(seed=seq_seed, **params))
    return cfgs


def make_split(split: str, count: int, seed: int, length: int = 30, **overrides):
    """Generate ``count`` sequences of a named split as ``(frames, labels)`` pairs."""
    return [generate_sequence(cfg, length) for cfg in split_configs(split, count, seed, **overrides)]


# ---------------------------------------------------------------- extractors

@dataclass(frozen=True)
class ToyExtractor:
    """Frozen random conv stack standing in for one backbone stage.

    ``stage="low"``: conv3x3 -> ReLU -> 2x2 average pool -> conv3x3 -> ReLU.
    ``stage="high"``: three conv3x3 + ReLU layers on top of the low output.
    """

    stage: str
    layers: tuple[ConvLayer, ...] = field(repr=False)

    @classmethod
    def build(cls, stage: str, c_in: int, c_out: int, seed: int, k: int = 3, smooth: bool = True):
        """Random layers whose filters come in sign-flipped pairs ``[W; -W]``.

        After the ReLU the pair keeps both halves of every filter response,
        so no input direction is lost to dead units.
        """
        if c_out % 2:
            raise ValueError("extractor widths must be even")
        rng = np.random.default_rng(seed)
        widths = [c_in, c_out, c_out] if stage == "low" else [c_in, c_out, c_out, c_out]
        layers = []
        for a, b in zip(widths[:-1], widths[1:]):
            half = ConvLayer.init(a, b // 2, k, rng).weight * np.sqrt(3.0)
            if stage == "high" and smooth:
                # channel mixing followed by a box filter
                half = np.broadcast_to(half.sum(axis=(2, 3), keepdims=True) / (k * k), half.shape).copy()
            weight = np.concatenate([half, -half])
            bias = np.zeros(b)
            weight.setflags(write=False)
            bias.setflags(write=False)
            layers.append(ConvLayer(weight, bias))
        return cls(stage, tuple(layers))

    @property
    def out_channels(self) -> int:
        return self.layers[-1].c_out


def _rms_normalize(x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    # per-location scale normalization across channels; parameter-free
    return x / np.sqrt((x * x).mean(axis=0, keepdims=True) + eps)


def avg_pool2(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    return x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def extract(frame: np.ndarray, ex: ToyExtractor) -> np.ndarray:
    """Low-level features of an (H, W, 3) frame on the H/2 x W/2 grid."""
    if ex.stage != "low":
        raise ValueError("extract() needs the low-stage extractor")
    if frame.ndim != 3 or frame.shape[2] != 3 or frame.shape[0] % 2 or frame.shape[1] % 2:
        raise ShapeError(f"expected an (even H, even W, 3) frame, got {frame.shape}")
    x = np.transpose(frame, (2, 0, 1)).astype(np.float64) - 0.5
    x = relu(conv2d(x, ex.layers[0]))
    x = avg_pool2(x)
    return _rms_normalize(relu(conv2d(x, ex.layers[1])))


def extract_high(f_low: np.ndarray, ex: ToyExtractor) -> np.ndarray:
    if ex.stage != "high":
        raise ValueError("extract_high() needs the high-stage extractor")
    x = f_low
    for layer in ex.layers:
        x = relu(conv2d(x, layer))
    return _rms_normalize(x)


def build_extractors(c_l: int = 16, c_h: int = 32, seed: int = 1234, high_k: int = 5):
    low = ToyExtractor.build("low", 3, c_l, seed)
    high = ToyExtractor.build("high", c_l, c_h, seed + 1, k=high_k)
    return low, high


def downsample_labels(labels: np.ndarray) -> np.ndarray:
    """Labels on the feature grid: the majority class of each 2x2 block.

    Ties go to the top-left pixel, which makes this the inverse of
    :func:`upsample_labels`.
    """
    h, w = labels.shape
    blocks = labels.reshape(h // 2, 2, w // 2, 2).transpose(0, 2, 1, 3).reshape(h // 2, w // 2, 4)
    counts = (blocks[..., :, None] == blocks[..., None, :]).sum(axis=-1)
    # first position holding the highest count; position 0 is top-left
    best = np.argmax(counts, axis=-1)
    return np.take_along_axis(blocks, best[..., None], axis=-1)[..., 0]


def upsample_labels(labels: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(labels, 2, axis=0), 2, axis=1)


# ----------------------------------------------------------------------- IO

def _write_pnm(path: Path, magic: bytes, data: np.ndarray) -> None:
    h, w = data.shape[:2]
    path.write_bytes(magic + b"\n%d %d\n255\n" % (w, h) + data.astype(np.uint8).tobytes())


_HEADER = re.compile(rb"(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s")


def _read_pnm(path: Path, magic: bytes) -> np.ndarray:
    buf = path.read_bytes()
    m = _HEADER.match(buf)
    if m is None or m.group(1) != magic:
        raise ValueError(f"{path}: malformed {magic.decode()} header")
    w, h, maxval = int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    channels = 3 if magic == b"P6" else 1
    body = buf[m.end():]
    if len(body) != w * h * channels:
        raise ValueError(f"{path}: expected {w * h * channels} bytes of pixel data, got {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w))


def save_sequence(directory, frames, labels, meta: dict | None = None) -> None:
    if len(frames) != len(labels):
        raise ValueError("frames and labels differ in length")
    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    (directory / "labels").mkdir(parents=True, exist_ok=True)
    for t, (frame, lab) in enumerate(zip(frames, labels)):
        if lab.max(initial=0) > 255 or lab.min(initial=0) < 0:
            raise ValueError("label values must fit in 8 bits")
        _write_pnm(directory / "frames" / f"{t:06d}.ppm", b"P6",
                   np.round(np.clip(frame, 0, 1) * 255))
        _write_pnm(directory / "labels" / f"{t:06d}.pgm", b"P5", lab)
    if meta is not None:
        (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_sequence(directory):
    directory = Path(directory)
    frame_files = sorted((directory / "frames").glob("*.ppm"))
    label_files = sorted((directory / "labels").glob("*.pgm"))
    if not frame_files:
        raise FileNotFoundError(f"{directory}: no frames found")
    if len(frame_files) != len(label_files):
        raise ValueError(f"{directory}: {len(frame_files)} frames but {len(label_files)} label maps")
    frames = [_read_pnm(p, b"P6").astype(np.float64) / 255.0 for p in frame_files]
    labels = [_read_pnm(p, b"P5").astype(np.int64) for p in label_files]
    return frames, labels


def scene_meta(cfg: SceneConfig) -> dict:
    d = asdict(cfg)
    d["size_range"] = list(cfg.size_range)
    return d


# ------------------------------------------------------------------ metrics

def _check_dims(pred, gt):
    if pred.shape != gt.shape:
        raise ShapeError(f"label maps differ in shape: {pred.shape} vs {gt.shape}")


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    """Mean IoU over classes present in ``pred`` or ``gt``."""
    _check_dims(pred, gt)
    ious = []
    for c in range(num_classes):
        p, g = pred == c, gt == c
        union = np.count_nonzero(p | g)
        if union:
            ious.append(np.count_nonzero(p & g) / union)
    return float(np.mean(ious)) if ious else 1.0


def pixel_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    _check_dims(pred, gt)
    return 1.0 - np.count_nonzero(pred != gt) / gt.size


def class_accuracy(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    """Mean per-class recall over classes that occur in ``gt``."""
    _check_dims(pred, gt)
    recalls = []
    for c in range(num_classes):
        g = gt == c
        n = np.count_nonzero(g)
        if n:
            recalls.append(np.count_nonzero(g & (pred == c)) / n)
    return float(np.mean(recalls))
