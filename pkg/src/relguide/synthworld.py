"""Procedural scenes and frozen synthetic feature extractors.

Scenes are stacks of coloured shapes over a background, each shape with its
own class id and a near-planar depth layer, so label boundaries and depth
discontinuities coincide.  Synthetic extractors are fixed random conv stacks
average-pooled onto a stride-k patch grid; two corruptions mimic the failure
modes that the consensus field is meant to filter out: sparse high-norm
channel spikes and translated, blurred features.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import numerics as nx
from .numerics import Rng

PALETTE = np.array(
    [
        [0.50, 0.50, 0.50],
        [0.85, 0.20, 0.15],
        [0.15, 0.70, 0.25],
        [0.20, 0.30, 0.85],
        [0.90, 0.80, 0.20],
        [0.70, 0.25, 0.75],
        [0.20, 0.80, 0.80],
        [0.95, 0.55, 0.10],
    ]
)


@dataclass(frozen=True)
class SceneConfig:
    size: int = 64
    n_classes: int = 5
    min_shapes: int = 1
    max_shapes: int = 4
    noise: float = 0.03
    window: int = 7
    depth_min: float = 1.0
    depth_max: float = 11.0

    def __post_init__(self):
        if self.n_classes > len(PALETTE):
            raise ValueError(f"at most {len(PALETTE)} classes")
        if self.max_shapes > self.n_classes - 1:
            raise ValueError("each shape needs its own foreground class")


@dataclass
class SceneSample:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    labels: np.ndarray  # (H, W) int
    depth: np.ndarray  # (H, W) > 0
    boundary: np.ndarray  # (H, W, 2) in [-1, 1]
    seed: int = 0


def _shape_mask(kind, rng: Rng, n):
    ys, xs = np.mgrid[0:n, 0:n] + 0.5
    cx, cy = rng.uniform(0.2 * n, 0.8 * n, 2)
    if kind == "ellipse":
        a, b = rng.uniform(0.1 * n, 0.28 * n, 2)
        th = rng.uniform(0, np.pi)
        u = (xs - cx) * np.cos(th) + (ys - cy) * np.sin(th)
        v = -(xs - cx) * np.sin(th) + (ys - cy) * np.cos(th)
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if kind == "rect":
        a, b = rng.uniform(0.08 * n, 0.25 * n, 2)
        th = rng.uniform(0, np.pi / 2)
        u = (xs - cx) * np.cos(th) + (ys - cy) * np.sin(th)
        v = -(xs - cx) * np.sin(th) + (ys - cy) * np.cos(th)
        return (np.abs(u) <= a) & (np.abs(v) <= b)
    # triangle from three points on a jittered circle
    rad = rng.uniform(0.15 * n, 0.3 * n)
    angles = np.sort(rng.uniform(0, 2 * np.pi, 3))
    angles = angles[0] + np.array([0.0, 2.0, 4.0]) * np.pi / 3 + rng.uniform(-0.4, 0.4, 3)
    px = cx + rad * np.cos(angles)
    py = cy + rad * np.sin(angles)
    inside = np.ones((n, n), dtype=bool)
    for i in range(3):
        j = (i + 1) % 3
        cross = (px[j] - px[i]) * (ys - py[i]) - (py[j] - py[i]) * (xs - px[i])
        inside &= cross >= 0
    return inside


def boundary_field(labels, window):
    """Mean offset of same-label neighbours (clamp-to-edge window), over the radius."""
    from .relational import window_index

    H, W = labels.shape
    r = window // 2
    if r == 0:
        return np.zeros((H, W, 2))
    idx, offsets = window_index(H, W, window)
    flat = labels.ravel()
    same = (flat[idx] == flat[:, None]).astype(np.float64)
    mu = same @ offsets / same.sum(axis=1, keepdims=True)
    return np.clip(mu / r, -1.0, 1.0).reshape(H, W, 2)


def _render(masks, classes, rng: Rng, cfg: SceneConfig):
    n = cfg.size
    labels = np.zeros((n, n), dtype=np.int64)
    image = np.broadcast_to(PALETTE[0], (n, n, 3)).copy()
    ys, xs = np.mgrid[0:n, 0:n] / n
    depth = 9.0 + rng.uniform(-0.3, 0.3) * ys + rng.uniform(-0.3, 0.3) * xs
    layer = 7.2
    for m, c in zip(masks, classes):
        color = np.clip(PALETTE[c] + rng.uniform(-0.05, 0.05, 3), 0, 1)
        labels[m] = c
        image[m] = color
        plane = layer + rng.uniform(-0.15, 0.15) + rng.uniform(-0.2, 0.2) * ys + rng.uniform(-0.2, 0.2) * xs
        depth[m] = plane[m]
        layer -= 1.3
    image = np.clip(image + rng.normal(image.shape, scale=cfg.noise), 0.0, 1.0)
    return image, labels, depth


def gen_scene(rng: Rng | int, cfg: SceneConfig = SceneConfig()) -> SceneSample:
    seed = rng if isinstance(rng, int) else rng.seed
    if isinstance(rng, int):
        rng = Rng(rng, stream=0x5C)
    n_shapes = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    classes = rng.permutation(np.arange(1, cfg.n_classes))[:n_shapes]
    kinds = rng.choice(["ellipse", "rect", "triangle"], size=n_shapes)
    masks = [_shape_mask(k, rng, cfg.size) for k in kinds]
    image, labels, depth = _render(masks, classes, rng, cfg)
    return SceneSample(image, labels, depth, boundary_field(labels, cfg.window), seed)


def disk_scene(cfg: SceneConfig = SceneConfig(), radius=None, cls=1) -> SceneSample:
    """A single centred disk on background; handy for geometry checks."""
    n = cfg.size
    radius = n / 4 if radius is None else radius
    ys, xs = np.mgrid[0:n, 0:n] + 0.5
    mask = (xs - n / 2) ** 2 + (ys - n / 2) ** 2 <= radius**2
    image, labels, depth = _render([mask], [cls], Rng(0, stream=0x5D), cfg)
    return SceneSample(image, labels, depth, boundary_field(labels, cfg.window), 0)


# ------------------------------------------------------------ synthetic VFMs

@dataclass(frozen=True)
class Corruption:
    kind: str = "none"  # none | artifact | misalign
    rate: float = 0.05
    magnitude: float = 10.0
    shift: tuple = (0, 0)  # (dx, dy) in feature cells
    blur: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "artifact", "misalign"):
            raise ValueError(f"unknown corruption {self.kind!r}")


@dataclass(frozen=True)
class SyntheticVFM:
    seed: int
    stride: int = 8
    channels: int = 16
    corruption: Corruption = field(default_factory=Corruption)
    hidden: int = 32

    def weights(self):
        return _vfm_weights(self.seed, self.channels, self.hidden)


@lru_cache(maxsize=64)
def _vfm_weights(seed, channels, hidden):
    rng = Rng(seed, stream=0xF0)
    w1 = rng.normal((3, 3, 3, hidden), scale=1.2)
    b1 = rng.normal(hidden, scale=0.5)
    w2 = rng.normal((hidden, channels), scale=1.0 / np.sqrt(hidden) * 1.5)
    b2 = rng.normal(channels, scale=0.3)
    for a in (w1, b1, w2, b2):
        a.setflags(write=False)
    return w1, b1, w2, b2


_PIXEL_CACHE: dict = {}


def pixel_features(vfm: SyntheticVFM, image) -> np.ndarray:
    """Per-pixel features before patch pooling (memoised on extractor and image bytes)."""
    image = np.asarray(image, dtype=np.float64)
    key = (vfm, image.shape, _image_key(image))
    hit = _PIXEL_CACHE.get(key)
    if hit is not None:
        return hit
    w1, b1, w2, b2 = vfm.weights()
    with nx.no_grad():
        h = np.tanh(nx.conv2d(image - 0.5, w1, b1).data)
    out = 2.0 * np.tanh(h @ w2 + b2)
    out.setflags(write=False)
    if len(_PIXEL_CACHE) > 16:
        _PIXEL_CACHE.clear()
    _PIXEL_CACHE[key] = out
    return out


def avg_pool(x, k):
    H, W = x.shape[:2]
    if H % k or W % k:
        raise nx.ShapeError(f"{H}x{W} is not divisible by stride {k}")
    return x.reshape(H // k, k, W // k, k, *x.shape[2:]).mean(axis=(1, 3))


def _image_key(image):
    return zlib.crc32(np.ascontiguousarray(image, dtype="<f8").tobytes())


def inject_artifacts(F, rate, magnitude, rng: Rng):
    """Overwrite a seeded subset of positions with near-one-hot spikes; returns (features, mask).

    The clean vector survives at 10% strength, so the token keeps a trace of
    local content but is dominated by one channel.
    """
    F = np.array(F, dtype=np.float64)
    H, W, C = F.shape
    n = H * W
    count = 0 if rate <= 0 else max(1, int(round(rate * n)))
    pos = rng.choice(n, size=count, replace=False) if count else np.array([], dtype=int)
    chan = rng.integers(0, C, size=count)
    mask = np.zeros(n, dtype=bool)
    mask[pos] = True
    flat = F.reshape(n, C)
    flat[pos] *= 0.1
    flat[pos, chan] += magnitude
    return flat.reshape(H, W, C), mask.reshape(H, W)


def inject_misalign(F, shift=(0, 0), blur=0):
    """Translate by (dx, dy) cells with edge clamping, then box-blur with the given radius."""
    F = np.asarray(F, dtype=np.float64)
    H, W = F.shape[:2]
    dx, dy = int(shift[0]), int(shift[1])
    if abs(dx) >= W or abs(dy) >= H:
        raise ValueError(f"shift {shift} exceeds map extents {H}x{W}")
    ys = np.clip(np.arange(H) - dy, 0, H - 1)
    xs = np.clip(np.arange(W) - dx, 0, W - 1)
    out = F[ys][:, xs]
    if blur > 0:
        k = 2 * blur + 1
        pad = np.pad(out, ((blur, blur), (blur, blur)) + ((0, 0),) * (F.ndim - 2), mode="edge")
        win = np.lib.stride_tricks.sliding_window_view(pad, (k, k), axis=(0, 1))
        out = win.mean(axis=(-2, -1))
    return out


def extract(vfm: SyntheticVFM, image, stride=None, return_mask=False):
    """Patch features at the given stride (default: the extractor's own)."""
    k = vfm.stride if stride is None else int(stride)
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape[:2]
    if H % k or W % k:
        raise nx.ShapeError(f"image {H}x{W} is not divisible by stride {k}")
    F = avg_pool(pixel_features(vfm, image), k)
    mask = np.zeros(F.shape[:2], dtype=bool)
    c = vfm.corruption
    if c.kind == "artifact":
        rng = Rng(vfm.seed, stream=(_image_key(image) << 8) ^ k)
        F, mask = inject_artifacts(F, c.rate, c.magnitude, rng)
    elif c.kind == "misalign":
        F = inject_misalign(F, c.shift, c.blur)
    return (F, mask) if return_mask else F


def label_grid(labels, k, n_classes):
    """Majority label per k x k block (ties to the lower class id)."""
    labels = np.asarray(labels)
    if k == 1:
        return labels.copy()
    onehot = np.eye(n_classes)[labels]
    return np.argmax(avg_pool(onehot, k), axis=-1)
