"""Image-guided upsampler: conv encoder -> 2-D RoPE -> cross-scale neighbourhood attention.

Queries are the position-encoded guidance at high resolution, keys are the
same guidance average-pooled to the low-resolution grid, and values are the
raw low-resolution features (no value projection).  The call signature takes
only the image and the low-resolution features: guidance fields from other
extractors have no way in at inference time.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass(frozen=True)
class UpsamplerConfig:
    dim: int = 32
    window: int = 3
    widths: tuple = (16, 16)
    kernels: tuple = (5, 3, 3)
    rope_base: float = 10.0
    scale: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("attention window must be odd and positive")
        if self.scale < 1:
            raise ValueError("scale must be >= 1")
        if self.dim % 4:
            raise ValueError("guidance dim must be divisible by 4 for 2-D RoPE")
        if len(self.kernels) != len(self.widths) + 1:
            raise ValueError("need one kernel size per encoder layer")


@dataclass
class UpsamplerParams:
    names: list
    tensors: list = field(repr=False)

    @classmethod
    def init(cls, cfg: UpsamplerConfig) -> "UpsamplerParams":
        rng = nx.Rng(cfg.seed, stream=0xE1)
        chans = (3, *cfg.widths, cfg.dim)
        names, tensors = [], []
        for i, k in enumerate(cfg.kernels):
            cin, cout = chans[i], chans[i + 1]
            fan_in = k * k * cin
            names += [f"conv{i}.weight", f"conv{i}.bias"]
            tensors += [
                Tensor(rng.normal((k, k, cin, cout), scale=1.0 / math.sqrt(fan_in)), requires_grad=True),
                Tensor(np.zeros(cout), requires_grad=True),
            ]
        return cls(names, tensors)

    @property
    def count(self) -> int:
        return int(sum(t.data.size for t in self.tensors))

    def arrays(self):
        return [t.data for t in self.tensors]

    def copy(self) -> "UpsamplerParams":
        return UpsamplerParams(list(self.names), [Tensor(t.data.copy(), requires_grad=True) for t in self.tensors])

    def checksum(self) -> str:
        h = hashlib.sha256()
        for t in self.tensors:
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def zero_grad(self):
        for t in self.tensors:
            t.grad = None


def encode_guidance(image, params: UpsamplerParams) -> Tensor:
    """Stride-1 conv stack; tanh between layers, linear output."""
    x = nx.as_tensor(image)
    if x.ndim != 3 or x.shape[2] != 3:
        raise nx.ShapeError(f"expected an (H, W, 3) image, got {x.shape}")
    n_layers = len(params.tensors) // 2
    for i in range(n_layers):
        x = nx.conv2d(x, params.tensors[2 * i], params.tensors[2 * i + 1])
        if i < n_layers - 1:
            x = nx.tanh(x)
    if not np.all(np.isfinite(x.data)):
        raise nx.DomainError("non-finite guidance activations")
    return x


def pixel_positions(H, W):
    """Normalised (x, y) pixel-centre coordinates in [0, 1)."""
    ys, xs = np.meshgrid((np.arange(H) + 0.5) / H, (np.arange(W) + 0.5) / W, indexing="ij")
    return np.stack([xs, ys], axis=-1)


def rope_frequencies(dim, base):
    n = dim // 4
    return math.pi * base ** (np.arange(n) / n)


@lru_cache(maxsize=8)
def _pair_swap(dim):
    P = np.zeros((dim, dim))
    for c in range(0, dim, 2):
        P[c + 1, c] = 1.0
        P[c, c + 1] = 1.0
    P.setflags(write=False)
    return P


def rope2d(G, base=10.0, positions=None) -> Tensor:
    """Rotate channel pairs: first half by x position, second half by y position."""
    G = nx.as_tensor(G)
    d = G.shape[-1]
    if d % 4:
        raise nx.ShapeError(f"RoPE needs channels divisible by 4, got {d}")
    if positions is None:
        positions = pixel_positions(*G.shape[:2])
    positions = np.asarray(positions, dtype=np.float64)
    freqs = rope_frequencies(d, base)
    ang = np.concatenate([positions[..., :1] * freqs, positions[..., 1:2] * freqs], axis=-1)
    ang = np.repeat(ang, 2, axis=-1)  # one angle per channel pair
    cos = np.cos(ang)
    sin = np.sin(ang)
    sin[..., 0::2] *= -1.0
    return G * cos + _swap(G) * sin


def _swap(G):
    spec = {1: "c,cd->d", 2: "pc,cd->pd", 3: "hwc,cd->hwd"}[G.ndim]
    return nx.einsum(spec, G, _pair_swap(G.shape[-1]))


def pool_keys(G, s: int) -> Tensor:
    G = nx.as_tensor(G)
    H, W, d = G.shape
    if H % s or W % s:
        raise nx.ShapeError(f"{H}x{W} is not divisible by {s}")
    return nx.mean(G.reshape(H // s, s, W // s, s, d), axis=(1, 3))


@lru_cache(maxsize=64)
def attention_index(H, W, h, w, window):
    """Key indices (H*W, window**2) into the flattened low-res grid plus validity mask."""
    sy, sx = H // h, W // w
    r = window // 2
    d = np.arange(-r, r + 1)
    dy, dx = np.meshgrid(d, d, indexing="ij")
    ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    ky = (ys // sy).reshape(-1, 1) + dy.ravel()
    kx = (xs // sx).reshape(-1, 1) + dx.ravel()
    valid = (ky >= 0) & (ky < h) & (kx >= 0) & (kx < w)
    idx = np.where(valid, np.clip(ky, 0, h - 1) * w + np.clip(kx, 0, w - 1), 0)
    idx.setflags(write=False)
    valid.setflags(write=False)
    return idx, valid


def attention_weights(Q, K, window) -> Tensor:
    Q, K = nx.as_tensor(Q), nx.as_tensor(K)
    H, W, d = Q.shape
    h, w, _ = K.shape
    idx, valid = attention_index(H, W, h, w, window)
    kn = nx.gather_rows(K.reshape(h * w, d), idx)
    logits = nx.batched_dot(Q.reshape(H * W, d), kn) * (1.0 / math.sqrt(d))
    return nx.softmax(logits, axis=1, mask=valid)


def neighborhood_attention(Q, K, V, window) -> Tensor:
    """Each high-res query attends to the window x window low-res cells around its anchor."""
    Q, K, V = nx.as_tensor(Q), nx.as_tensor(K), nx.as_tensor(V)
    H, W, _ = Q.shape
    h, w, C = V.shape
    if K.shape[:2] != (h, w) or H % h or W % w or H // h != W // w:
        raise nx.ShapeError(f"inconsistent query {Q.shape}, key {K.shape}, value {V.shape}")
    A = attention_weights(Q, K, window)
    idx, _ = attention_index(H, W, h, w, window)
    vn = nx.gather_rows(V.reshape(h * w, C), idx)
    return nx.batched_combine(A, vn).reshape(H, W, C)


def upsample(image, F_lr, params: UpsamplerParams, cfg: UpsamplerConfig, scale: int | None = None) -> Tensor:
    s = cfg.scale if scale is None else scale
    F_lr = nx.as_tensor(F_lr)
    h, w, _ = F_lr.shape
    img = nx.as_tensor(image)
    if img.shape[:2] != (h * s, w * s):
        raise nx.ShapeError(f"image {img.shape[:2]} does not match {h}x{w} features at scale {s}")
    G = rope2d(encode_guidance(img, params), cfg.rope_base)
    return neighborhood_attention(G, pool_keys(G, s), F_lr, cfg.window)


def bilinear_upsample(F_lr, s: int) -> np.ndarray:
    F_lr = np.asarray(F_lr)
    return nx.bilinear_resize(F_lr, F_lr.shape[0] * s, F_lr.shape[1] * s)
