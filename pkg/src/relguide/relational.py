"""Local self-affinity, entropy, spikiness and centre-of-mass fields.

Feature maps are (H, W, C).  Windows are sampled clamp-to-edge so every
position sees exactly w*w neighbours.  Offsets are (dx, dy) with x to the
right and y downward; window slot ``(dy + r) * w + (dx + r)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass(frozen=True)
class RelationalConfig:
    window: int = 7
    dim: int = 16
    temperature: float | None = None  # None -> sqrt(dim)
    eps: float = 1e-6
    projection_seed: int = 0

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and positive, got {self.window}")
        if self.tau <= 0 or self.eps <= 0:
            raise ValueError("temperature and eps must be positive")

    @property
    def radius(self) -> int:
        return self.window // 2

    @property
    def tau(self) -> float:
        return math.sqrt(self.dim) if self.temperature is None else float(self.temperature)


@dataclass
class RelationalField:
    entropy: np.ndarray  # (H, W)
    spikiness: np.ndarray  # (H, W)
    com: np.ndarray  # (H, W, 2)


@dataclass(frozen=True)
class Projection:
    """Frozen linear map from C source channels to a shared d-dim space.

    The matrix is a seeded signed channel grouping: each source channel is
    routed, with a random sign, to exactly one output axis and every group is
    normalised.  Columns (or rows, when C < d) are orthonormal and a spike in
    a single source channel stays a spike after projection.
    """

    matrix: np.ndarray

    @classmethod
    def random(cls, in_dim: int, out_dim: int, seed: int) -> "Projection":
        rng = nx.Rng(seed, stream=0xF1)
        m = np.zeros((in_dim, out_dim))
        signs = rng.choice([-1.0, 1.0], size=in_dim)
        if in_dim >= out_dim:
            # every output axis receives at least one channel
            groups = np.concatenate([np.arange(out_dim), rng.integers(0, out_dim, in_dim - out_dim)])
            groups = groups[rng.permutation(in_dim)]
            counts = np.bincount(groups, minlength=out_dim)
            m[np.arange(in_dim), groups] = signs / np.sqrt(counts[groups])
        else:
            axes = rng.permutation(out_dim)[:in_dim]
            m[np.arange(in_dim), axes] = signs
        m.setflags(write=False)
        return cls(m)

    @classmethod
    def identity(cls, dim: int) -> "Projection":
        return cls(np.eye(dim))

    @property
    def in_dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def out_dim(self) -> int:
        return self.matrix.shape[1]


def project(F, phi: Projection) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    if F.shape[-1] != phi.in_dim:
        raise nx.ShapeError(f"feature map has {F.shape[-1]} channels, projection expects {phi.in_dim}")
    return F @ phi.matrix


@lru_cache(maxsize=64)
def window_index(H: int, W: int, w: int):
    """Clamped flat neighbour indices (H*W, w*w) and offsets (w*w, 2)."""
    r = w // 2
    d = np.arange(-r, r + 1)
    dy, dx = np.meshgrid(d, d, indexing="ij")
    dy, dx = dy.ravel(), dx.ravel()
    ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    qy = np.clip(ys.reshape(-1, 1) + dy, 0, H - 1)
    qx = np.clip(xs.reshape(-1, 1) + dx, 0, W - 1)
    idx = qy * W + qx
    offsets = np.stack([dx, dy], axis=1).astype(np.float64)
    idx.setflags(write=False)
    offsets.setflags(write=False)
    return idx, offsets


def local_affinity(z, cfg: RelationalConfig) -> Tensor:
    """Softmax over each w*w window of <z(p), z(q)> / tau; shape (H, W, w, w)."""
    z = nx.as_tensor(z)
    H, W, d = z.shape
    w = cfg.window
    idx, _ = window_index(H, W, w)
    zf = z.reshape(H * W, d)
    zn = nx.gather_rows(zf, idx)
    logits = nx.batched_dot(zf, zn) * (1.0 / cfg.tau)
    S = nx.softmax(logits, axis=1)
    return S.reshape(H, W, w, w)


def entropy(S) -> Tensor:
    S = nx.as_tensor(S)
    H, W = S.shape[:2]
    return -nx.sum_(nx.xlogx(S.reshape(H, W, -1)), axis=2)


def spikiness(z, eps: float = 1e-6) -> Tensor:
    z = nx.as_tensor(z)
    return nx.linfnorm(z, axis=-1) / (nx.l2norm(z, axis=-1) + eps)


def com_field(S, cfg: RelationalConfig) -> Tensor:
    """Expected window offset, divided by the radius and clipped to [-1, 1]."""
    S = nx.as_tensor(S)
    H, W = S.shape[:2]
    r = cfg.radius
    if r == 0:
        return Tensor(np.zeros((H, W, 2)))
    _, offsets = window_index(H, W, cfg.window)
    # slot k and slot w*w-1-k hold opposite offsets; pairing them makes symmetric weights cancel exactly
    half = np.arange(cfg.window * cfg.window // 2)
    Sf = S.reshape(H * W, -1)
    diff = nx.getitem(Sf, (slice(None), half)) - nx.getitem(Sf, (slice(None), cfg.window**2 - 1 - half))
    mu = nx.einsum("pq,qk->pk", diff, offsets[half])
    return nx.clip(mu * (1.0 / r), -1.0, 1.0).reshape(H, W, 2)


def relational_tensors(F, cfg: RelationalConfig, phi: Projection | None = None):
    """Differentiable (entropy, spikiness, com) tensors for one feature map."""
    if phi is not None:
        F = project(F.data if isinstance(F, Tensor) else F, phi)
    z = nx.as_tensor(F)
    S = local_affinity(z, cfg)
    return entropy(S), spikiness(z, cfg.eps), com_field(S, cfg)


def relational_field(F, cfg: RelationalConfig, phi: Projection | None = None) -> RelationalField:
    Hm, K, b = relational_tensors(F, cfg, phi)
    return RelationalField(Hm.data, K.data, b.data)
