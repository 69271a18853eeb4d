"""Spikiness-aware source selection and consensus COM fields."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError, bilinear_resize, no_grad
from .relational import RelationalConfig, RelationalField, project, relational_field


@dataclass(frozen=True)
class FusionConfig:
    beta: float = 20.0
    gamma: float = 0.6
    std_floor: float = 1e-8

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


@dataclass
class ConsensusField:
    b_ens: np.ndarray  # (H, W, 2)
    alpha: np.ndarray  # (H, W, N) one-hot
    confidence: np.ndarray  # (H, W, N)

    @property
    def selection(self) -> np.ndarray:
        return np.argmax(self.alpha, axis=-1)


def zscore(H, std_floor=1e-8):
    """Spatial Z-score with population std; constant maps map to zeros."""
    H = np.asarray(H, dtype=np.float64)
    if H.size == 0:
        raise ValueError("zscore of an empty map")
    centred = H - H.mean()
    std = H.std()
    if std < std_floor:
        return np.zeros_like(H)
    return centred / std


def confidence(H_tilde, K, cfg: FusionConfig):
    H_tilde = np.asarray(H_tilde, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if H_tilde.shape != K.shape:
        raise ShapeError(f"{H_tilde.shape} vs {K.shape}")
    return -H_tilde - cfg.beta * np.maximum(0.0, K - cfg.gamma)


def select(g):
    """Winner-take-all one-hot over the last axis; ties go to the lowest index."""
    g = np.asarray(g)
    if g.shape[-1] < 1:
        raise ValueError("need at least one source")
    win = np.argmax(g, axis=-1)  # argmax returns the first maximum
    return np.eye(g.shape[-1])[win]


def consensus(b, alpha, g=None) -> ConsensusField:
    """Per-pixel gather of the selected source field.  ``b`` is (H, W, N, 2)."""
    b = np.asarray(b, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if b.shape[:3] != alpha.shape or b.shape[-1] != 2:
        raise ShapeError(f"field stack {b.shape} does not match selection {alpha.shape}")
    # one-hot alpha: gather rather than sum so the result is bitwise a source value
    win = np.argmax(alpha, axis=-1)
    b_ens = np.take_along_axis(b, win[..., None, None], axis=2)[:, :, 0, :]
    return ConsensusField(b_ens, alpha, np.zeros(alpha.shape) if g is None else np.asarray(g))


def fuse_baseline_mean(b):
    """Unweighted per-pixel mean over sources, re-clipped."""
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 4 or b.shape[2] < 1:
        raise ShapeError(f"expected (H, W, N, 2), got {b.shape}")
    return np.clip(b.mean(axis=2), -1.0, 1.0)


def source_fields(features, projections, rel_cfg: RelationalConfig, target) -> list[RelationalField]:
    """Project, resample to ``target`` = (H, W), then extract one field per source."""
    if len(features) < 1 or len(features) != len(projections):
        raise ValueError("need one projection per source and at least one source")
    out = []
    with no_grad():
        for F, phi in zip(features, projections):
            z = bilinear_resize(project(F, phi), *target)
            out.append(relational_field(z, rel_cfg))
    return out


def fuse_fields(fields: list[RelationalField], cfg: FusionConfig) -> ConsensusField:
    g = np.stack([confidence(zscore(f.entropy, cfg.std_floor), f.spikiness, cfg) for f in fields], axis=-1)
    alpha = select(g)
    b = np.stack([f.com for f in fields], axis=2)
    return consensus(b, alpha, g)


def build_consensus(features, projections, rel_cfg: RelationalConfig, fusion_cfg: FusionConfig, target) -> ConsensusField:
    return fuse_fields(source_fields(features, projections, rel_cfg, target), fusion_cfg)
