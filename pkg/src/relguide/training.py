"""Training objective and loop for the guided upsampler.

The loss is reconstruction MSE against a finer-stride extraction of the same
source extractor, plus ``lam`` times the mean L1 distance between the COM
field of the prediction and a frozen consensus field built from the guidance
panel.  Guidance targets are computed once per scene and never differentiated.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .fusion import FusionConfig, build_consensus, fuse_baseline_mean, source_fields
from .numerics import Rng, Tensor
from .relational import Projection, RelationalConfig, com_field, local_affinity
from .synthworld import SceneSample, SyntheticVFM, _image_key, avg_pool, extract
from .upsampler import UpsamplerConfig, UpsamplerParams, upsample

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace or []


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.5
    lr: float = 2e-4
    weight_decay: float = 1e-5
    batch: int = 2
    iterations: int = 2000
    seed: int = 0
    crop: int = 32
    coarse_stride: int = 8
    fine_stride: int = 2
    fusion: str = "sa"  # sa | mean
    sources: tuple = ()
    guidance: tuple = ()
    relational: RelationalConfig = field(default_factory=RelationalConfig)
    fusion_cfg: FusionConfig = field(default_factory=FusionConfig)
    upsampler: UpsamplerConfig = field(default_factory=UpsamplerConfig)

    @property
    def scale(self) -> int:
        return self.coarse_stride // self.fine_stride

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.coarse_stride % self.fine_stride:
            raise ValueError("coarse stride must be a multiple of the fine stride")
        if self.fusion not in ("sa", "mean"):
            raise ValueError(f"unknown fusion strategy {self.fusion!r}")


@dataclass
class TrainPair:
    image: np.ndarray  # crop pooled onto the fine grid, (H, W, 3)
    F_lr: np.ndarray
    F_hr: np.ndarray
    b_ens: np.ndarray | None
    source_id: int = 0


def projection_for(vfm: SyntheticVFM, rel: RelationalConfig) -> Projection:
    return Projection.random(vfm.channels, rel.dim, rel.projection_seed * 1_000_003 + vfm.seed)


def guidance_target(image, panel, cfg: TrainConfig, target):
    feats = [extract(g, image) for g in panel]
    projs = [projection_for(g, cfg.relational) for g in panel]
    if cfg.fusion == "mean":
        fields = source_fields(feats, projs, cfg.relational, target)
        return fuse_baseline_mean(np.stack([f.com for f in fields], axis=2))
    return build_consensus(feats, projs, cfg.relational, cfg.fusion_cfg, target).b_ens


_SCENE_CACHE: dict = {}


def _scene_maps(sample: SceneSample, source, panel, cfg: TrainConfig):
    """Full-scene coarse/fine features and guidance target, memoised per scene and setting."""
    img = sample.image
    key = (_image_key(img), img.shape, source, tuple(panel) if cfg.lam > 0 else (), cfg.coarse_stride,
           cfg.fine_stride, cfg.fusion, cfg.relational, cfg.fusion_cfg)
    hit = _SCENE_CACHE.get(key)
    if hit is not None:
        return hit
    F_lr = extract(source, img, stride=cfg.coarse_stride)
    F_hr = extract(source, img, stride=cfg.fine_stride)
    b_ens = None
    if cfg.lam > 0 and panel:
        b_ens = guidance_target(img, panel, cfg, F_hr.shape[:2])
    if len(_SCENE_CACHE) > 256:
        _SCENE_CACHE.clear()
    out = (avg_pool(img, cfg.fine_stride), F_lr, F_hr, b_ens)
    _SCENE_CACHE[key] = out
    return out


def make_pair(sample: SceneSample, source: SyntheticVFM, panel, cfg: TrainConfig, rng: Rng, source_id=0) -> TrainPair:
    """Random crop aligned to the coarse patch grid, sliced from full-scene maps."""
    n = sample.image.shape[0]
    c, k, s = cfg.crop, cfg.coarse_stride, cfg.scale
    if c < k or c % k or c > n or n % k:
        raise ValueError(f"crop {c} must be a multiple of the coarse stride {k} and fit the scene")
    gy, gx = (int(v) for v in rng.integers(0, (n - c) // k + 1, size=2))
    m = c // k
    image, F_lr, F_hr, b_ens = _scene_maps(sample, source, panel, cfg)
    lr = (slice(gy, gy + m), slice(gx, gx + m))
    hr = (slice(gy * s, (gy + m) * s), slice(gx * s, (gx + m) * s))
    return TrainPair(image[hr], F_lr[lr], F_hr[hr], None if b_ens is None else b_ens[hr], source_id)


def loss_rec(F_hat, F_hr) -> Tensor:
    F_hat, F_hr = nx.as_tensor(F_hat), nx.as_tensor(F_hr)
    if F_hat.shape != F_hr.shape:
        raise nx.ShapeError(f"{F_hat.shape} vs {F_hr.shape}")
    diff = F_hat - F_hr
    return nx.mean(diff * diff)


def loss_guide(b_hat, b_ens) -> Tensor:
    b_hat, b_ens = nx.as_tensor(b_hat), nx.as_tensor(b_ens)
    if b_hat.shape != b_ens.shape:
        raise nx.ShapeError(f"{b_hat.shape} vs {b_ens.shape}")
    n_pos = b_hat.shape[0] * b_hat.shape[1]
    return nx.sum_(nx.abs_(b_hat - b_ens)) * (1.0 / n_pos)


def predicted_com(F_hat, rel: RelationalConfig) -> Tensor:
    """COM field of the prediction itself (identity projection, same window and tau)."""
    return com_field(local_affinity(F_hat, rel), rel)


def loss_total(pair: TrainPair, params: UpsamplerParams, lam: float, cfg: TrainConfig):
    """Returns (total, rec, guide); guide is None when lam == 0 and is then never evaluated."""
    F_hat = upsample(pair.image, pair.F_lr, params, cfg.upsampler, scale=cfg.scale)
    rec = loss_rec(F_hat, pair.F_hr)
    if lam == 0 or pair.b_ens is None:
        return rec, rec, None
    guide = loss_guide(predicted_com(F_hat, cfg.relational), pair.b_ens)
    return rec + guide * lam, rec, guide


class AdamW:
    """Adam moments with decoupled weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)."""

    def __init__(self, lr=2e-4, weight_decay=1e-5, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, arrays, grads):
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise DivergenceError("non-finite gradient")
        if self.m is None:
            self.m = [np.zeros_like(a) for a in arrays]
            self.v = [np.zeros_like(a) for a in arrays]
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            a -= self.lr * ((m / c1) / (np.sqrt(v / c2) + self.eps) + self.wd * a)


@dataclass
class TrainResult:
    params: UpsamplerParams
    trace: list  # rows: (iteration, source_id, loss_rec, loss_guide | None, loss_total)


def train(scenes, cfg: TrainConfig, params: UpsamplerParams | None = None) -> TrainResult:
    if not cfg.sources:
        raise ValueError("need at least one source extractor")
    if cfg.lam > 0 and not cfg.guidance:
        raise ValueError("lam > 0 needs at least one guidance extractor")
    params = UpsamplerParams.init(cfg.upsampler) if params is None else params.copy()
    opt = AdamW(cfg.lr, cfg.weight_decay)
    rng = Rng(cfg.seed, stream=0x7A)
    trace = []
    for it in range(cfg.iterations):
        sid = it % len(cfg.sources)
        source = cfg.sources[sid]
        grads = [np.zeros_like(a) for a in params.arrays()]
        sums = np.zeros(3)
        for _ in range(cfg.batch):
            scene = scenes[int(rng.integers(0, len(scenes)))]
            pair = make_pair(scene, source, cfg.guidance, cfg, rng, sid)
            params.zero_grad()
            total, rec, guide = loss_total(pair, params, cfg.lam, cfg)
            if not math.isfinite(float(total.data)):
                raise DivergenceError(f"non-finite loss at iteration {it}", trace)
            total.backward()
            for g, t in zip(grads, params.tensors):
                if t.grad is not None:
                    g += t.grad
            sums += (float(rec.data), 0.0 if guide is None else float(guide.data), float(total.data))
        sums /= cfg.batch
        opt.step(params.arrays(), [g / cfg.batch for g in grads])
        params.zero_grad()
        trace.append((it, sid, sums[0], None if cfg.lam == 0 else sums[1], sums[2]))
        if it % 200 == 0:
            log.debug("iter %d rec %.5f guide %.5f", it, sums[0], sums[1])
    return TrainResult(params, trace)
