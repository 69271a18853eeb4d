"""Linear probes, dense-prediction metrics, ablation runner and raster emitters.

Probes train a single linear map on frozen features: a class classifier for
segmentation and a 256-bin soft depth head for depth.  Metrics follow the
usual conventions: mIoU skips classes missing from both prediction and
ground truth, delta1 counts pixels whose depth ratio stays under 1.25.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .config import RunConfig, dump_config
from .numerics import Rng, Tensor
from .synthworld import avg_pool, extract, gen_scene, label_grid
from .training import AdamW, DivergenceError, train
from .upsampler import bilinear_upsample, upsample

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- metrics

def confusion(pred, gt, n_cls):
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise nx.ShapeError(f"{pred.shape} vs {gt.shape}")
    if pred.size and (pred.min() < 0 or gt.min() < 0 or pred.max() >= n_cls or gt.max() >= n_cls):
        raise ValueError("label out of range")
    return np.bincount(gt * n_cls + pred, minlength=n_cls * n_cls).reshape(n_cls, n_cls)


def miou(pred, gt, n_cls):
    """Returns (mIoU, per-class IoU with nan for excluded classes, pixel accuracy)."""
    cm = confusion(pred, gt, n_cls).astype(np.float64)
    inter = np.diag(cm)
    union = cm.sum(0) + cm.sum(1) - inter
    iou = np.full(n_cls, np.nan)
    present = union > 0
    iou[present] = inter[present] / union[present]
    m = float(np.mean(iou[present])) if present.any() else float("nan")
    acc = float(inter.sum() / cm.sum()) if cm.sum() else float("nan")
    return m, iou, acc


def delta1(pred, gt, threshold=1.25):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise nx.ShapeError(f"{pred.shape} vs {gt.shape}")
    if np.any(pred <= 0) or np.any(gt <= 0):
        raise nx.DomainError("depths must be positive")
    ratio = np.maximum(pred / gt, gt / pred)
    return float(np.mean(ratio < threshold))


# ---------------------------------------------------------------- probes

@dataclass
class SegProbe:
    weight: np.ndarray  # (n_cls, C)
    warnings: list = field(default_factory=list)

    def logits(self, F):
        return np.asarray(F) @ self.weight.T

    def predict(self, F):
        return np.argmax(self.logits(F), axis=-1)


@dataclass
class DepthProbe:
    weight: np.ndarray  # (bins, 2C)
    bins: np.ndarray

    def probabilities(self, F):
        F = np.asarray(F)
        S = np.concatenate([F, F], axis=-1) @ self.weight.T
        return depth_probabilities(S)

    def predict(self, F):
        return self.probabilities(F) @ self.bins


def depth_probabilities(S):
    R = np.maximum(S, 0.0) + 0.1
    return R / R.sum(axis=-1, keepdims=True)


def depth_bins(n=256, lo=1.0, hi=11.0):
    return np.linspace(lo, hi, n)


def _stack(features):
    feats = [np.asarray(f.data if isinstance(f, Tensor) else f, dtype=np.float64) for f in features]
    return feats


def probe_seg(features, labels, n_cls, iterations=500, lr=1e-2, seed=0) -> SegProbe:
    """Softmax cross-entropy on a bias-free linear map; features are treated as constants."""
    feats = _stack(features)
    X = np.concatenate([f.reshape(-1, f.shape[-1]) for f in feats])
    y = np.concatenate([np.asarray(l).ravel() for l in labels])
    if len(X) != len(y):
        raise nx.ShapeError("features and labels disagree in pixel count")
    warnings = [f"class {c} absent from probe training labels" for c in range(n_cls) if not np.any(y == c)]
    for w in warnings:
        log.warning(w)
    W = Rng(seed, stream=0x5E).normal((n_cls, X.shape[1]), scale=0.01)
    opt = AdamW(lr, 1e-5)
    onehot = np.eye(n_cls)[y]
    for _ in range(iterations):
        z = X @ W.T
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        grad = (p - onehot).T @ X / len(X)
        opt.step([W], [grad])
    return SegProbe(W, warnings)


def sig_loss(D, D_gt, variance_weight=0.85) -> Tensor:
    g = nx.log(D) - nx.log(nx.as_tensor(D_gt))
    return nx.sqrt(nx.mean(g * g) - nx.mean(g) * nx.mean(g) * variance_weight)


def gradient_loss(D, D_gt) -> Tensor:
    """L1 between first differences of log depth along x and y; D is (H, W)."""
    e = nx.log(D) - nx.log(nx.as_tensor(D_gt))
    dx = nx.getitem(e, (slice(None), slice(1, None))) - nx.getitem(e, (slice(None), slice(None, -1)))
    dy = nx.getitem(e, (slice(1, None), slice(None))) - nx.getitem(e, (slice(None, -1), slice(None)))
    return nx.mean(nx.abs_(dx)) + nx.mean(nx.abs_(dy))


def depth_forward(F, W, bins) -> Tensor:
    F = nx.as_tensor(F)
    H, Wd, C = F.shape
    X = nx.concat([F, F], axis=-1).reshape(H * Wd, 2 * C)
    S = nx.matmul(X, nx.transpose(W, (1, 0)))
    R = nx.relu(S) + 0.1
    P = R / nx.sum_(R, axis=1).reshape(H * Wd, 1)
    return nx.matmul(P, Tensor(bins.reshape(-1, 1))).reshape(H, Wd)


def depth_loss(D, D_gt) -> Tensor:
    return sig_loss(D, D_gt) + gradient_loss(D, D_gt)


def probe_depth(features, depths, bins=None, iterations=500, lr=1e-2, seed=0) -> DepthProbe:
    """Soft-bin depth head trained one map per step, cycling through the training maps."""
    bins = depth_bins() if bins is None else np.asarray(bins, dtype=np.float64)
    feats = _stack(features)
    depths = [np.asarray(d, dtype=np.float64) for d in depths]
    for d in depths:
        if np.any(d <= 0):
            raise nx.DomainError("ground-truth depth must be positive")
    C = feats[0].shape[-1]
    W = Tensor(Rng(seed, stream=0xDE).normal((len(bins), 2 * C), scale=0.01), requires_grad=True)
    opt = AdamW(lr, 1e-5)
    for it in range(iterations):
        i = it % len(feats)
        W.grad = None
        loss = depth_loss(depth_forward(feats[i], W, bins), depths[i])
        loss.backward()
        opt.step([W.data], [W.grad])
    W.grad = None
    return DepthProbe(W.data.copy(), bins)


# ---------------------------------------------------------------- experiments

@dataclass
class MetricReport:
    suite: str
    config: str
    seed: int
    miou: float = float("nan")
    acc: float = float("nan")
    delta1: float = float("nan")
    per_class: tuple = ()
    status: str = "ok"


def eval_data(cfg: RunConfig, seed: int):
    """Probe-train and probe-test scenes shared by every configuration under one seed."""
    p = cfg.probe
    tr = [gen_scene(Rng(seed, stream=0x200 + i), cfg.scene) for i in range(p.train_scenes)]
    te = [gen_scene(Rng(seed, stream=0x300 + i), cfg.scene) for i in range(p.test_scenes)]
    return tr, te


def train_scenes(cfg: RunConfig, seed: int):
    return [gen_scene(Rng(seed, stream=0x100 + i), cfg.scene) for i in range(cfg.train.scenes)]


def hr_features(scene, cfg: RunConfig, params=None):
    """Upsampled features of the probed extractor; bilinear when ``params`` is None."""
    t = cfg.train
    src = cfg.vfms[cfg.probe.source]
    F_lr = extract(src, scene.image, stride=t.coarse_stride)
    s = t.coarse_stride // t.fine_stride
    if params is None:
        return bilinear_upsample(F_lr, s)
    with nx.no_grad():
        return upsample(avg_pool(scene.image, t.fine_stride), F_lr, params, cfg.train_config(0).upsampler, scale=s).data


def evaluate(cfg: RunConfig, seed: int, params=None, suite="", name=""):
    """Train both probes on upsampled features of the probe-train scenes, score on the test scenes."""
    p, k, n_cls = cfg.probe, cfg.train.fine_stride, cfg.scene.n_classes
    tr, te = eval_data(cfg, seed)
    Ftr = [hr_features(s, cfg, params) for s in tr]
    Fte = [hr_features(s, cfg, params) for s in te]
    seg = probe_seg(Ftr, [label_grid(s.labels, k, n_cls) for s in tr], n_cls, p.iterations, p.lr, seed)
    pred = np.stack([seg.predict(f) for f in Fte])
    gt = np.stack([label_grid(s.labels, k, n_cls) for s in te])
    m, iou, acc = miou(pred, gt, n_cls)
    d1 = float("nan")
    if p.depth and p.depth_iterations > 0:
        bins = depth_bins(p.bins, cfg.scene.depth_min, cfg.scene.depth_max)
        dp = probe_depth(Ftr, [avg_pool(s.depth, k) for s in tr], bins, p.depth_iterations, p.lr, seed)
        d1 = delta1(np.stack([dp.predict(f) for f in Fte]), np.stack([avg_pool(s.depth, k) for s in te]))
    return MetricReport(suite, name, seed, m, acc, d1, tuple(iou), "ok")


def run_once(cfg: RunConfig, seed: int, suite="", name="", bilinear=False) -> MetricReport:
    if bilinear:
        return evaluate(cfg, seed, None, suite, name)
    try:
        result = train(train_scenes(cfg, seed), cfg.train_config(seed))
    except DivergenceError as exc:
        log.warning("run %s/%s seed %d diverged: %s", suite, name, seed, exc)
        return MetricReport(suite, name, seed, status="diverged")
    return evaluate(cfg, seed, result.params, suite, name)


SUITES = ("guidance-panel", "fusion-strategy", "window-sweep", "bilinear-baseline")


def suite_configs(suite: str, base: RunConfig):
    """(name, config, bilinear) triples for one ablation suite."""
    t = base.train
    if suite == "guidance-panel":
        rows = [("none", replace(base, train=replace(t, lam=0.0)), False)]
        for j, g in enumerate(t.guidance):
            rows.append((f"guide-{'ABCDEFGH'[j]}", replace(base, train=replace(t, guidance=(g,))), False))
        if len(t.guidance) > 1:
            rows.append(("all", base, False))
        return rows
    if suite == "fusion-strategy":
        return [("mean-fusion", replace(base, strategy="mean"), False), ("sa-selection", replace(base, strategy="sa"), False)]
    if suite == "window-sweep":
        return [(f"w={w}", replace(base, relational=replace(base.relational, window=w)), False) for w in (3, 5, 7, 9)]
    if suite == "bilinear-baseline":
        return [("bilinear", base, True), ("trained", base, False)]
    raise ValueError(f"unknown suite {suite!r}; expected one of {SUITES}")


_RUN_CACHE: dict = {}


def _job(args):
    cfg, seed, suite, name, bilinear = args
    key = (dump_config(cfg), seed, bilinear)
    hit = _RUN_CACHE.get(key)
    if hit is None:
        hit = run_once(cfg, seed, suite, name, bilinear)
        _RUN_CACHE[key] = hit
    return replace(hit, suite=suite, config=name)


@dataclass
class AblationReport:
    suite: str
    rows: list  # MetricReport per (config, seed)

    def configs(self):
        seen = []
        for r in self.rows:
            if r.config not in seen:
                seen.append(r.config)
        return seen

    def summary(self):
        """Per configuration: (name, n_ok, miou mean, miou std, delta1 mean, delta1 std, n_failed)."""
        out = []
        for name in self.configs():
            rs = [r for r in self.rows if r.config == name]
            ok = [r for r in rs if r.status == "ok"]
            mi = np.array([r.miou for r in ok])
            d1 = np.array([r.delta1 for r in ok])

            def stat(a):
                return (float(a.mean()), float(a.std())) if a.size else (float("nan"), float("nan"))

            out.append((name, len(ok), *stat(mi), *stat(d1), len(rs) - len(ok)))
        return out

    def mean_miou(self, name):
        return next(s[2] for s in self.summary() if s[0] == name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["suite", "config", "seed", "status", "miou", "acc", "delta1"])
        for r in self.rows:
            w.writerow([r.suite, r.config, r.seed, r.status, _fmt(r.miou), _fmt(r.acc), _fmt(r.delta1)])
        w.writerow([])
        w.writerow(["suite", "config", "runs", "miou_mean", "miou_std", "delta1_mean", "delta1_std", "failed"])
        for name, n, mm, ms, dm, ds, nf in self.summary():
            w.writerow([self.suite, name, n, _fmt(mm), _fmt(ms), _fmt(dm), _fmt(ds), nf])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{self.suite}", f"{'config':<14} {'runs':>4}  {'mIoU':>15}  {'delta1':>15}"]
        for name, n, mm, ms, dm, ds, nf in self.summary():
            flag = f"  ({nf} failed)" if nf else ""
            lines.append(f"{name:<14} {n:>4}  {mm:7.4f} ± {ms:.4f}  {dm:7.4f} ± {ds:.4f}{flag}")
        return "\n".join(lines)


def _fmt(x):
    return "nan" if x != x else f"{x:.6f}"


def run_ablation(suite: str, base: RunConfig, seeds, workers: int = 1) -> AblationReport:
    """Train and probe every configuration of a suite for every seed; rows ordered by (config, seed)."""
    jobs = [(cfg, int(s), suite, name, bil) for name, cfg, bil in suite_configs(suite, base) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            rows = list(ex.map(_job, jobs))
    else:
        rows = [_job(j) for j in jobs]
    return AblationReport(suite, rows)


def report_csv(reports) -> str:
    """Single-run metric rows (probe/eval subcommands)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", "seed", "status", "miou", "acc", "delta1", "per_class_iou"])
    for r in reports:
        w.writerow([r.config, r.seed, r.status, _fmt(r.miou), _fmt(r.acc), _fmt(r.delta1),
                    " ".join(_fmt(v) for v in r.per_class)])
    return buf.getvalue()


# ---------------------------------------------------------------- raster emitters

def entropy_image(H, max_entropy=None):
    """Entropy map to 8-bit grey; bright means diffuse affinity."""
    H = np.asarray(H, dtype=np.float64)
    top = float(H.max()) if max_entropy is None else float(max_entropy)
    if top <= 0:
        return np.zeros(H.shape, dtype=np.uint8)
    return np.clip(np.rint(255.0 * H / top), 0, 255).astype(np.uint8)


def com_image(b):
    """COM field to RGB: hue is the direction, value the magnitude (full saturation)."""
    b = np.asarray(b, dtype=np.float64)
    ang = (np.arctan2(b[..., 1], b[..., 0]) / (2 * math.pi)) % 1.0
    val = np.clip(np.hypot(b[..., 0], b[..., 1]) / math.sqrt(2.0), 0.0, 1.0)
    h6 = ang * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = np.zeros_like(val)
    q = val * (1 - f)
    t = val * f
    choices = [(val, t, p), (q, val, p), (p, val, t), (p, q, val), (t, p, val), (val, p, q)]
    rgb = np.zeros(b.shape[:2] + (3,))
    for k, (r, g, bl) in enumerate(choices):
        m = i == k
        rgb[m] = np.stack([r[m], g[m], bl[m]], axis=-1)
    return np.clip(np.rint(255.0 * rgb), 0, 255).astype(np.uint8)


def selection_image(alpha_or_index, n_sources=None):
    """Selected source index per pixel spread over the grey range."""
    a = np.asarray(alpha_or_index)
    idx = np.argmax(a, axis=-1) if a.ndim == 3 else a.astype(int)
    n = (a.shape[-1] if a.ndim == 3 else int(idx.max()) + 1) if n_sources is None else n_sources
    if n <= 1:
        return np.zeros(idx.shape, dtype=np.uint8)
    return (idx * (255 // (n - 1))).astype(np.uint8)
