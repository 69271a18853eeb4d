"""Oracle-equivalence and finite-difference suites, runnable from the CLI or the tests."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from . import oracles
from .fusion import FusionConfig, fuse_fields
from .numerics import Rng
from .relational import RelationalConfig, RelationalField, com_field, entropy, local_affinity, spikiness
from .training import TrainConfig, TrainPair, loss_guide, loss_rec, loss_total
from .upsampler import UpsamplerConfig, UpsamplerParams, neighborhood_attention


@dataclass
class CheckResult:
    name: str
    cases: int
    worst: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.worst < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.cases} cases, max error {self.worst:.3e} (tol {self.tol:g}), {self.seconds:.1f}s"


def _diff(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        return np.inf
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def _field_instance(rng: Rng):
    H, W = (int(v) for v in rng.integers(2, 7, size=2))
    C = int(rng.integers(1, 6))
    w = int(rng.choice([1, 3, 5, 7]))
    z = rng.normal((H, W, C), scale=float(rng.uniform(0.2, 3.0)))
    cfg = RelationalConfig(window=w, dim=C, temperature=float(rng.uniform(0.5, 4.0)))
    return z, cfg


def oracle_suite(n=100, seed=0, tol=1e-12):
    """Vectorised operators against loop references on ``n`` seeded instances each."""
    rng = Rng(seed, stream=0x0A)
    results = []

    def run(name, case):
        t = time.perf_counter()
        worst = max(case(rng.split(i)) for i in range(n))
        results.append(CheckResult(name, n, worst, tol, time.perf_counter() - t))

    def affinity_case(r):
        z, cfg = _field_instance(r)
        return _diff(local_affinity(z, cfg).data, oracles.affinity(z, cfg.window, cfg.tau))

    def entropy_case(r):
        z, cfg = _field_instance(r)
        S = local_affinity(z, cfg).data
        return _diff(entropy(S).data, oracles.entropy(S))

    def spikiness_case(r):
        z, cfg = _field_instance(r)
        if r.random() < 0.2:
            z[..., 0] += 10.0
        return _diff(spikiness(z, cfg.eps).data, oracles.spikiness(z, cfg.eps))

    def com_case(r):
        z, cfg = _field_instance(r)
        S = local_affinity(z, cfg).data
        return _diff(com_field(S, cfg).data, oracles.com(S))

    def consensus_case(r):
        H, W = (int(v) for v in r.integers(2, 7, size=2))
        n_src = int(r.integers(1, 5))
        cfg = FusionConfig(beta=float(r.choice([0.0, 20.0, r.uniform(0, 40)])), gamma=float(r.uniform(0, 1)))
        fields = [RelationalField(r.uniform(0, 4, (H, W)), r.uniform(0, 1, (H, W)), r.uniform(-1, 1, (H, W, 2)))
                  for _ in range(n_src)]
        if n_src > 1 and r.random() < 0.3:
            fields[-1] = fields[0]  # exact ties resolve to the lowest index
        got = fuse_fields(fields, cfg)
        ref_b, ref_idx = oracles.consensus([f.entropy for f in fields], [f.spikiness for f in fields],
                                           [f.com for f in fields], cfg.beta, cfg.gamma, cfg.std_floor)
        return _diff(got.b_ens, ref_b) + float(np.any(got.selection != ref_idx))

    def attention_case(r):
        h, w = (int(v) for v in r.integers(1, 5, size=2))
        s = int(r.integers(1, 4))
        d, C = int(r.integers(1, 6)), int(r.integers(1, 5))
        win = int(r.choice([1, 3, 5]))
        Q = r.normal((h * s, w * s, d))
        K = r.normal((h, w, d))
        V = r.normal((h, w, C))
        return _diff(neighborhood_attention(Q, K, V, win).data, oracles.neighborhood_attention(Q, K, V, win))

    def rec_case(r):
        shape = tuple(int(v) for v in r.integers(1, 6, size=3))
        A, B = r.normal(shape), r.normal(shape)
        return abs(float(loss_rec(A, B).data) - oracles.loss_rec(A, B))

    def guide_case(r):
        H, W = (int(v) for v in r.integers(1, 8, size=2))
        a, b = r.uniform(-1, 1, (H, W, 2)), r.uniform(-1, 1, (H, W, 2))
        return abs(float(loss_guide(a, b).data) - oracles.loss_guide(a, b))

    with nx.no_grad():
        run("affinity", affinity_case)
        run("entropy", entropy_case)
        run("spikiness", spikiness_case)
        run("com", com_case)
        run("consensus", consensus_case)
        run("attention", attention_case)
        run("loss_rec", rec_case)
        run("loss_guide", guide_case)
    return results


TINY_UPSAMPLER = UpsamplerConfig(dim=8, window=3, widths=(4, 4), kernels=(5, 3, 3), scale=2)


def tiny_instance(seed: int, channels=4):
    """An 8x8 -> 16x16 pair with random targets and a small upsampler."""
    rng = Rng(seed, stream=0x6C)
    pair = TrainPair(
        image=rng.uniform(0, 1, (16, 16, 3)),
        F_lr=rng.normal((8, 8, channels)),
        F_hr=rng.normal((16, 16, channels)),
        b_ens=rng.uniform(-0.5, 0.5, (16, 16, 2)),
    )
    ucfg = UpsamplerConfig(**{**TINY_UPSAMPLER.__dict__, "seed": seed})
    cfg = TrainConfig(coarse_stride=4, fine_stride=2, upsampler=ucfg)
    params = UpsamplerParams.init(ucfg)
    # scale the weights up a little so the attention is far from uniform
    for t in params.tensors:
        t.data *= 1.5
        t.data += rng.normal(t.data.shape, scale=0.05)
    return pair, params, cfg


def gradient_suite(n=10, seed=0, tol=1e-4, lam=0.5):
    """Reverse-mode vs central differences for every parameter entry of ``n`` tiny instances."""
    worst = {"loss_rec": 0.0, "loss_guide": 0.0, "loss_total": 0.0}
    t = time.perf_counter()
    for i in range(n):
        pair, params, cfg = tiny_instance(seed * 1000 + i)

        def f(tensors):
            total, rec, guide = loss_total(pair, params, lam, cfg)
            return {"loss_rec": rec, "loss_guide": guide, "loss_total": total}

        rep = nx.grad_check(f, params.tensors, tol=tol)
        for (name, _), e in rep.errors.items():
            worst[name] = max(worst[name], e)
    dt = time.perf_counter() - t
    return [CheckResult(f"grad {k}", n, v, tol, dt) for k, v in worst.items()]


def run_selftest(n_oracle=25, n_grad=2, seed=0, out=print) -> bool:
    results = oracle_suite(n_oracle, seed) + gradient_suite(n_grad, seed)
    for r in results:
        out(r.line())
    ok = all(r.passed for r in results)
    out("selftest " + ("passed" if ok else "FAILED"))
    return ok
