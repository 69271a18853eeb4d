"""Slow loop-based reference implementations used by the self-test and the test suite."""

from __future__ import annotations

import math

import numpy as np


def _softmax(vals):
    m = max(vals)
    e = [math.exp(v - m) for v in vals]
    s = sum(e)
    return [v / s for v in e]


def affinity(z, window, tau):
    H, W, C = z.shape
    r = window // 2
    S = np.zeros((H, W, window, window))
    for y in range(H):
        for x in range(W):
            logits = []
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    qy = min(max(y + dy, 0), H - 1)
                    qx = min(max(x + dx, 0), W - 1)
                    logits.append(sum(z[y, x, c] * z[qy, qx, c] for c in range(C)) / tau)
            S[y, x] = np.array(_softmax(logits)).reshape(window, window)
    return S


def entropy(S):
    H, W = S.shape[:2]
    out = np.zeros((H, W))
    for y in range(H):
        for x in range(W):
            out[y, x] = -sum(v * math.log(v) for v in S[y, x].ravel() if v > 0)
    return out


def spikiness(z, eps=1e-6):
    H, W, C = z.shape
    out = np.zeros((H, W))
    for y in range(H):
        for x in range(W):
            v = [abs(z[y, x, c]) for c in range(C)]
            out[y, x] = max(v) / (math.sqrt(sum(t * t for t in v)) + eps)
    return out


def com(S):
    H, W, w, _ = S.shape
    r = w // 2
    out = np.zeros((H, W, 2))
    if r == 0:
        return out
    for y in range(H):
        for x in range(W):
            mx = my = 0.0
            for i in range(w):
                for j in range(w):
                    mx += S[y, x, i, j] * (j - r)
                    my += S[y, x, i, j] * (i - r)
            out[y, x] = [min(max(mx / r, -1.0), 1.0), min(max(my / r, -1.0), 1.0)]
    return out


def consensus(entropies, spikes, coms, beta, gamma, std_floor=1e-8):
    """Per-pixel winner-take-all over sources; returns (b_ens, selected index)."""
    n = len(entropies)
    H, W = entropies[0].shape
    zs = []
    for Hm in entropies:
        vals = [float(v) for v in Hm.ravel()]
        mu = sum(vals) / len(vals)
        sd = math.sqrt(sum((v - mu) ** 2 for v in vals) / len(vals))
        zs.append(np.zeros_like(Hm) if sd < std_floor else (Hm - mu) / sd)
    b = np.zeros((H, W, 2))
    idx = np.zeros((H, W), dtype=int)
    for y in range(H):
        for x in range(W):
            best, arg = -math.inf, 0
            for i in range(n):
                g = -zs[i][y, x] - beta * max(0.0, spikes[i][y, x] - gamma)
                if g > best:
                    best, arg = g, i
            idx[y, x] = arg
            b[y, x] = coms[arg][y, x]
    return b, idx


def neighborhood_attention(Q, K, V, window):
    H, W, d = Q.shape
    h, w, C = V.shape
    s = H // h
    r = window // 2
    out = np.zeros((H, W, C))
    for y in range(H):
        for x in range(W):
            ay, ax = y // s, x // s
            logits, vals = [], []
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    ky, kx = ay + dy, ax + dx
                    if 0 <= ky < h and 0 <= kx < w:
                        logits.append(sum(Q[y, x, c] * K[ky, kx, c] for c in range(d)) / math.sqrt(d))
                        vals.append(V[ky, kx])
            p = _softmax(logits)
            out[y, x] = sum(pi * v for pi, v in zip(p, vals))
    return out


def loss_rec(A, B):
    total = 0.0
    for a, b in zip(np.asarray(A).ravel(), np.asarray(B).ravel()):
        total += (a - b) ** 2
    return total / np.asarray(A).size


def loss_guide(b_hat, b_ens):
    H, W = b_hat.shape[:2]
    total = 0.0
    for y in range(H):
        for x in range(W):
            total += abs(b_hat[y, x, 0] - b_ens[y, x, 0]) + abs(b_hat[y, x, 1] - b_ens[y, x, 1])
    return total / (H * W)


def miou(pred, gt, n_cls):
    pred, gt = np.asarray(pred).ravel(), np.asarray(gt).ravel()
    ious = []
    for c in range(n_cls):
        inter = sum(1 for p, g in zip(pred, gt) if p == c and g == c)
        union = sum(1 for p, g in zip(pred, gt) if p == c or g == c)
        if union:
            ious.append(inter / union)
    return sum(ious) / len(ious) if ious else float("nan")


def delta1(pred, gt, threshold=1.25):
    pred, gt = np.asarray(pred).ravel(), np.asarray(gt).ravel()
    return sum(1 for p, g in zip(pred, gt) if max(p / g, g / p) < threshold) / len(pred)
