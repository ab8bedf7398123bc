"""Slow, independent reference implementations used only by the tests."""

from __future__ import annotations

import math

import numpy as np


# -- metrics -----------------------------------------------------------------------
def auc_pairs(scores, labels) -> float:
    """O(n^2) Mann-Whitney: P(attack score > bonafide score) + 0.5 P(tie)."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def sweep(scores, labels):
    """(fpr, tpr) at every distinct threshold, high to low, starting at (0, 0)."""
    scores = np.asarray(scores, float)
    labels = np.asarray(labels)
    n_pos = (labels == 1).sum()
    n_neg = (labels == 0).sum()
    pts = [(0.0, 0.0)]
    for t in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= t
        pts.append((float((pred & (labels == 0)).sum() / n_neg), float((pred & (labels == 1)).sum() / n_pos)))
    return pts


def eer_sweep(scores, labels) -> float:
    """Crossing of FPR and FNR on the piecewise-linear ROC, by scanning segments."""
    pts = sweep(scores, labels)
    for (f0, t0), (f1, t1) in zip(pts, pts[1:]):
        g0 = f0 - (1 - t0)
        g1 = f1 - (1 - t1)
        if g0 <= 0 <= g1:
            if g1 == g0:
                return f0
            u = -g0 / (g1 - g0)
            return f0 + u * (f1 - f0)
    raise AssertionError("no crossing")


def tpr_at_fpr_sweep(scores, labels, target: float) -> float:
    """Max TPR over the piecewise-linear ROC restricted to FPR <= target."""
    pts = sweep(scores, labels)
    best = 0.0
    for (f0, t0), (f1, t1) in zip(pts, pts[1:]):
        if f0 <= target:
            best = max(best, t0)
        if f1 <= target:
            best = max(best, t1)
        elif f0 < target < f1:
            best = max(best, t0 + (target - f0) / (f1 - f0) * (t1 - t0))
    return best


# -- moe ---------------------------------------------------------------------------
def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def ffn(x, p):
    return gelu(x @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]


def sue_token_loop(x, shared, routed, gate_w, gate_b, k, renormalize=True):
    """Token-by-token SUE forward evaluating every expert densely."""
    out = np.zeros_like(x)
    for t in range(x.shape[0]):
        z = x[t] @ gate_w + gate_b
        p = np.exp(z - z.max())
        p /= p.sum()
        order = sorted(range(len(p)), key=lambda i: (-p[i], i))[:k]
        w = np.array([p[i] for i in order])
        if renormalize:
            w = w / w.sum()
        y = ffn(x[t : t + 1], shared)[0] if shared is not None else np.zeros(x.shape[1])
        for wi, i in zip(w, order):
            y = y + wi * ffn(x[t : t + 1], routed[i])[0]
        out[t] = y
    return out


def z_loss(logits):
    logits = np.asarray(logits, float)
    m = logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=-1)) + m[..., 0]
    return float(np.mean(lse**2))


def contrastive_ce(s):
    s = np.asarray(s, float)
    total = 0.0
    for i in range(s.shape[0]):
        row = s[i]
        total += -(row[i] - math.log(sum(math.exp(v) for v in row)))
    return total / s.shape[0]


# -- autodiff ------------------------------------------------------------------------
def central_diff(f, arr: np.ndarray, idx, h: float = 1e-6) -> float:
    old = arr[idx]
    arr[idx] = old + h
    fp = f()
    arr[idx] = old - h
    fm = f()
    arr[idx] = old
    return (fp - fm) / (2 * h)
