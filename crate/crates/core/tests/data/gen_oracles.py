"""Regenerates the frozen reference values used by the integration tests.

Requires numpy, scipy and mpmath. Run from this directory:
    python3 gen_oracles.py
"""
import json

import mpmath
import numpy as np
from scipy import stats


def w(seed, rows, cols):
    return np.array(
        [[(((i * 5 + j * 3 + seed * 7) % 11) - 5) / 8 for j in range(cols)] for i in range(rows)],
        dtype=np.float64,
    )


def gains(seed, n):
    return np.array([1 + (((i + seed) % 3) - 1) / 10 for i in range(n)], dtype=np.float64)


def rms(x, g, eps):
    return g * x / np.sqrt(np.mean(x * x) + eps)


def rope(x, pos, theta):
    d = x.shape[0]
    half = d // 2
    inv = theta ** (-2 * np.arange(half) / d)
    ang = pos * inv
    c, s = np.cos(ang), np.sin(ang)
    a, b = x[:half], x[half:]
    return np.concatenate([a * c - b * s, a * s + b * c])


def tiny_forward(tokens):
    vocab, d, dff, eps, theta = 6, 4, 3, 1e-5, 10000.0
    emb = w(1, vocab, d)
    an, wq, wk, wv, wo = gains(2, d), w(3, d, d), w(4, d, d), w(5, d, d), w(6, d, d)
    fn, wg, wu, wd = gains(7, d), w(8, d, dff), w(9, d, dff), w(10, dff, d)
    norm, out = gains(11, d), w(12, d, vocab)
    x = emb[tokens]
    n = len(tokens)
    h = np.array([rms(r, an, eps) for r in x])
    q = np.array([rope(h[p] @ wq, p, theta) for p in range(n)])
    k = np.array([rope(h[p] @ wk, p, theta) for p in range(n)])
    v = h @ wv
    att = np.zeros((n, d))
    for t in range(n):
        sc = np.array([q[t] @ k[s] / np.sqrt(d) for s in range(t + 1)])
        e = np.exp(sc - sc.max())
        a = e / e.sum()
        att[t] = a @ v[: t + 1]
    x = x + att @ wo
    h = np.array([rms(r, fn, eps) for r in x])
    g = h @ wg
    x = x + ((g / (1 + np.exp(-g))) * (h @ wu)) @ wd
    return np.array([rms(r, norm, eps) @ out for r in x])


def main():
    tokens = [2, 5, 0, 3]
    forward = {"tokens": tokens, "logits": tiny_forward(tokens).tolist()}

    rng = np.random.default_rng(20240601)
    fixed_x = [2.1, 3.4, 1.8, 4.0, 2.9]
    fixed_y = [1.9, 3.1, 1.7, 3.6, 2.8]
    r = stats.ttest_rel(fixed_x, fixed_y)
    ttest = {"fixed": {"x": fixed_x, "y": fixed_y, "t": float(r.statistic), "p": float(r.pvalue)}, "random": []}
    for _ in range(50):
        n = int(rng.integers(3, 40))
        x = rng.normal(0, 1, n)
        y = x + rng.normal(rng.normal(0, 0.3), rng.uniform(0.05, 1.0), n)
        r = stats.ttest_rel(x, y)
        ttest["random"].append({"x": x.tolist(), "y": y.tolist(), "t": float(r.statistic), "p": float(r.pvalue)})

    mpmath.mp.dps = 50
    softmax = []
    for _ in range(20):
        n = int(rng.integers(8, 300))
        logits = (rng.normal(0, 4, n)).tolist()
        ids = [int(i) for i in rng.choice(n, 4, replace=False)]
        correct = int(rng.integers(0, 4))
        z = mpmath.fsum(mpmath.e ** mpmath.mpf(l) for l in logits)
        p = mpmath.e ** mpmath.mpf(logits[ids[correct]]) / z
        softmax.append({"logits": logits, "ids": ids, "correct": correct, "prob": float(p)})

    ttest["welch"] = []
    for _ in range(30):
        x = rng.normal(0, rng.uniform(0.2, 2.0), int(rng.integers(3, 40)))
        y = rng.normal(rng.normal(0, 0.5), rng.uniform(0.2, 2.0), int(rng.integers(3, 40)))
        r = stats.ttest_ind(x, y, equal_var=False)
        ttest["welch"].append({"x": x.tolist(), "y": y.tolist(), "t": float(r.statistic), "p": float(r.pvalue)})

    for name, data in [("forward_oracle", forward), ("ttest_oracle", ttest), ("softmax_oracle", softmax)]:
        with open(f"{name}.json", "w") as f:
            json.dump(data, f, indent=1)
            f.write("\n")


if __name__ == "__main__":
    main()
